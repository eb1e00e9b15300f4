// SPDX-License-Identifier: Apache-2.0

//! Network inputs for one proposal: a masked, resampled channel patch and the
//! seven geometric statistics.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::instance::InstanceProposal;
use crate::par::{self, Execution};
use crate::pointcloud::{ClassId, Scan};
use crate::range_image::ChannelStack;

pub const STAT_LEN: usize = 7;
pub const DEFAULT_PATCH_SIDE: usize = 32;

const PATCH_MAGIC: &[u8; 4] = b"LPCH";
const PATCH_VERSION: u16 = 1;
const UNKNOWN_CLASS: u8 = 255;
const STAT_CLAMP: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatVector {
    /// Extent along y, meters.
    pub width: f64,
    /// Extent along x, meters.
    pub length: f64,
    pub height: f64,
    pub point_count: usize,
    /// Centroid distances from the sensor origin.
    pub d_euclid: f64,
    pub d_x: f64,
    pub d_y: f64,
}

impl StatVector {
    pub fn raw(&self) -> [f32; STAT_LEN] {
        [
            self.width as f32,
            self.length as f32,
            self.height as f32,
            self.point_count as f32,
            self.d_euclid as f32,
            self.d_x as f32,
            self.d_y as f32,
        ]
    }

    /// Fixed scaling into roughly unit range, each value clamped to [0, 1.5].
    pub fn normalized(&self) -> [f32; STAT_LEN] {
        let v = [
            self.width / 20.0,
            self.length / 20.0,
            self.height / 5.0,
            (self.point_count.max(1) as f64).log10() / 4.0,
            self.d_euclid / 80.0,
            self.d_x / 80.0,
            self.d_y / 80.0,
        ];
        v.map(|x| x.clamp(0.0, STAT_CLAMP) as f32)
    }
}

pub fn compute_stats(proposal: &InstanceProposal, scan: &Scan) -> Result<StatVector> {
    if proposal.point_indices.is_empty() {
        return Err(Error::Contract("statistics of an empty proposal".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut sum = [0.0f64; 3];
    for &i in &proposal.point_indices {
        let p = scan
            .points
            .get(i as usize)
            .ok_or_else(|| Error::Contract(format!("point index {i} outside scan")))?;
        for (k, v) in [p.x as f64, p.y as f64, p.z as f64].into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
            sum[k] += v;
        }
    }
    let n = proposal.point_indices.len();
    let c = sum.map(|s| s / n as f64);
    Ok(StatVector {
        width: hi[1] - lo[1],
        length: hi[0] - lo[0],
        height: hi[2] - lo[2],
        point_count: n,
        d_euclid: (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt(),
        d_x: c[0].abs(),
        d_y: c[1].abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `channels` planes of `side × side`, plane-major then row-major.
    pub planes: Vec<f32>,
    pub channels: usize,
    pub side: usize,
    pub stats: StatVector,
    /// Index of the source proposal within its scan.
    pub proposal_ref: usize,
    pub gt_class: Option<ClassId>,
}

impl Patch {
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.planes[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub patches: Vec<Patch>,
    pub channels: usize,
    pub side: usize,
}

impl Batch {
    pub fn new(patches: Vec<Patch>) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (channels, side) = (first.channels, first.side);
        if patches.iter().any(|p| p.channels != channels || p.side != side) {
            return Err(Error::Contract("patches of mixed shape in one batch".into()));
        }
        Ok(Self {
            patches,
            channels,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Crop window around the proposal: the image box grown by 10% of its extent
/// per side, rows clamped to the image, columns wrapping.
struct Crop {
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
}

fn crop_for(p: &InstanceProposal, height: usize, width: usize) -> Crop {
    let b = p.bbox;
    let rm = b.rows() / 10;
    let row0 = b.row_min.saturating_sub(rm);
    let row1 = (b.row_max + rm).min(height - 1);
    let bw = b.cols(width);
    let cm = bw / 10;
    let cols = (bw + 2 * cm).min(width);
    let col0 = (b.col_min + width - cm % width) % width;
    Crop {
        row0,
        rows: row1 - row0 + 1,
        col0,
        cols,
    }
}

pub fn extract_patch(
    proposal: &InstanceProposal,
    stack: &ChannelStack,
    side: usize,
) -> Result<Patch> {
    if side < 4 {
        return Err(Error::Contract(format!("patch side {side} below 4")));
    }
    if proposal.pixels.is_empty() {
        return Err(Error::Contract("patch of an empty proposal".into()));
    }
    let (h, w) = (stack.height, stack.width);
    let crop = crop_for(proposal, h, w);
    let mut member = vec![false; crop.rows * crop.cols];
    for &(r, c) in &proposal.pixels {
        let (r, c) = (r as usize, c as usize);
        let dc = (c + w - crop.col0) % w;
        if r >= crop.row0 && r - crop.row0 < crop.rows && dc < crop.cols {
            member[(r - crop.row0) * crop.cols + dc] = true;
        }
    }
    // Nearest-neighbor source offsets for each output row and column.
    let src_rows: Vec<usize> = (0..side).map(|i| i * crop.rows / side).collect();
    let src_cols: Vec<usize> = (0..side).map(|j| j * crop.cols / side).collect();
    let mut planes = vec![0.0f32; stack.planes.len() * side * side];
    for (plane, out) in stack.planes.iter().zip(planes.chunks_exact_mut(side * side)) {
        for (i, &sr) in src_rows.iter().enumerate() {
            let row = crop.row0 + sr;
            for (j, &sc) in src_cols.iter().enumerate() {
                if member[sr * crop.cols + sc] {
                    let col = (crop.col0 + sc) % w;
                    out[i * side + j] = plane[row * w + col];
                }
            }
        }
    }
    Ok(Patch {
        planes,
        channels: stack.planes.len(),
        side,
        stats: StatVector {
            width: 0.0,
            length: 0.0,
            height: 0.0,
            point_count: proposal.len(),
            d_euclid: 0.0,
            d_x: 0.0,
            d_y: 0.0,
        },
        proposal_ref: 0,
        gt_class: proposal.gt_class,
    })
}

pub fn make_batch(
    proposals: &[InstanceProposal],
    stack: &ChannelStack,
    scan: &Scan,
    side: usize,
    exec: Execution,
) -> Result<Batch> {
    if proposals.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let indexed: Vec<(usize, &InstanceProposal)> = proposals.iter().enumerate().collect();
    let patches = par::map(&indexed, exec, |&(i, p)| {
        let mut patch = extract_patch(p, stack, side)?;
        patch.stats = compute_stats(p, scan)?;
        patch.proposal_ref = i;
        Ok(patch)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Batch::new(patches)
}

/// Writes the trainer's patch container.
pub fn write_patch_dump<W: Write>(mut out: W, patches: &[Patch]) -> Result<()> {
    let io = |e| Error::io("<patch dump>", e);
    let (channels, side) = patches.first().map_or((0, 0), |p| (p.channels, p.side));
    if patches.iter().any(|p| p.channels != channels || p.side != side) {
        return Err(Error::Contract("patches of mixed shape in one dump".into()));
    }
    let narrow = |v: usize, what: &str| {
        u8::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit in u8")))
    };
    let count = u32::try_from(patches.len())
        .map_err(|_| Error::Contract("too many patches for one dump".into()))?;
    let mut buf = Vec::with_capacity(16 + patches.len() * (57 + 4 * channels * side * side));
    buf.extend_from_slice(PATCH_MAGIC);
    buf.extend_from_slice(&PATCH_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.push(narrow(channels, "channel count")?);
    buf.push(narrow(side, "patch side")?);
    for p in patches {
        buf.push(p.gt_class.map_or(UNKNOWN_CLASS, |c| c as u8));
        for v in p.stats.raw().iter().chain(p.stats.normalized().iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &p.planes {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)
}

/// A patch as stored in a dump: raw and normalized statistics side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedPatch {
    pub gt_class: Option<ClassId>,
    pub raw_stats: [f32; STAT_LEN],
    pub normalized_stats: [f32; STAT_LEN],
    pub planes: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDump {
    pub channels: usize,
    pub side: usize,
    pub patches: Vec<DumpedPatch>,
}

pub fn read_patch_dump<R: Read>(mut input: R) -> Result<PatchDump> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<patch dump>", e))?;
    let short = || Error::Format("patch dump truncated".into());
    if bytes.len() < 12 || &bytes[..4] != PATCH_MAGIC {
        return Err(Error::Format("not a patch dump (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PATCH_VERSION {
        return Err(Error::Format(format!("unsupported patch dump version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let (channels, side) = (bytes[10] as usize, bytes[11] as usize);
    let plane_len = channels * side * side;
    let record = 1 + 4 * (2 * STAT_LEN + plane_len);
    let body = &bytes[12..];
    if body.len() != count * record {
        return Err(if body.len() < count * record {
            short()
        } else {
            Error::Format("trailing bytes after patch dump".into())
        });
    }
    let floats = |b: &[u8]| -> Vec<f32> {
        b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let patches = body
        .chunks_exact(record)
        .map(|rec| {
            let gt_class = match rec[0] {
                UNKNOWN_CLASS => None,
                c => Some(
                    ClassId::from_index(c as usize)
                        .ok_or_else(|| Error::Format(format!("bad class byte {c}")))?,
                ),
            };
            let stats = floats(&rec[1..1 + 8 * STAT_LEN]);
            Ok(DumpedPatch {
                gt_class,
                raw_stats: stats[..STAT_LEN].try_into().unwrap(),
                normalized_stats: stats[STAT_LEN..].try_into().unwrap(),
                planes: floats(&rec[1 + 8 * STAT_LEN..]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchDump {
        channels,
        side,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{ImageBox, ProposalSource};
    use crate::pointcloud::Point;
    use crate::range_image::Channel;
    use proptest::prelude::*;

    fn proposal(points: Vec<u32>, pixels: Vec<(u32, u32)>, bbox: ImageBox) -> InstanceProposal {
        InstanceProposal {
            pixels,
            point_indices: points,
            bbox,
            source: ProposalSource::Clustered,
            gt_class: None,
            gt_instance_id: None,
        }
    }

    fn square(r0: u32, c0: u32, n: u32) -> (Vec<(u32, u32)>, ImageBox) {
        let px = (r0..r0 + n)
            .flat_map(|r| (c0..c0 + n).map(move |c| (r, c)))
            .collect();
        let b = ImageBox {
            row_min: r0 as usize,
            col_min: c0 as usize,
            row_max: (r0 + n - 1) as usize,
            col_max: (c0 + n - 1) as usize,
        };
        (px, b)
    }

    fn stack(h: usize, w: usize, intensity: impl Fn(usize, usize) -> f32) -> ChannelStack {
        let mut inten = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                inten[r * w + c] = intensity(r, c);
            }
        }
        ChannelStack {
            height: h,
            width: w,
            channels: vec![Channel::Intensity, Channel::Mask],
            planes: vec![inten, vec![1.0; h * w]],
        }
    }

    #[test]
    fn stats_two_points() {
        let scan = Scan::new(
            "s",
            vec![Point::new(10.0, 2.0, 0.2, 0.0), Point::new(10.5, 2.4, 1.0, 0.0)],
        );
        let (px, b) = square(0, 0, 1);
        let s = compute_stats(&proposal(vec![0, 1], px, b), &scan).unwrap();
        // Oracle: direct min / max / mean.
        let xs = [10.0f32 as f64, 10.5];
        let ys = [2.0f32 as f64, 2.4f32 as f64];
        let zs = [0.2f32 as f64, 1.0];
        assert!((s.length - (xs[1] - xs[0])).abs() < 1e-12);
        assert!((s.width - (ys[1] - ys[0])).abs() < 1e-12);
        assert!((s.height - (zs[1] - zs[0])).abs() < 1e-12);
        assert_eq!(s.point_count, 2);
        let c = [(xs[0] + xs[1]) / 2.0, (ys[0] + ys[1]) / 2.0, (zs[0] + zs[1]) / 2.0];
        assert!((s.d_x - 10.25).abs() < 1e-6 && (s.d_y - 2.2).abs() < 1e-6);
        assert!((s.d_euclid - (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()).abs() < 1e-12);
        assert!((s.d_euclid - 10.50).abs() < 5e-3);
    }

    #[test]
    fn stats_single_point() {
        let scan = Scan::new("s", vec![Point::new(3.0, 4.0, 0.0, 0.0)]);
        let (px, b) = square(0, 0, 1);
        let s = compute_stats(&proposal(vec![0], px, b), &scan).unwrap();
        assert_eq!((s.width, s.length, s.height), (0.0, 0.0, 0.0));
        assert_eq!(s.point_count, 1);
        assert!((s.d_euclid - 5.0).abs() < 1e-12);
        assert_eq!((s.d_x, s.d_y), (3.0, 4.0));
        assert_eq!(s.normalized()[3], 0.0);
    }

    #[test]
    fn stats_of_empty_proposal_is_rejected() {
        let (_, b) = square(0, 0, 1);
        let p = proposal(vec![], vec![], b);
        assert!(compute_stats(&p, &Scan::default()).is_err());
    }

    #[test]
    fn normalization_is_clamped() {
        let s = StatVector {
            width: 100.0,
            length: 10.0,
            height: 2.5,
            point_count: 10_000,
            d_euclid: 40.0,
            d_x: 0.0,
            d_y: 200.0,
        };
        assert_eq!(s.normalized(), [1.5, 0.5, 0.5, 1.0, 0.5, 0.0, 1.5]);
    }

    #[test]
    fn constant_instance_region() {
        // 28 rows and columns plus a floor(2.8) = 2 pixel margin per side is exactly 32.
        let (px, b) = square(10, 100, 28);
        let st = stack(64, 256, |_, _| 0.8);
        let p = extract_patch(&proposal(vec![0; 784], px, b), &st, 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let inside = (2..30).contains(&i) && (2..30).contains(&j);
                let expect = if inside { (0.8, 1.0) } else { (0.0, 0.0) };
                assert_eq!((p.plane(0)[i * 32 + j], p.plane(1)[i * 32 + j]), expect);
            }
        }
    }

    #[test]
    fn background_inside_box_is_zeroed() {
        // L-shaped instance: the missing corner holds background intensity 0.9.
        let (mut px, b) = square(0, 0, 2);
        px.retain(|&p| p != (1, 1));
        let st = stack(8, 16, |r, c| if (r, c) == (1, 1) { 0.9 } else { 0.4 });
        let p = extract_patch(&proposal(vec![0; 3], px, b), &st, 4).unwrap();
        assert_eq!(p.plane(0)[3 * 4 + 3], 0.0);
        assert_eq!(p.plane(1)[3 * 4 + 3], 0.0);
        assert_eq!(p.plane(0)[0], 0.4);
    }

    #[test]
    fn nearest_neighbor_blocks() {
        let (px, b) = square(5, 5, 2);
        let st = stack(16, 16, |r, c| (r * 16 + c) as f32 / 256.0);
        let p = extract_patch(&proposal(vec![0; 4], px, b), &st, 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let src = (5 + i / 16) * 16 + (5 + j / 16);
                assert_eq!(p.plane(0)[i * 32 + j], src as f32 / 256.0);
            }
        }
    }

    #[test]
    fn single_pixel_is_replicated() {
        let (px, b) = square(3, 3, 1);
        let st = stack(8, 8, |_, _| 0.7);
        let p = extract_patch(&proposal(vec![0], px, b), &st, 8).unwrap();
        assert!(p.plane(0).iter().all(|&v| v == 0.7));
        assert!(extract_patch(&proposal(vec![0], vec![(3, 3)], b), &st, 3).is_err());
    }

    #[test]
    fn crop_wraps_across_seam() {
        let w = 64;
        let px: Vec<(u32, u32)> = (0..4).flat_map(|r| [62u32, 63, 0, 1].map(|c| (r, c))).collect();
        let b = ImageBox {
            row_min: 0,
            col_min: 62,
            row_max: 3,
            col_max: 1,
        };
        let st = stack(8, w, |_, c| if c >= 62 || c <= 1 { 0.6 } else { 0.1 });
        let p = extract_patch(&proposal(vec![0; 16], px, b), &st, 4).unwrap();
        assert!(p.plane(0).iter().all(|&v| v == 0.6));
    }

    #[test]
    fn exact_fit_copies_source_values() {
        // bbox 10x10 plus 1 pixel margin = 12 = patch side: no resampling.
        let (px, b) = square(4, 4, 10);
        let st = stack(20, 20, |r, c| (r * 20 + c) as f32 / 400.0);
        let p = extract_patch(&proposal(vec![0; 100], px, b), &st, 12).unwrap();
        for i in 1..11 {
            for j in 1..11 {
                assert_eq!(p.plane(0)[i * 12 + j], st.planes[0][(3 + i) * 20 + 3 + j]);
            }
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let st = stack(4, 4, |_, _| 0.0);
        assert!(make_batch(&[], &st, &Scan::default(), 32, Execution::Sequential).is_err());
    }

    #[test]
    fn dump_round_trip_and_rejection() {
        let (px, b) = square(0, 0, 3);
        let scan = Scan::new("s", (0..9).map(|i| Point::new(5.0, i as f32 * 0.1, 0.0, 0.3)).collect());
        let st = stack(8, 8, |r, c| (r + c) as f32 / 16.0);
        let mut prop = proposal((0..9).collect(), px, b);
        prop.gt_class = Some(ClassId::Bike);
        let batch = make_batch(&[prop.clone(), prop], &st, &scan, 8, Execution::Parallel).unwrap();
        let mut bytes = Vec::new();
        write_patch_dump(&mut bytes, &batch.patches).unwrap();
        assert_eq!(&bytes[..4], b"LPCH");
        assert_eq!(bytes.len(), 12 + 2 * (1 + 4 * (14 + 2 * 64)));
        let dump = read_patch_dump(bytes.as_slice()).unwrap();
        assert_eq!((dump.channels, dump.side, dump.patches.len()), (2, 8, 2));
        assert_eq!(dump.patches[0].gt_class, Some(ClassId::Bike));
        assert_eq!(dump.patches[1].planes, batch.patches[1].planes);
        assert_eq!(dump.patches[0].normalized_stats, batch.patches[0].stats.normalized());
        bytes[4] = 9;
        assert!(read_patch_dump(bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn stats_are_permutation_invariant(
            pts in proptest::collection::vec((-50.0f32..50.0, -50.0f32..50.0, -3.0f32..3.0), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scan = Scan::new("p", pts.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.0)).collect());
            let (px, b) = square(0, 0, 1);
            let idx: Vec<u32> = (0..pts.len() as u32).collect();
            let mut shuffled = idx.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = compute_stats(&proposal(idx, px.clone(), b), &scan).unwrap();
            let s = compute_stats(&proposal(shuffled, px, b), &scan).unwrap();
            prop_assert_eq!(a.raw()[..4].to_vec(), s.raw()[..4].to_vec());
            for k in 4..7 {
                prop_assert!((a.raw()[k] - s.raw()[k]).abs() <= 1e-4 * a.raw()[k].abs().max(1.0));
            }
            prop_assert!(a.d_euclid >= (a.d_x * a.d_x + a.d_y * a.d_y).sqrt() - 1e-6);
        }

        #[test]
        fn masking_is_idempotent(r0 in 0u32..20, c0 in 0u32..40, n in 1u32..12, holes in any::<u64>()) {
            let (mut px, b) = square(r0, c0, n);
            let first = px[0];
            px.retain(|&(r, c)| !(r as u64 * 7 + c as u64 * 13 + holes).is_multiple_of(5) || (r, c) == first);
            let st = stack(32, 64, |r, c| ((r * 31 + c * 17) % 97) as f32 / 97.0);
            let prop = proposal(vec![0; px.len()], px.clone(), b);
            let once = extract_patch(&prop, &st, 16).unwrap();
            let mut masked = st.clone();
            for plane in &mut masked.planes {
                for r in 0..32 {
                    for c in 0..64 {
                        if !px.contains(&(r as u32, c as u32)) {
                            plane[r * 64 + c] = 0.0;
                        }
                    }
                }
            }
            let twice = extract_patch(&prop, &masked, 16).unwrap();
            prop_assert_eq!(once.planes, twice.planes);
        }
    }
}
