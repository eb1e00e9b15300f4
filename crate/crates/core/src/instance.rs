// SPDX-License-Identifier: Apache-2.0

//! Class-agnostic instance proposals: column-wise ground removal followed by
//! angle-criterion flood fill over the range image, or grouping of labeled
//! points by ground-truth instance.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, ClassMap, LabeledScan};
use crate::range_image::{sensor_angle, RangeImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundParams {
    /// Degrees.
    pub max_ground_angle: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            max_ground_angle: 10.0,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_ground_angle > 0.0 && self.max_ground_angle < 90.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "max_ground_angle {} outside (0, 90)",
                self.max_ground_angle
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    /// Degrees.
    pub merge_angle_threshold: f64,
    pub min_points: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            merge_angle_threshold: 10.0,
            min_points: 20,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_angle_threshold > 0.0 && self.merge_angle_threshold < 90.0) {
            return Err(Error::Config(format!(
                "merge_angle_threshold {} outside (0, 90)",
                self.merge_angle_threshold
            )));
        }
        if self.min_points == 0 {
            return Err(Error::Config("min_points must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposalSource {
    Clustered,
    GroundTruth,
}

impl ProposalSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalSource::Clustered => "clustered",
            ProposalSource::GroundTruth => "gt",
        }
    }
}

/// Tight image bounds. Columns wrap: `col_min > col_max` means the box
/// crosses the seam between the last and first column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl ImageBox {
    pub fn rows(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn cols(&self, width: usize) -> usize {
        (self.col_max + width - self.col_min) % width + 1
    }

    pub fn wraps(&self) -> bool {
        self.col_min > self.col_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceProposal {
    /// (row, col), sorted.
    pub pixels: Vec<(u32, u32)>,
    /// Scan point indices, sorted.
    pub point_indices: Vec<u32>,
    pub bbox: ImageBox,
    pub source: ProposalSource,
    pub gt_class: Option<ClassId>,
    pub gt_instance_id: Option<u16>,
}

impl InstanceProposal {
    /// Builds a proposal from masked pixels of `img`.
    pub fn from_pixels(
        img: &RangeImage,
        mut pixels: Vec<(u32, u32)>,
        source: ProposalSource,
    ) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Contract("proposal without pixels".into()));
        }
        pixels.sort_unstable();
        pixels.dedup();
        let mut point_indices = Vec::with_capacity(pixels.len());
        for &(r, c) in &pixels {
            let k = img.index(r as usize, c as usize);
            match img.pixel_to_point[k] {
                Some(i) => point_indices.push(i),
                None => {
                    return Err(Error::Contract(format!(
                        "pixel ({r}, {c}) has no point"
                    )))
                }
            }
        }
        point_indices.sort_unstable();
        let bbox = tight_box(&pixels, img.width());
        Ok(Self {
            pixels,
            point_indices,
            bbox,
            source,
            gt_class: None,
            gt_instance_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    /// `source class_id instance_id n_points point_indices...`, `-` for
    /// absent class or instance.
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(16 + 8 * self.point_indices.len());
        let class = self
            .gt_class
            .map_or("-".to_string(), |c| c.index().to_string());
        let inst = self
            .gt_instance_id
            .map_or("-".to_string(), |i| i.to_string());
        let _ = write!(
            s,
            "{} {} {} {}",
            self.source.as_str(),
            class,
            inst,
            self.point_indices.len()
        );
        for i in &self.point_indices {
            let _ = write!(s, " {i}");
        }
        s
    }
}

/// One parsed line of the proposal text format.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub source: ProposalSource,
    pub class: Option<ClassId>,
    pub instance: Option<u16>,
    pub point_indices: Vec<u32>,
}

pub fn parse_proposal_line(line: &str) -> Result<ProposalRecord> {
    let bad = |what: &str| Error::Format(format!("proposal line: {what}: `{line}`"));
    let mut it = line.split_whitespace();
    let source = match it.next() {
        Some("clustered") => ProposalSource::Clustered,
        Some("gt") => ProposalSource::GroundTruth,
        _ => return Err(bad("unknown source")),
    };
    let class = match it.next().ok_or_else(|| bad("missing class"))? {
        "-" => None,
        v => Some(
            v.parse::<usize>()
                .ok()
                .and_then(ClassId::from_index)
                .ok_or_else(|| bad("bad class"))?,
        ),
    };
    let instance = match it.next().ok_or_else(|| bad("missing instance"))? {
        "-" => None,
        v => Some(v.parse().map_err(|_| bad("bad instance"))?),
    };
    let n: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad point count"))?;
    let point_indices = it
        .map(|v| v.parse::<u32>().map_err(|_| bad("bad point index")))
        .collect::<Result<Vec<_>>>()?;
    if point_indices.len() != n {
        return Err(bad("point count mismatch"));
    }
    Ok(ProposalRecord {
        source,
        class,
        instance,
        point_indices,
    })
}

fn tight_box(pixels: &[(u32, u32)], width: usize) -> ImageBox {
    let row_min = pixels.iter().map(|p| p.0).min().unwrap() as usize;
    let row_max = pixels.iter().map(|p| p.0).max().unwrap() as usize;
    let mut used = vec![false; width];
    for &(_, c) in pixels {
        used[c as usize] = true;
    }
    // The complement of the widest circular run of empty columns.
    let mut best_gap = (0usize, 0usize); // (length, first empty column)
    let first_used = used.iter().position(|&u| u).unwrap();
    let mut run = 0usize;
    for step in 1..=width {
        let c = (first_used + step) % width;
        if used[c] {
            if run > best_gap.0 {
                best_gap = (run, (c + width - run) % width);
            }
            run = 0;
        } else {
            run += 1;
        }
    }
    let (col_min, col_max) = if best_gap.0 == 0 {
        (0, width - 1)
    } else {
        let col_min = (best_gap.1 + best_gap.0) % width;
        let col_max = (best_gap.1 + width - 1) % width;
        (col_min, col_max)
    };
    ImageBox {
        row_min,
        col_min,
        row_max,
        col_max,
    }
}

fn horizontal_distance(img: &RangeImage, k: usize) -> f64 {
    (img.x[k] as f64).hypot(img.y[k] as f64)
}

fn inclination_deg(img: &RangeImage, lower: usize, upper: usize) -> f64 {
    let dz = (img.z[upper] as f64 - img.z[lower] as f64).abs();
    let dh = (horizontal_distance(img, upper) - horizontal_distance(img, lower)).abs();
    dz.atan2(dh).to_degrees()
}

/// Per column, seeds ground at the two lowest returns when the slope between
/// them is flat enough, then walks upward accepting every return whose slope
/// to the last accepted ground return stays below the threshold.
pub fn remove_ground(img: &RangeImage, params: &GroundParams) -> Vec<bool> {
    let (h, w) = (img.height(), img.width());
    let mut ground = vec![false; h * w];
    let mut column: Vec<usize> = Vec::with_capacity(h);
    for col in 0..w {
        column.clear();
        column.extend(
            (0..h)
                .rev()
                .map(|row| img.index(row, col))
                .filter(|&k| img.mask[k] > 0.5),
        );
        if column.len() < 2 || inclination_deg(img, column[0], column[1]) >= params.max_ground_angle
        {
            continue;
        }
        ground[column[0]] = true;
        ground[column[1]] = true;
        let mut last = column[1];
        for &k in &column[2..] {
            if inclination_deg(img, last, k) < params.max_ground_angle {
                ground[k] = true;
                last = k;
            }
        }
    }
    ground
}

/// Flood fill over non-ground returns. Two 4-neighbors join when the angle at
/// the farther return between its ray and the segment to the nearer one
/// exceeds the threshold. Columns wrap around.
pub fn cluster(
    img: &RangeImage,
    ground: &[bool],
    params: &ClusterParams,
) -> Result<Vec<InstanceProposal>> {
    let (h, w) = (img.height(), img.width());
    if ground.len() != h * w {
        return Err(Error::Contract(format!(
            "ground mask has {} entries for a {h}x{w} image",
            ground.len()
        )));
    }
    let threshold = params.merge_angle_threshold.to_radians();
    let (h_step, v_step) = (img.config.horizontal_step(), img.config.vertical_step());
    let active = |k: usize| img.mask[k] > 0.5 && !ground[k];
    let joins = |a: usize, b: usize, step: f64| {
        let (ra, rb) = (img.depth[a] as f64, img.depth[b] as f64);
        let (far, near) = if ra >= rb { (ra, rb) } else { (rb, ra) };
        sensor_angle(far, near, step) > threshold
    };

    let mut visited = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    let mut members: Vec<(u32, u32)> = Vec::new();
    for seed in 0..h * w {
        if visited[seed] || !active(seed) {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        members.clear();
        while let Some(k) = queue.pop_front() {
            let (row, col) = (k / w, k % w);
            members.push((row as u32, col as u32));
            let left = row * w + (col + w - 1) % w;
            let right = row * w + (col + 1) % w;
            let mut neighbors = [(left, h_step), (right, h_step), (usize::MAX, 0.0), (usize::MAX, 0.0)];
            if row > 0 {
                neighbors[2] = (k - w, v_step);
            }
            if row + 1 < h {
                neighbors[3] = (k + w, v_step);
            }
            for (n, step) in neighbors {
                if n == usize::MAX || visited[n] || !active(n) {
                    continue;
                }
                if joins(k, n, step) {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if members.len() >= params.min_points {
            out.push(InstanceProposal::from_pixels(
                img,
                members.clone(),
                ProposalSource::Clustered,
            )?);
        }
    }
    Ok(out)
}

/// One proposal per (class, instance id) among projected points whose class
/// is not None, ordered by first appearance in row-major pixel order.
pub fn gt_instances(
    labeled: &LabeledScan,
    img: &RangeImage,
    classes: &ClassMap,
) -> Result<Vec<InstanceProposal>> {
    if labeled.labels.len() != labeled.scan.points.len() {
        return Err(Error::Contract("labels not aligned with scan".into()));
    }
    let w = img.width();
    let mut order: Vec<(ClassId, u16)> = Vec::new();
    let mut groups: HashMap<(ClassId, u16), Vec<(u32, u32)>> = HashMap::new();
    for (k, p) in img.pixel_to_point.iter().enumerate() {
        let Some(i) = *p else { continue };
        let label = labeled
            .labels
            .get(i as usize)
            .ok_or_else(|| Error::Contract(format!("pixel points at missing label {i}")))?;
        let class = classes.remap(label.semantic);
        if class == ClassId::None {
            continue;
        }
        let key = (class, label.instance);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(((k / w) as u32, (k % w) as u32));
    }
    order
        .into_iter()
        .map(|key| {
            let pixels = groups.remove(&key).unwrap();
            let mut p = InstanceProposal::from_pixels(img, pixels, ProposalSource::GroundTruth)?;
            p.gt_class = Some(key.0);
            p.gt_instance_id = Some(key.1);
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Execution;
    use crate::range_image::{build, ProjectionConfig};
    use crate::synth::{archetype, Scene, SceneObject, Shape};

    fn wall_at(azimuth_deg: f64, dist: f64, length: f64) -> SceneObject {
        let az = azimuth_deg.to_radians();
        SceneObject {
            shape: Shape::Box {
                center: [dist * az.cos(), dist * az.sin(), -0.5],
                size: [0.2, length, 2.0],
                yaw: az,
            },
            semantic: 50,
            instance: 0,
            intensity: 0.3,
        }
    }

    fn image_of(scene: &Scene) -> (LabeledScan, RangeImage) {
        let cfg = ProjectionConfig::default();
        let labeled = scene.render("t", &cfg);
        let img = build(&labeled.scan, &cfg, Execution::Sequential).unwrap();
        (labeled, img)
    }

    #[test]
    fn flat_ground_is_found() {
        let (labeled, img) = image_of(&Scene::with_ground());
        let ground = remove_ground(&img, &GroundParams::default());
        let on_plane = labeled.scan.points.iter().filter(|p| (p.z + 1.73).abs() < 1e-3).count();
        let labeled_ground = ground.iter().filter(|&&g| g).count();
        assert!(on_plane > 0);
        assert!(labeled_ground as f64 >= 0.95 * on_plane as f64);
    }

    #[test]
    fn vertical_wall_is_not_ground() {
        let mut scene = Scene::default();
        scene.push(wall_at(0.0, 8.0, 6.0));
        let (_, img) = image_of(&scene);
        assert!(img.filled_pixels() > 100);
        let ground = remove_ground(&img, &GroundParams::default());
        assert_eq!(ground.iter().filter(|&&g| g).count(), 0);
    }

    #[test]
    fn empty_image_has_no_ground_or_clusters() {
        let img = RangeImage::empty(ProjectionConfig::default());
        let ground = remove_ground(&img, &GroundParams::default());
        assert!(ground.iter().all(|&g| !g));
        assert!(cluster(&img, &ground, &ClusterParams::default()).unwrap().is_empty());
    }

    #[test]
    fn ground_only_scene_has_no_proposals() {
        let (_, img) = image_of(&Scene::with_ground());
        let ground = remove_ground(&img, &GroundParams::default());
        assert!(cluster(&img, &ground, &ClusterParams::default()).unwrap().is_empty());
    }

    #[test]
    fn two_separated_walls() {
        let mut scene = Scene::default();
        scene.push(wall_at(10.0, 5.0, 2.0));
        scene.push(wall_at(40.0, 30.0, 8.0));
        let (_, img) = image_of(&scene);
        let ground = remove_ground(&img, &GroundParams::default());
        let props = cluster(&img, &ground, &ClusterParams::default()).unwrap();
        assert_eq!(props.len(), 2);
    }

    #[test]
    fn wall_across_the_seam_is_one_proposal() {
        let mut scene = Scene::default();
        scene.push(wall_at(180.0, 10.0, 4.0));
        let (_, img) = image_of(&scene);
        let ground = vec![false; img.mask.len()];
        let props = cluster(&img, &ground, &ClusterParams::default()).unwrap();
        assert_eq!(props.len(), 1);
        let b = props[0].bbox;
        assert!(b.wraps(), "{b:?}");
        assert!(b.cols(img.width()) < 200);
        let cols: std::collections::HashSet<u32> = props[0].pixels.iter().map(|p| p.1).collect();
        assert!(cols.contains(&0) && cols.contains(&2047));
    }

    #[test]
    fn car_on_road_is_not_mixed_with_ground() {
        let mut scene = Scene::with_ground();
        scene.push(archetype::car(10.0, 2.0, 0.3, 1));
        let (labeled, img) = image_of(&scene);
        let ground = remove_ground(&img, &GroundParams::default());
        let props = cluster(&img, &ground, &ClusterParams::default()).unwrap();
        // The roof is seen at a grazing angle and may split off.
        assert!(!props.is_empty() && props.len() <= 3, "{}", props.len());
        let car_points = labeled.labels.iter().filter(|l| l.semantic == 10).count();
        let largest = props.iter().map(|p| p.len()).max().unwrap();
        assert!(largest as f64 > 0.9 * car_points as f64);
        for p in &props {
            for &i in &p.point_indices {
                assert_eq!(labeled.labels[i as usize].semantic, 10);
            }
        }
    }

    #[test]
    fn min_points_filter() {
        let mut scene = Scene::default();
        scene.push(wall_at(0.0, 40.0, 0.6));
        let (_, img) = image_of(&scene);
        let ground = vec![false; img.mask.len()];
        let n = img.filled_pixels();
        let keep = ClusterParams {
            min_points: n,
            ..Default::default()
        };
        let drop = ClusterParams {
            min_points: n + 1,
            ..Default::default()
        };
        assert_eq!(cluster(&img, &ground, &keep).unwrap().len(), 1);
        assert!(cluster(&img, &ground, &drop).unwrap().is_empty());
    }

    #[test]
    fn gt_grouping() {
        let mut scene = Scene::with_ground();
        scene.push(archetype::car(10.0, 0.0, 0.0, 7));
        scene.push(archetype::pedestrian(0.0, 8.0, 1));
        scene.push(archetype::pedestrian(0.0, -8.0, 2));
        let (labeled, img) = image_of(&scene);
        let props = gt_instances(&labeled, &img, &ClassMap::default()).unwrap();
        assert_eq!(props.len(), 3);
        let cars: Vec<_> = props.iter().filter(|p| p.gt_class == Some(ClassId::Car)).collect();
        assert_eq!(cars.len(), 1);
        assert_eq!(cars[0].gt_instance_id, Some(7));
        let peds = props.iter().filter(|p| p.gt_class == Some(ClassId::Pedestrian)).count();
        assert_eq!(peds, 2);
        assert!(props.iter().all(|p| p.source == ProposalSource::GroundTruth));

        let (labeled, img) = image_of(&Scene::with_ground());
        assert!(gt_instances(&labeled, &img, &ClassMap::default()).unwrap().is_empty());
    }

    #[test]
    fn tight_box_wraps() {
        let b = tight_box(&[(3, 2046), (4, 1), (5, 0)], 2048);
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (3, 5, 2046, 1));
        assert_eq!(b.cols(2048), 4);
        let b = tight_box(&[(0, 10), (2, 12)], 2048);
        assert_eq!((b.col_min, b.col_max), (10, 12));
        assert!(!b.wraps());
    }

    #[test]
    fn proposal_line_round_trip() {
        let mut scene = Scene::with_ground();
        scene.push(archetype::car(10.0, 0.0, 0.0, 7));
        let (labeled, img) = image_of(&scene);
        let p = &gt_instances(&labeled, &img, &ClassMap::default()).unwrap()[0];
        let rec = parse_proposal_line(&p.to_line()).unwrap();
        assert_eq!(rec.class, Some(ClassId::Car));
        assert_eq!(rec.instance, Some(7));
        assert_eq!(rec.point_indices, p.point_indices);
        assert!(parse_proposal_line("clustered - - 3 1 2").is_err());
    }
}
