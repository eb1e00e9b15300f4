// SPDX-License-Identifier: Apache-2.0

//! `LCNW` weight files.
//!
//! ```text
//! magic "LCNW" | version u16 = 1 | entry count u16
//! per entry: name_len u16, name (UTF-8), kind u8, dtype u8, ndim u8,
//!            dims u32 × ndim, payload (row-major)
//! CRC-32 (IEEE) u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The first entry is the
//! metadata pseudo-layer (kind 255, dtype 2 = UTF-8 bytes) holding
//! `key=value` lines; the remaining entries are float32 tensors named
//! `image.<layer>.<part>`, `stats.<layer>.<part>` and `head.<part>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{
    Conv3x3, Dense, DepthwiseSeparable, Layer, LayerKind, Model, ModelMeta, Pointwise,
    ResidualSeparable,
};
use crate::error::{Error, Result};
use crate::features::STAT_LEN;
use crate::pointcloud::ClassId;
use crate::range_image::ChannelConfig;

const MAGIC: &[u8; 4] = b"LCNW";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_UTF8: u8 = 2;
const META_NAME: &str = "meta";
const FORMAT_TAG: &str = "two-branch-v1";

struct Entry {
    name: String,
    kind: LayerKind,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn entry(name: String, kind: LayerKind, dims: &[usize], data: &[f32]) -> Entry {
    Entry {
        name,
        kind,
        dims: dims.to_vec(),
        data: data.to_vec(),
    }
}

fn layer_names(layers: &[Layer]) -> String {
    layers
        .iter()
        .map(|l| l.kind().name())
        .collect::<Vec<_>>()
        .join(",")
}

fn metadata_text(model: &Model) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format={FORMAT_TAG}");
    let _ = writeln!(s, "channels={}", model.meta.channels);
    let _ = writeln!(s, "patch_side={}", model.meta.patch_side);
    let _ = writeln!(s, "classes={}", model.meta.class_names.join(","));
    let _ = writeln!(s, "image_layers={}", layer_names(&model.image_branch));
    let _ = writeln!(s, "stats_layers={}", layer_names(&model.stats_branch));
    let _ = writeln!(s, "param_count={}", model.param_count());
    s
}

fn push_pointwise(out: &mut Vec<Entry>, prefix: &str, p: &Pointwise) {
    out.push(entry(
        format!("{prefix}.weight"),
        LayerKind::Pointwise1x1,
        &[1, 1, p.c_in, p.c_out],
        &p.weight,
    ));
    out.push(entry(format!("{prefix}.bias"), LayerKind::Pointwise1x1, &[p.c_out], &p.bias));
}

fn push_layer(out: &mut Vec<Entry>, prefix: &str, layer: &Layer) {
    match layer {
        Layer::Conv3x3(c) => {
            out.push(entry(
                format!("{prefix}.weight"),
                LayerKind::Conv3x3,
                &[3, 3, c.c_in, c.c_out],
                &c.weight,
            ));
            out.push(entry(format!("{prefix}.bias"), LayerKind::Conv3x3, &[c.c_out], &c.bias));
        }
        Layer::Residual(r) => {
            for (part, d) in [("1", &r.first), ("2", &r.second)] {
                let c = d.dw_bias.len();
                out.push(entry(
                    format!("{prefix}.dw{part}.weight"),
                    LayerKind::Depthwise3x3,
                    &[3, 3, c],
                    &d.dw_weight,
                ));
                out.push(entry(
                    format!("{prefix}.dw{part}.bias"),
                    LayerKind::Depthwise3x3,
                    &[c],
                    &d.dw_bias,
                ));
                push_pointwise(out, &format!("{prefix}.pw{part}"), &d.pointwise);
            }
            push_pointwise(out, &format!("{prefix}.shortcut"), &r.shortcut);
        }
        Layer::Dense(d) => {
            out.push(entry(
                format!("{prefix}.weight"),
                LayerKind::Dense,
                &[d.n_in, d.n_out],
                &d.weight,
            ));
            out.push(entry(format!("{prefix}.bias"), LayerKind::Dense, &[d.n_out], &d.bias));
        }
        Layer::Relu | Layer::GlobalAvgPool => {}
    }
}

fn put_u16(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds u16")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_weights(model: &Model) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    for (i, l) in model.image_branch.iter().enumerate() {
        push_layer(&mut entries, &format!("image.{i}"), l);
    }
    for (i, l) in model.stats_branch.iter().enumerate() {
        push_layer(&mut entries, &format!("stats.{i}"), l);
    }
    push_layer(&mut entries, "head", &Layer::Dense(model.head.clone()));

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u16(&mut buf, entries.len() + 1, "layer count")?;

    let meta = metadata_text(model);
    put_u16(&mut buf, META_NAME.len(), "name length")?;
    buf.extend_from_slice(META_NAME.as_bytes());
    buf.extend_from_slice(&[LayerKind::Metadata as u8, DTYPE_UTF8, 1]);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());

    for e in &entries {
        put_u16(&mut buf, e.name.len(), "name length")?;
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&[e.kind as u8, DTYPE_F32, e.dims.len() as u8]);
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_weights(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("weight file: shape table exceeds payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("weight file: {}", msg.into()))
}

pub fn read_weights(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(fmt_err(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u16()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = cur.u16()? as usize;
    let mut meta_text: Option<String> = None;
    let mut tensors: HashMap<String, Entry> = HashMap::new();
    for i in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| fmt_err("layer name is not UTF-8"))?
            .to_string();
        let code = cur.u8()?;
        let kind = LayerKind::from_code(code)
            .ok_or_else(|| fmt_err(format!("unknown layer kind {code} for `{name}`")))?;
        let dtype = cur.u8()?;
        let ndim = cur.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let elems = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fmt_err("tensor size overflows"))?;
        match (kind, dtype) {
            (LayerKind::Metadata, DTYPE_UTF8) => {
                if i != 0 {
                    return Err(fmt_err("metadata must be the first entry"));
                }
                let text = std::str::from_utf8(cur.take(elems)?)
                    .map_err(|_| fmt_err("metadata is not UTF-8"))?;
                meta_text = Some(text.to_string());
            }
            (LayerKind::Metadata, _) => return Err(fmt_err("metadata with non-text dtype")),
            (_, DTYPE_F32) => {
                let raw = cur.take(
                    elems
                        .checked_mul(4)
                        .ok_or_else(|| fmt_err("tensor size overflows"))?,
                )?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let e = Entry {
                    name: name.clone(),
                    kind,
                    dims,
                    data,
                };
                if tensors.insert(name.clone(), e).is_some() {
                    return Err(fmt_err(format!("duplicate tensor `{name}`")));
                }
            }
            (_, d) => return Err(fmt_err(format!("unsupported dtype {d} for `{name}`"))),
        }
    }
    if cur.pos != body.len() {
        return Err(fmt_err(format!(
            "{} trailing bytes after the last entry",
            body.len() - cur.pos
        )));
    }
    let meta = parse_meta(&meta_text.ok_or_else(|| fmt_err("missing metadata entry"))?)?;
    let model = Builder { tensors }.build(&meta)?;
    if let Some(declared) = meta.param_count {
        if declared != model.param_count() {
            return Err(fmt_err(format!(
                "metadata declares {declared} parameters, tensors hold {}",
                model.param_count()
            )));
        }
    }
    Ok(model)
}

struct Meta {
    channels: ChannelConfig,
    patch_side: usize,
    classes: Vec<String>,
    image_layers: Vec<String>,
    stats_layers: Vec<String>,
    param_count: Option<usize>,
}

fn parse_meta(text: &str) -> Result<Meta> {
    let mut kv: HashMap<&str, &str> = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("metadata line without `=`: `{line}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| fmt_err(format!("metadata lacks `{k}`")));
    if get("format")? != FORMAT_TAG {
        return Err(fmt_err(format!("unknown architecture `{}`", get("format")?)));
    }
    let list = |v: &str| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    Ok(Meta {
        channels: get("channels")?
            .parse()
            .map_err(|e| fmt_err(format!("channels: {e}")))?,
        patch_side: get("patch_side")?
            .parse()
            .map_err(|_| fmt_err("bad patch_side"))?,
        classes: list(get("classes")?),
        image_layers: list(get("image_layers")?),
        stats_layers: list(get("stats_layers")?),
        param_count: match kv.get("param_count") {
            Some(v) => Some(v.parse().map_err(|_| fmt_err("bad param_count"))?),
            None => None,
        },
    })
}

struct Builder {
    tensors: HashMap<String, Entry>,
}

impl Builder {
    fn take(&mut self, name: &str, kind: LayerKind, dims: &[usize]) -> Result<Vec<f32>> {
        let e = self
            .tensors
            .remove(name)
            .ok_or_else(|| fmt_err(format!("missing tensor `{name}`")))?;
        if e.kind != kind {
            return Err(fmt_err(format!(
                "`{}` has kind {}, expected {}",
                e.name,
                e.kind.name(),
                kind.name()
            )));
        }
        if e.dims != dims {
            return Err(fmt_err(format!(
                "`{}` has shape {:?}, expected {:?}",
                e.name, e.dims, dims
            )));
        }
        Ok(e.data)
    }

    /// Output width of a tensor's last dimension, read before full validation.
    fn out_dim(&self, name: &str) -> Result<usize> {
        self.tensors
            .get(name)
            .and_then(|e| e.dims.last().copied())
            .ok_or_else(|| fmt_err(format!("missing tensor `{name}`")))
    }

    fn pointwise(&mut self, prefix: &str, c_in: usize) -> Result<Pointwise> {
        let c_out = self.out_dim(&format!("{prefix}.bias"))?;
        Ok(Pointwise {
            c_in,
            c_out,
            weight: self.take(
                &format!("{prefix}.weight"),
                LayerKind::Pointwise1x1,
                &[1, 1, c_in, c_out],
            )?,
            bias: self.take(&format!("{prefix}.bias"), LayerKind::Pointwise1x1, &[c_out])?,
        })
    }

    fn separable(&mut self, prefix: &str, part: &str, c_in: usize) -> Result<DepthwiseSeparable> {
        let dw_weight = self.take(
            &format!("{prefix}.dw{part}.weight"),
            LayerKind::Depthwise3x3,
            &[3, 3, c_in],
        )?;
        let dw_bias = self.take(&format!("{prefix}.dw{part}.bias"), LayerKind::Depthwise3x3, &[c_in])?;
        Ok(DepthwiseSeparable {
            dw_weight,
            dw_bias,
            pointwise: self.pointwise(&format!("{prefix}.pw{part}"), c_in)?,
        })
    }

    fn dense(&mut self, prefix: &str, n_in: usize) -> Result<Dense> {
        let n_out = self.out_dim(&format!("{prefix}.bias"))?;
        Ok(Dense {
            n_in,
            n_out,
            weight: self.take(&format!("{prefix}.weight"), LayerKind::Dense, &[n_in, n_out])?,
            bias: self.take(&format!("{prefix}.bias"), LayerKind::Dense, &[n_out])?,
        })
    }

    fn build(mut self, meta: &Meta) -> Result<Model> {
        let mut image_branch = Vec::new();
        let mut width = meta.channels.plane_count();
        let mut side = meta.patch_side;
        let mut pooled = false;
        for (i, kind) in meta.image_layers.iter().enumerate() {
            let prefix = format!("image.{i}");
            let layer = match kind.as_str() {
                "conv3x3" if !pooled => {
                    let c_out = self.out_dim(&format!("{prefix}.bias"))?;
                    let weight = self.take(
                        &format!("{prefix}.weight"),
                        LayerKind::Conv3x3,
                        &[3, 3, width, c_out],
                    )?;
                    let bias = self.take(&format!("{prefix}.bias"), LayerKind::Conv3x3, &[c_out])?;
                    let c = Conv3x3 {
                        c_in: width,
                        c_out,
                        weight,
                        bias,
                    };
                    width = c_out;
                    Layer::Conv3x3(c)
                }
                "residual" if !pooled => {
                    if !side.is_multiple_of(2) {
                        return Err(fmt_err(format!("residual module at odd size {side}")));
                    }
                    let first = self.separable(&prefix, "1", width)?;
                    let mid = first.pointwise.c_out;
                    let second = self.separable(&prefix, "2", mid)?;
                    let shortcut = self.pointwise(&format!("{prefix}.shortcut"), width)?;
                    if second.pointwise.c_out != shortcut.c_out {
                        return Err(fmt_err(format!("{prefix}: shortcut width mismatch")));
                    }
                    width = shortcut.c_out;
                    side /= 2;
                    Layer::Residual(ResidualSeparable {
                        first,
                        second,
                        shortcut,
                    })
                }
                "dense" if pooled => {
                    let d = self.dense(&prefix, width)?;
                    width = d.n_out;
                    Layer::Dense(d)
                }
                "relu" => Layer::Relu,
                "globalavgpool" if !pooled => {
                    pooled = true;
                    Layer::GlobalAvgPool
                }
                other => return Err(fmt_err(format!("unexpected image layer `{other}`"))),
            };
            image_branch.push(layer);
        }
        if !pooled {
            return Err(fmt_err("image branch lacks global pooling"));
        }
        let image_width = width;
        let mut stats_branch = Vec::new();
        let mut width = STAT_LEN;
        for (i, kind) in meta.stats_layers.iter().enumerate() {
            let layer = match kind.as_str() {
                "dense" => {
                    let d = self.dense(&format!("stats.{i}"), width)?;
                    width = d.n_out;
                    Layer::Dense(d)
                }
                "relu" => Layer::Relu,
                other => return Err(fmt_err(format!("unexpected statistics layer `{other}`"))),
            };
            stats_branch.push(layer);
        }
        let head = self.dense("head", image_width + width)?;
        if head.n_out != ClassId::COUNT {
            return Err(fmt_err(format!("head emits {} classes, expected 5", head.n_out)));
        }
        if meta.classes.len() != ClassId::COUNT {
            return Err(fmt_err("metadata must name five classes"));
        }
        if let Some(extra) = self.tensors.keys().next() {
            return Err(fmt_err(format!("unused tensor `{extra}`")));
        }
        Ok(Model {
            image_branch,
            stats_branch,
            head,
            meta: ModelMeta {
                channels: meta.channels,
                patch_side: meta.patch_side,
                class_names: meta.classes.clone(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;

    fn bits(m: &Model) -> Vec<u32> {
        let bytes = write_weights(m).unwrap();
        bytes.iter().map(|&b| b as u32).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::init_random(7);
        let bytes = write_weights(&m).unwrap();
        assert_eq!(&bytes[..4], b"LCNW");
        let back = read_weights(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_weights(&back).unwrap(), bytes);
    }

    #[test]
    fn other_architectures_round_trip() {
        let arch = Architecture {
            channels: ChannelConfig::ALL,
            patch_side: 16,
            stem_width: 8,
            block_widths: vec![12],
            out_width: 8,
            stats_widths: vec![4],
        };
        let m = arch.init_random(3).unwrap();
        assert_eq!(read_weights(&write_weights(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let mut bytes = write_weights(&Model::init_random(1)).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        let err = read_weights(&bytes).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
        let mut bytes = write_weights(&Model::init_random(1)).unwrap();
        bytes[100] ^= 1;
        assert!(read_weights(&bytes).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_weights(&Model::init_random(1)).unwrap();
        bytes[0] = b'X';
        assert!(read_weights(&bytes).is_err());

        let mut bytes = write_weights(&Model::init_random(1)).unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(read_weights(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn shape_table_inconsistent_with_payload() {
        // Drop the last float of the payload and re-seal the checksum.
        let bytes = write_weights(&Model::init_random(1)).unwrap();
        let n = bytes.len();
        let mut cut = bytes[..n - 8].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        let err = read_weights(&cut).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn seeded_files_are_identical() {
        assert_eq!(bits(&Model::init_random(42)), bits(&Model::init_random(42)));
        assert_ne!(bits(&Model::init_random(1)), bits(&Model::init_random(2)));
    }
}
