// SPDX-License-Identifier: Apache-2.0

//! KITTI `.bin` scans, SemanticKITTI `.label` files and the mapping from raw
//! semantic ids onto the five classifier classes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};

const POINT_RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn range(&self) -> f32 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub points: Vec<Point>,
    pub source_id: String,
}

impl Scan {
    pub fn new(source_id: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            points,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One decoded label word: low 16 bits semantic id, high 16 bits instance id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RawLabel {
    pub semantic: u16,
    pub instance: u16,
}

impl RawLabel {
    pub fn from_word(word: u32) -> Self {
        Self {
            semantic: (word & 0xFFFF) as u16,
            instance: (word >> 16) as u16,
        }
    }

    pub fn to_word(self) -> u32 {
        (self.instance as u32) << 16 | self.semantic as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    pub scan: Scan,
    pub labels: Vec<RawLabel>,
}

impl LabeledScan {
    pub fn new(scan: Scan, labels: Vec<RawLabel>) -> Result<Self> {
        if labels.len() != scan.points.len() {
            return Err(Error::Contract(format!(
                "{} labels for {} points",
                labels.len(),
                scan.points.len()
            )));
        }
        Ok(Self { scan, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(u8)]
pub enum ClassId {
    #[default]
    None = 0,
    Car = 1,
    Truck = 2,
    Bike = 3,
    Pedestrian = 4,
}

impl ClassId {
    pub const COUNT: usize = 5;
    pub const ALL: [ClassId; 5] = [
        ClassId::None,
        ClassId::Car,
        ClassId::Truck,
        ClassId::Bike,
        ClassId::Pedestrian,
    ];
    /// Countable classes, the only ones that take part in AP and PQ.
    pub const THINGS: [ClassId; 4] = [
        ClassId::Car,
        ClassId::Truck,
        ClassId::Bike,
        ClassId::Pedestrian,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::None => "None",
            ClassId::Car => "Car",
            ClassId::Truck => "Truck",
            ClassId::Bike => "Bike",
            ClassId::Pedestrian => "Pedestrian",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown class name `{s}`")))
    }
}

/// Raw SemanticKITTI semantic id to class table. Ids missing from the table
/// map to [`ClassId::None`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    table: HashMap<u16, ClassId>,
}

/// Devkit ids (`semantic-kitti.yaml`), moving variants folded onto their
/// static class the same way the devkit's learning map does.
const SEMANTIC_KITTI_THINGS: &[(u16, ClassId)] = &[
    (10, ClassId::Car),         // car
    (252, ClassId::Car),        // moving-car
    (18, ClassId::Truck),       // truck
    (13, ClassId::Truck),       // bus
    (16, ClassId::Truck),       // on-rails
    (20, ClassId::Truck),       // other-vehicle
    (258, ClassId::Truck),      // moving-truck
    (257, ClassId::Truck),      // moving-bus
    (256, ClassId::Truck),      // moving-on-rails
    (259, ClassId::Truck),      // moving-other-vehicle
    (11, ClassId::Bike),        // bicycle
    (31, ClassId::Bike),        // bicyclist
    (15, ClassId::Bike),        // motorcycle
    (32, ClassId::Bike),        // motorcyclist
    (253, ClassId::Bike),       // moving-bicyclist
    (255, ClassId::Bike),       // moving-motorcyclist
    (30, ClassId::Pedestrian),  // person
    (254, ClassId::Pedestrian), // moving-person
];

#[derive(Deserialize)]
struct ClassMapFile {
    classes: HashMap<String, String>,
}

impl Default for ClassMap {
    fn default() -> Self {
        Self {
            table: SEMANTIC_KITTI_THINGS.iter().copied().collect(),
        }
    }
}

impl ClassMap {
    pub fn remap(&self, raw_semantic: u16) -> ClassId {
        self.table.get(&raw_semantic).copied().unwrap_or_default()
    }

    /// Parses a TOML table `[classes]` of `raw_id = "ClassName"` entries.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ClassMapFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("class map: {e}")))?;
        let mut table = HashMap::with_capacity(file.classes.len());
        for (key, name) in file.classes {
            let id: u16 = key
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("class map: `{key}` is not a 16-bit id")))?;
            table.insert(id, name.parse()?);
        }
        Ok(Self { table })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Remaps with the built-in SemanticKITTI table.
pub fn remap_class(raw_semantic: u16) -> ClassId {
    thread_local! {
        static DEFAULT_MAP: ClassMap = ClassMap::default();
    }
    DEFAULT_MAP.with(|m| m.remap(raw_semantic))
}

pub fn decode_scan(source_id: impl Into<String>, bytes: &[u8]) -> Result<Scan> {
    if !bytes.len().is_multiple_of(POINT_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of {POINT_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(POINT_RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
            let intensity = f(3);
            // NaN intensities stay NaN; projection skips non-finite points.
            let intensity = if intensity.is_nan() {
                intensity
            } else {
                intensity.clamp(0.0, 1.0)
            };
            Point::new(f(0), f(1), f(2), intensity)
        })
        .collect();
    Ok(Scan::new(source_id, points))
}

pub fn encode_scan(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.points.len() * POINT_RECORD_BYTES);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_scan(path: impl AsRef<Path>) -> Result<Scan> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_scan(id, &bytes)
}

pub fn write_scan(path: impl AsRef<Path>, scan: &Scan) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_scan(scan)).map_err(|e| Error::io(path, e))
}

pub fn decode_labels(bytes: &[u8], scan: Scan) -> Result<LabeledScan> {
    if bytes.len() != 4 * scan.points.len() {
        return Err(Error::Format(format!(
            "label length {} does not match {} points",
            bytes.len(),
            scan.points.len()
        )));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|w| RawLabel::from_word(u32::from_le_bytes(w.try_into().unwrap())))
        .collect();
    LabeledScan::new(scan, labels)
}

pub fn encode_labels(labels: &[RawLabel]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.to_word().to_le_bytes()).collect()
}

pub fn load_labels(path: impl AsRef<Path>, scan: Scan) -> Result<LabeledScan> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, scan)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[RawLabel]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn floats_to_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|f| f.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_two_point_records() {
        let bytes = floats_to_bytes(&[1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.25]);
        let scan = decode_scan("s", &bytes).unwrap();
        assert_eq!(scan.len(), 2);
        assert_eq!(scan.points[0], Point::new(1.0, 2.0, 3.0, 0.5));
        assert_eq!(scan.points[1], Point::new(4.0, 5.0, 6.0, 0.25));
    }

    #[test]
    fn empty_and_truncated_scans() {
        assert!(decode_scan("e", &[]).unwrap().is_empty());
        assert!(matches!(decode_scan("t", &[0u8; 17]), Err(Error::Format(_))));
    }

    #[test]
    fn intensity_is_clamped() {
        let bytes = floats_to_bytes(&[1.0, 0.0, 0.0, 1.7, 1.0, 0.0, 0.0, -0.2]);
        let scan = decode_scan("c", &bytes).unwrap();
        assert_eq!(scan.points[0].intensity, 1.0);
        assert_eq!(scan.points[1].intensity, 0.0);
    }

    #[test]
    fn missing_scan_file_is_io_error() {
        assert!(matches!(
            load_scan("/nonexistent/000000.bin"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn label_word_split() {
        assert_eq!(
            RawLabel::from_word(0x0001_000A),
            RawLabel {
                semantic: 10,
                instance: 1
            }
        );
        assert_eq!(RawLabel::from_word(0), RawLabel::default());
    }

    #[test]
    fn label_length_mismatch() {
        let scan = Scan::new("s", vec![Point::new(1.0, 0.0, 0.0, 0.0); 3]);
        let err = decode_labels(&[0u8; 8], scan).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn labels_keep_point_alignment() {
        let scan = Scan::new("s", (0..5).map(|i| Point::new(i as f32, 0.0, 0.0, 0.0)).collect());
        let labels: Vec<_> = (0..5u16)
            .map(|i| RawLabel {
                semantic: i * 10,
                instance: i,
            })
            .collect();
        let labeled = decode_labels(&encode_labels(&labels), scan).unwrap();
        for (i, l) in labeled.labels.iter().enumerate() {
            assert_eq!(l.instance as usize, i);
            assert_eq!(labeled.scan.points[i].x, i as f32);
        }
    }

    #[test]
    fn remap_examples() {
        assert_eq!(remap_class(10), ClassId::Car);
        assert_eq!(remap_class(31), ClassId::Bike);
        assert_eq!(remap_class(40), ClassId::None); // road
        assert_eq!(remap_class(16), ClassId::Truck); // on-rails
        assert_eq!(remap_class(30), ClassId::Pedestrian);
        assert_eq!(remap_class(65535), ClassId::None);
    }

    #[test]
    fn default_map_is_surjective() {
        let map = ClassMap::default();
        let devkit_ids = [
            0u16, 1, 10, 11, 13, 15, 16, 18, 20, 30, 31, 32, 40, 44, 48, 49, 50, 51, 52, 60, 70,
            71, 72, 80, 81, 99, 252, 253, 254, 255, 256, 257, 258, 259,
        ];
        for class in ClassId::ALL {
            assert!(devkit_ids.iter().any(|&id| map.remap(id) == class), "{class}");
        }
    }

    #[test]
    fn shipped_class_map_matches_builtin() {
        let text = include_str!("../../../config/semantic-kitti-classes.toml");
        let loaded = ClassMap::from_toml_str(text).unwrap();
        assert_eq!(loaded, ClassMap::default());
    }

    #[test]
    fn class_map_rejects_bad_entries() {
        assert!(ClassMap::from_toml_str("[classes]\n10 = \"Boat\"\n").is_err());
        assert!(ClassMap::from_toml_str("[classes]\nabc = \"Car\"\n").is_err());
    }

    proptest! {
        #[test]
        fn scan_round_trip_is_bit_exact(raw in proptest::collection::vec(any::<[u32; 3]>(), 0..64),
                                        inten in proptest::collection::vec(0.0f32..=1.0, 64)) {
            let points: Vec<Point> = raw.iter().zip(&inten).map(|(r, &i)| {
                Point::new(f32::from_bits(r[0]), f32::from_bits(r[1]), f32::from_bits(r[2]), i)
            }).collect();
            let scan = Scan::new("p", points.clone());
            let back = decode_scan("p", &encode_scan(&scan)).unwrap();
            for (a, b) in points.iter().zip(&back.points) {
                prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
                prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
                prop_assert_eq!(a.z.to_bits(), b.z.to_bits());
                prop_assert_eq!(a.intensity.to_bits(), b.intensity.to_bits());
            }
        }
    }
}
