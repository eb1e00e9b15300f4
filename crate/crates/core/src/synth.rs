// SPDX-License-Identifier: Apache-2.0

//! Ray-cast synthetic scenes: one ray per range-image pixel center, nearest
//! hit wins. Used for fixtures, benchmarks and the oracle test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{Batch, Patch, StatVector};
use crate::error::{Error, Result};
use crate::pointcloud::{write_labels, write_scan, LabeledScan, Point, RawLabel, Scan};
use crate::range_image::ProjectionConfig;

/// KITTI sensor mounting height above the road.
pub const SENSOR_HEIGHT: f64 = 1.73;

pub mod semantic {
    pub const ROAD: u16 = 40;
    pub const BUILDING: u16 = 50;
    pub const POLE: u16 = 80;
    pub const CAR: u16 = 10;
    pub const TRUCK: u16 = 18;
    pub const BICYCLE: u16 = 11;
    pub const PERSON: u16 = 30;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box centered at `center` with extents (length along local x, width, height), rotated by `yaw` about z.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
    },
    /// Upright cylinder with a closed top.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

impl Shape {
    /// Distance along the unit ray `dir` from the origin to the first hit.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { center, size, yaw } => {
                let (s, c) = yaw.sin_cos();
                // Ray origin and direction in the box frame.
                let o = [-center[0], -center[1], -center[2]];
                let o = [c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]];
                let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    let half = 0.5 * size[k];
                    if d[k].abs() < 1e-12 {
                        if o[k].abs() > half {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half - o[k]) / d[k];
                    let t2 = (half - o[k]) / d[k];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                (t_near <= t_far && t_near > 1e-9).then_some(t_near)
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let mut best: Option<f64> = None;
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > 1e-12 {
                    let b = -2.0 * (dir[0] * center[0] + dir[1] * center[1]);
                    let cc = center[0] * center[0] + center[1] * center[1] - radius * radius;
                    let disc = b * b - 4.0 * a * cc;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let z = t * dir[2];
                        if t > 1e-9 && z >= z_min && z <= z_max {
                            best = Some(t);
                        }
                    }
                }
                if dir[2].abs() > 1e-12 {
                    let t = z_max / dir[2];
                    let (x, y) = (t * dir[0] - center[0], t * dir[1] - center[1]);
                    if t > 1e-9 && x * x + y * y <= radius * radius {
                        best = Some(best.map_or(t, |b| b.min(t)));
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub semantic: u16,
    pub instance: u16,
    pub intensity: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ground {
    /// Plane height in the sensor frame (negative: below the sensor).
    pub z: f64,
    pub max_range: f64,
    pub intensity: f32,
}

impl Default for Ground {
    fn default() -> Self {
        Self {
            z: -SENSOR_HEIGHT,
            max_range: 80.0,
            intensity: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub ground: Option<Ground>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn with_ground() -> Self {
        Self {
            ground: Some(Ground::default()),
            objects: Vec::new(),
        }
    }

    pub fn push(&mut self, obj: SceneObject) -> &mut Self {
        self.objects.push(obj);
        self
    }

    /// Casts one ray per pixel, row-major. Pixels whose ray hits nothing
    /// produce no point.
    pub fn render(&self, id: &str, cfg: &ProjectionConfig) -> LabeledScan {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for row in 0..cfg.height {
            for col in 0..cfg.width {
                let (az, el) = cfg.ray_of(row, col);
                let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                let mut hit: Option<(f64, f32, RawLabel)> = None;
                for obj in &self.objects {
                    if let Some(t) = obj.shape.intersect(dir) {
                        if hit.is_none_or(|h| t < h.0) {
                            let label = RawLabel {
                                semantic: obj.semantic,
                                instance: obj.instance,
                            };
                            hit = Some((t, obj.intensity, label));
                        }
                    }
                }
                if let Some(g) = &self.ground {
                    if dir[2] < 0.0 {
                        let t = g.z / dir[2];
                        if t > 0.0 && t * el.cos() <= g.max_range && hit.is_none_or(|h| t < h.0) {
                            let label = RawLabel {
                                semantic: semantic::ROAD,
                                instance: 0,
                            };
                            hit = Some((t, g.intensity, label));
                        }
                    }
                }
                if let Some((t, intensity, label)) = hit {
                    points.push(Point::new(
                        (t * dir[0]) as f32,
                        (t * dir[1]) as f32,
                        (t * dir[2]) as f32,
                        intensity,
                    ));
                    labels.push(label);
                }
            }
        }
        LabeledScan {
            scan: Scan::new(id, points),
            labels,
        }
    }
}

/// Object archetypes standing on the ground plane at (x, y).
pub mod archetype {
    use super::*;

    fn on_ground(x: f64, y: f64, size: [f64; 3], yaw: f64) -> Shape {
        Shape::Box {
            center: [x, y, -SENSOR_HEIGHT + 0.5 * size[2]],
            size,
            yaw,
        }
    }

    pub fn car(x: f64, y: f64, yaw: f64, instance: u16) -> SceneObject {
        SceneObject {
            shape: on_ground(x, y, [4.5, 1.8, 1.5], yaw),
            semantic: semantic::CAR,
            instance,
            intensity: 0.6,
        }
    }

    pub fn truck(x: f64, y: f64, yaw: f64, instance: u16) -> SceneObject {
        SceneObject {
            shape: on_ground(x, y, [9.0, 2.5, 3.4], yaw),
            semantic: semantic::TRUCK,
            instance,
            intensity: 0.45,
        }
    }

    pub fn bike(x: f64, y: f64, yaw: f64, instance: u16) -> SceneObject {
        SceneObject {
            shape: on_ground(x, y, [1.8, 0.5, 1.6], yaw),
            semantic: semantic::BICYCLE,
            instance,
            intensity: 0.35,
        }
    }

    pub fn pedestrian(x: f64, y: f64, instance: u16) -> SceneObject {
        SceneObject {
            shape: Shape::Cylinder {
                center: [x, y],
                radius: 0.3,
                z_min: -SENSOR_HEIGHT,
                z_max: -SENSOR_HEIGHT + 1.75,
            },
            semantic: semantic::PERSON,
            instance,
            intensity: 0.3,
        }
    }

    pub fn wall(x: f64, y: f64, yaw: f64, length: f64, height: f64) -> SceneObject {
        SceneObject {
            shape: on_ground(x, y, [length, 0.3, height], yaw),
            semantic: semantic::BUILDING,
            instance: 0,
            intensity: 0.15,
        }
    }

    pub fn pole(x: f64, y: f64) -> SceneObject {
        SceneObject {
            shape: Shape::Cylinder {
                center: [x, y],
                radius: 0.15,
                z_min: -SENSOR_HEIGHT,
                z_max: 4.0,
            },
            semantic: semantic::POLE,
            instance: 0,
            intensity: 0.5,
        }
    }
}

/// A street-like scene: ground, a few things of every class and some clutter,
/// placed in distinct azimuth sectors so objects do not touch.
pub fn random_street_scene(seed: u64, n_objects: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::with_ground();
    let sectors = n_objects.max(1);
    let sector = 2.0 * std::f64::consts::PI / sectors as f64;
    for k in 0..n_objects {
        let az = (k as f64 + rng.random_range(0.35..0.65)) * sector;
        let dist = rng.random_range(7.0..25.0);
        let (x, y) = (dist * az.cos(), dist * az.sin());
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let instance = k as u16 + 1;
        let obj = match k % 6 {
            0 => archetype::car(x, y, yaw, instance),
            1 => archetype::pedestrian(x, y, instance),
            2 => archetype::truck(x, y, yaw, instance),
            3 => archetype::bike(x, y, yaw, instance),
            4 => archetype::pole(x, y),
            _ => archetype::wall(x, y, az + std::f64::consts::FRAC_PI_2, 4.0, 2.5),
        };
        scene.push(obj);
    }
    scene
}

/// A patch of uniform noise with plausible statistics.
pub fn random_patch(seed: u64, channels: usize, side: usize) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Patch {
        planes: (0..channels * side * side).map(|_| rng.random_range(0.0..1.0)).collect(),
        channels,
        side,
        stats: StatVector {
            width: rng.random_range(0.0..3.0),
            length: rng.random_range(0.0..6.0),
            height: rng.random_range(0.0..3.0),
            point_count: rng.random_range(1..2000),
            d_euclid: 20.0,
            d_x: 12.0,
            d_y: 15.0,
        },
        proposal_ref: 0,
        gt_class: None,
    }
}

/// `n` noise patches, seeded `seed`, `seed + 1`, ...
pub fn random_batch(n: usize, channels: usize, side: usize, seed: u64) -> Batch {
    let patches = (0..n as u64)
        .map(|i| {
            let mut p = random_patch(seed.wrapping_add(i), channels, side);
            p.proposal_ref = i as usize;
            p
        })
        .collect();
    Batch::new(patches).expect("non-empty uniform batch")
}

/// Writes `n_scans` random street scenes as
/// `<root>/sequences/<sequence>/{velodyne,labels}/NNNNNN.{bin,label}`.
pub fn write_dataset(
    root: &std::path::Path,
    sequence: &str,
    n_scans: usize,
    n_objects: usize,
    seed: u64,
    cfg: &ProjectionConfig,
) -> Result<Vec<std::path::PathBuf>> {
    let seq = root.join("sequences").join(sequence);
    let (velo, labels) = (seq.join("velodyne"), seq.join("labels"));
    for dir in [&velo, &labels] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut written = Vec::with_capacity(n_scans);
    for i in 0..n_scans {
        let stem = format!("{i:06}");
        let scan = random_street_scene(seed.wrapping_add(i as u64), n_objects).render(&stem, cfg);
        let bin = velo.join(format!("{stem}.bin"));
        write_scan(&bin, &scan.scan)?;
        write_labels(labels.join(format!("{stem}.label")), &scan.labels)?;
        written.push(bin);
    }
    Ok(written)
}
