// SPDX-License-Identifier: Apache-2.0

//! Spherical projection of a scan onto an H×W grid, plus the horizontal and
//! vertical normal-component images.
//!
//! Row 0 is the top (highest elevation) row. Column `width / 2` looks along
//! +x and columns increase clockwise seen from above (toward -y).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::pointcloud::Scan;

/// Fill value of the normal channels where a component is undefined.
pub const NEUTRAL_NORMAL: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Degrees above the horizon.
    pub fov_up: f64,
    /// Degrees, negative below the horizon.
    pub fov_down: f64,
}

impl Default for ProjectionConfig {
    /// HDL-64E geometry.
    fn default() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_up: 3.0,
            fov_down: -25.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 4 {
            return Err(Error::Config(format!(
                "projection grid {}x{} too small (need height >= 2, width >= 4)",
                self.height, self.width
            )));
        }
        if !(self.fov_up.is_finite() && self.fov_down.is_finite() && self.fov_up > self.fov_down) {
            return Err(Error::Config(format!(
                "fov_up ({}) must exceed fov_down ({})",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Azimuth step between adjacent columns, radians.
    pub fn horizontal_step(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Elevation step between adjacent rows, radians.
    pub fn vertical_step(&self) -> f64 {
        (self.fov_up - self.fov_down).to_radians() / (self.height - 1) as f64
    }

    /// Pixel for a direction given by azimuth and elevation (radians).
    pub fn pixel_of(&self, azimuth: f64, elevation: f64) -> (usize, usize) {
        let w = self.width as f64;
        let col = ((0.5 - azimuth / (2.0 * PI)) * w).floor() as i64;
        let col = col.rem_euclid(self.width as i64) as usize;
        let span = self.fov_up - self.fov_down;
        let row = ((self.fov_up - elevation.to_degrees()) / span * (self.height - 1) as f64 + 0.5)
            .floor();
        let row = row.clamp(0.0, (self.height - 1) as f64) as usize;
        (row, col)
    }

    /// Azimuth and elevation (radians) through the center of a pixel; the
    /// inverse of [`pixel_of`](Self::pixel_of).
    pub fn ray_of(&self, row: usize, col: usize) -> (f64, f64) {
        let azimuth = (0.5 - (col as f64 + 0.5) / self.width as f64) * 2.0 * PI;
        let elevation =
            self.fov_up - row as f64 / (self.height - 1) as f64 * (self.fov_up - self.fov_down);
        (azimuth, elevation.to_radians())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    X,
    Y,
    Z,
    Intensity,
    Depth,
    Hnv,
    Vnv,
    Mask,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::X => "x",
            Channel::Y => "y",
            Channel::Z => "z",
            Channel::Intensity => "intensity",
            Channel::Depth => "depth",
            Channel::Hnv => "hnv",
            Channel::Vnv => "vnv",
            Channel::Mask => "mask",
        }
    }

    /// Maps a raw channel value into [0, 1] for display.
    pub fn display_value(self, v: f32) -> f32 {
        let n = match self {
            Channel::X | Channel::Y => 0.5 + v / 160.0,
            Channel::Z => 0.5 + v / 10.0,
            Channel::Depth => v / 80.0,
            Channel::Intensity | Channel::Hnv | Channel::Vnv | Channel::Mask => v,
        };
        n.clamp(0.0, 1.0)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which optional channels feed the network. The mask plane is always added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ChannelConfig {
    pub x: bool,
    pub y: bool,
    pub z: bool,
    pub intensity: bool,
    pub depth: bool,
    pub hnv: bool,
    pub vnv: bool,
}

impl ChannelConfig {
    /// Intensity plus both normal components.
    pub const REFERENCE: ChannelConfig = ChannelConfig {
        x: false,
        y: false,
        z: false,
        intensity: true,
        depth: false,
        hnv: true,
        vnv: true,
    };

    pub const ALL: ChannelConfig = ChannelConfig {
        x: true,
        y: true,
        z: true,
        intensity: true,
        depth: true,
        hnv: true,
        vnv: true,
    };

    fn flags(&self) -> [(bool, Channel, &'static str); 7] {
        [
            (self.x, Channel::X, "X"),
            (self.y, Channel::Y, "Y"),
            (self.z, Channel::Z, "Z"),
            (self.intensity, Channel::Intensity, "I"),
            (self.depth, Channel::Depth, "D"),
            (self.hnv, Channel::Hnv, "HNV"),
            (self.vnv, Channel::Vnv, "VNV"),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.flags().iter().any(|f| f.0) {
            Ok(())
        } else {
            Err(Error::Contract("channel config selects no channel".into()))
        }
    }

    /// Planes in stack order: X, Y, Z, I, D, HNV, VNV (selected ones), then mask.
    pub fn channels(&self) -> Vec<Channel> {
        self.flags()
            .iter()
            .filter(|f| f.0)
            .map(|f| f.1)
            .chain(std::iter::once(Channel::Mask))
            .collect()
    }

    pub fn plane_count(&self) -> usize {
        self.flags().iter().filter(|f| f.0).count() + 1
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut cfg = ChannelConfig::default();
        for name in names {
            match name.as_ref().trim().to_ascii_uppercase().as_str() {
                "X" => cfg.x = true,
                "Y" => cfg.y = true,
                "Z" => cfg.z = true,
                "I" | "INTENSITY" => cfg.intensity = true,
                "D" | "DEPTH" => cfg.depth = true,
                "HNV" => cfg.hnv = true,
                "VNV" => cfg.vnv = true,
                other => return Err(Error::Config(format!("unknown channel `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.flags().iter().filter(|f| f.0).map(|f| f.2).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ChannelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let names: Vec<&str> = s.split(',').filter(|n| !n.trim().is_empty()).collect();
        Self::from_names(&names)
    }
}

/// Angles at a point between the ray back to the sensor and the segments to
/// its two neighbors along one image axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalAngles {
    pub alpha: f64,
    pub beta: f64,
    pub phi_half: f64,
}

/// Angle at the point with range `r_point` between the ray to the sensor and
/// the segment to a neighbor with range `r_neighbor`, `step` radians away.
#[inline]
pub fn sensor_angle(r_point: f64, r_neighbor: f64, step: f64) -> f64 {
    (r_neighbor * step.sin()).atan2(r_point - r_neighbor * step.cos())
}

pub fn normal_angles(r_prev: f64, r_point: f64, r_next: f64, step: f64) -> NormalAngles {
    let alpha = sensor_angle(r_point, r_prev, step);
    let beta = sensor_angle(r_point, r_next, step);
    NormalAngles {
        alpha,
        beta,
        phi_half: 0.5 * (alpha + beta),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub config: ProjectionConfig,
    pub mask: Vec<f32>,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub intensity: Vec<f32>,
    pub depth: Vec<f32>,
    pub hnv: Vec<f32>,
    pub vnv: Vec<f32>,
    pub pixel_to_point: Vec<Option<u32>>,
    /// Points dropped for zero range or non-finite values.
    pub skipped_points: usize,
    normals_ready: bool,
}

impl RangeImage {
    pub fn empty(config: ProjectionConfig) -> Self {
        let n = config.pixels();
        Self {
            config,
            mask: vec![0.0; n],
            x: vec![0.0; n],
            y: vec![0.0; n],
            z: vec![0.0; n],
            intensity: vec![0.0; n],
            depth: vec![0.0; n],
            hnv: vec![NEUTRAL_NORMAL; n],
            vnv: vec![NEUTRAL_NORMAL; n],
            pixel_to_point: vec![None; n],
            skipped_points: 0,
            normals_ready: false,
        }
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.config.width + col
    }

    #[inline]
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)] > 0.5
    }

    pub fn filled_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.5).count()
    }

    pub fn normals_ready(&self) -> bool {
        self.normals_ready
    }

    pub fn plane(&self, channel: Channel) -> &[f32] {
        match channel {
            Channel::X => &self.x,
            Channel::Y => &self.y,
            Channel::Z => &self.z,
            Channel::Intensity => &self.intensity,
            Channel::Depth => &self.depth,
            Channel::Hnv => &self.hnv,
            Channel::Vnv => &self.vnv,
            Channel::Mask => &self.mask,
        }
    }

    /// 8-bit grayscale rendering, `round(255 * display value)`.
    pub fn to_gray8(&self, channel: Channel) -> Vec<u8> {
        self.plane(channel)
            .iter()
            .map(|&v| (255.0 * channel.display_value(v)).round() as u8)
            .collect()
    }
}

pub fn project(scan: &Scan, config: &ProjectionConfig) -> Result<RangeImage> {
    config.validate()?;
    let mut img = RangeImage::empty(*config);
    let mut best = vec![f64::INFINITY; config.pixels()];
    for (i, p) in scan.points.iter().enumerate() {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let range = (x * x + y * y + z * z).sqrt();
        if !p.is_finite() || !range.is_finite() || range == 0.0 {
            img.skipped_points += 1;
            continue;
        }
        let (row, col) = config.pixel_of(y.atan2(x), (z / range).asin());
        let k = img.index(row, col);
        if range < best[k] {
            best[k] = range;
            img.pixel_to_point[k] = Some(i as u32);
        }
    }
    for k in 0..config.pixels() {
        if let Some(i) = img.pixel_to_point[k] {
            let p = scan.points[i as usize];
            img.mask[k] = 1.0;
            img.x[k] = p.x;
            img.y[k] = p.y;
            img.z[k] = p.z;
            img.intensity[k] = p.intensity;
            img.depth[k] = best[k] as f32;
        }
    }
    Ok(img)
}

pub fn compute_normal_images(img: &mut RangeImage, exec: Execution) {
    let (h, w) = (img.height(), img.width());
    let h_step = img.config.horizontal_step();
    let v_step = img.config.vertical_step();
    let depth = &img.depth;
    let mask = &img.mask;
    let set = |r: usize, c: usize| mask[r * w + c] > 0.5;
    let r_at = |r: usize, c: usize| depth[r * w + c] as f64;

    let mut hnv = vec![NEUTRAL_NORMAL; h * w];
    par::for_each_chunk_mut(&mut hnv, w, exec, |row, out| {
        for col in 1..w.saturating_sub(1) {
            if set(row, col) && set(row, col - 1) && set(row, col + 1) {
                let a = normal_angles(r_at(row, col - 1), r_at(row, col), r_at(row, col + 1), h_step);
                out[col] = (a.phi_half / PI) as f32;
            }
        }
    });
    let mut vnv = vec![NEUTRAL_NORMAL; h * w];
    par::for_each_chunk_mut(&mut vnv, w, exec, |row, out| {
        if row == 0 || row + 1 >= h {
            return;
        }
        for (col, o) in out.iter_mut().enumerate() {
            if set(row, col) && set(row - 1, col) && set(row + 1, col) {
                let a = normal_angles(r_at(row - 1, col), r_at(row, col), r_at(row + 1, col), v_step);
                *o = (a.phi_half / PI) as f32;
            }
        }
    });
    img.hnv = hnv;
    img.vnv = vnv;
    img.normals_ready = true;
}

/// Projection followed by the normal images.
pub fn build(scan: &Scan, config: &ProjectionConfig, exec: Execution) -> Result<RangeImage> {
    let mut img = project(scan, config)?;
    compute_normal_images(&mut img, exec);
    Ok(img)
}

/// Planes selected for the network, in [`ChannelConfig::channels`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Channel>,
    pub planes: Vec<Vec<f32>>,
}

impl ChannelStack {
    pub fn plane(&self, channel: Channel) -> Option<&[f32]> {
        self.channels
            .iter()
            .position(|&c| c == channel)
            .map(|i| self.planes[i].as_slice())
    }
}

pub fn select_channels(img: &RangeImage, cfg: &ChannelConfig) -> Result<ChannelStack> {
    cfg.validate()?;
    if (cfg.hnv || cfg.vnv) && !img.normals_ready {
        return Err(Error::State(
            "normal channels requested before compute_normal_images".into(),
        ));
    }
    let channels = cfg.channels();
    let planes = channels.iter().map(|&c| img.plane(c).to_vec()).collect();
    Ok(ChannelStack {
        height: img.height(),
        width: img.width(),
        channels,
        planes,
    })
}
