//! Synthetic shapes dataset: each class is a shape family drawn with random
//! position, scale, rotation and colour over a textured noise background.
//!
//! Class ids map to families as follows: 1 circle, 2 square, 3 triangle,
//! 4 cross, 5 annulus, 6 diamond, 7 hexagon, 8 ellipse, and `k ≥ 9` a star with
//! `k - 6` points. Two background styles give a source and a shifted target domain.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SynthStyle {
    /// Smooth colour noise.
    #[default]
    Smooth,
    /// Striped texture with heavier pixel noise and a shifted palette.
    Striped,
}

impl SynthStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthStyle::Smooth => "smooth",
            SynthStyle::Striped => "striped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smooth" | "a" => Some(SynthStyle::Smooth),
            "striped" | "b" => Some(SynthStyle::Striped),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub n_classes: u32,
    pub seed: u64,
    pub style: SynthStyle,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 || self.n_classes > 255 {
            return Err(Error::config(format!("n_classes must be in 4..=255, got {}", self.n_classes)));
        }
        if self.image_size < 32 {
            return Err(Error::config(format!("image_size must be at least 32, got {}", self.image_size)));
        }
        Ok(())
    }

    /// Class of every image: a shuffled round robin, so each class appears
    /// `floor(n / k)` or `ceil(n / k)` times.
    pub fn class_schedule(&self) -> Vec<u32> {
        let mut classes: Vec<u32> = (0..self.n_images).map(|i| (i as u32 % self.n_classes) + 1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        classes.shuffle(&mut rng);
        classes
    }
}

pub fn family_name(class_id: u32) -> String {
    match class_id {
        1 => "circle".into(),
        2 => "square".into(),
        3 => "triangle".into(),
        4 => "cross".into(),
        5 => "annulus".into(),
        6 => "diamond".into(),
        7 => "hexagon".into(),
        8 => "ellipse".into(),
        k => format!("star{}", k - 6),
    }
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

/// Renders every image of the dataset in order.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(String, RgbImage, LabelMap)>> {
    spec.validate()?;
    Ok(spec
        .class_schedule()
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let (img, lab) = render_sample(spec, i, class);
            (image_id(i), img, lab)
        })
        .collect())
}

/// Is the local point `(u, v)` (unit radius frame) inside the family's shape?
fn inside(class_id: u32, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class_id {
        1 => r2 <= 1.0,
        2 => u.abs().max(v.abs()) <= 0.7,
        3 => regular_polygon(3, u, v),
        4 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        5 => (0.2025..=1.0).contains(&r2),
        6 => u.abs() + v.abs() <= 1.0,
        7 => regular_polygon(6, u, v),
        8 => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
        k => {
            let points = (k - 6) as f64;
            let sector = 2.0 * PI / points;
            let phase = (v.atan2(u) + 2.0 * PI) % sector / sector;
            let radius = 0.4 + 0.6 * (2.0 * phase - 1.0).abs();
            r2.sqrt() <= radius
        }
    }
}

/// Regular `n`-gon inscribed in the unit circle with a vertex on +v.
fn regular_polygon(n: usize, u: f64, v: f64) -> bool {
    let apothem = (PI / n as f64).cos();
    (0..n).all(|k| {
        let normal = PI / 2.0 + (2 * k + 1) as f64 * PI / n as f64;
        u * normal.cos() + v * normal.sin() <= apothem
    })
}

fn random_color<R: Rng>(rng: &mut R, style: SynthStyle) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = match style {
            SynthStyle::Smooth => rng.random_range(20.0..235.0),
            SynthStyle::Striped => rng.random_range(60.0..255.0),
        };
    }
    if style == SynthStyle::Striped {
        // warmer palette in the target domain
        c[2] *= 0.6;
    }
    c
}

/// One image and its label map. Deterministic in `(spec.seed, index, class_id)`.
pub fn render_sample(spec: &SynthSpec, index: usize, class_id: u32) -> (RgbImage, LabelMap) {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    // coarse lattice of colours, bilinearly interpolated
    let cells = 5;
    let lattice: Vec<[f64; 3]> = (0..(cells + 1) * (cells + 1)).map(|_| random_color(&mut rng, spec.style)).collect();
    let stripes = (
        random_color(&mut rng, spec.style),
        rng.random_range(5.0..11.0),
        rng.random_range(0.0..PI),
    );
    let (bg_noise, fg_noise) = match spec.style {
        SynthStyle::Smooth => (12.0, 8.0),
        SynthStyle::Striped => (30.0, 22.0),
    };
    let background = |x: f64, y: f64| -> [f64; 3] {
        let gx = x / n as f64 * cells as f64;
        let gy = y / n as f64 * cells as f64;
        let (ix, iy) = ((gx.floor() as usize).min(cells - 1), (gy.floor() as usize).min(cells - 1));
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            let top = at(ix, iy)[k] * (1.0 - fx) + at(ix + 1, iy)[k] * fx;
            let bottom = at(ix, iy + 1)[k] * (1.0 - fx) + at(ix + 1, iy + 1)[k] * fx;
            *ck = top * (1.0 - fy) + bottom * fy;
        }
        if spec.style == SynthStyle::Striped {
            let (color, period, angle) = stripes;
            let t = (x * angle.cos() + y * angle.sin()) / period;
            if t.floor() as i64 % 2 == 0 {
                for (ck, s) in c.iter_mut().zip(color) {
                    *ck = 0.5 * (*ck + s);
                }
            }
        }
        c
    };

    let mean_bg = {
        let mut m = [0.0; 3];
        for c in &lattice {
            for k in 0..3 {
                m[k] += c[k] / lattice.len() as f64;
            }
        }
        m
    };
    let mut fg = random_color(&mut rng, spec.style);
    for _ in 0..32 {
        let dist: f64 = fg.iter().zip(&mean_bg).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 150.0 {
            break;
        }
        fg = random_color(&mut rng, spec.style);
    }
    if fg.iter().zip(&mean_bg).map(|(a, b)| (a - b).abs()).sum::<f64>() < 150.0 {
        for (f, b) in fg.iter_mut().zip(&mean_bg) {
            *f = if *b > 127.0 { 15.0 } else { 240.0 };
        }
    }

    let side = n as f64 * rng.random_range(0.45..0.75);
    let radius = side / 2.0;
    let margin = radius + 2.0;
    let cx = rng.random_range(margin..=(n as f64 - margin));
    let cy = rng.random_range(margin..=(n as f64 - margin));
    let theta = match class_id {
        2 | 4 | 6 => rng.random_range(-0.2..0.2),
        _ => rng.random_range(0.0..2.0 * PI),
    };
    let (sin_t, cos_t) = theta.sin_cos();

    let mut data = Vec::with_capacity(n * n * 3);
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = ((px - cx) / radius, (py - cy) / radius);
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let is_fg = inside(class_id, u, v);
            let (base, noise) = if is_fg { (fg, fg_noise) } else { (background(px, py), bg_noise) };
            for b in base {
                let jitter = rng.random_range(-noise..=noise);
                data.push((b + jitter).round().clamp(0.0, 255.0) as u8);
            }
            labels.push(if is_fg { class_id as u8 } else { 0 });
        }
    }
    (RgbImage { width: n, height: n, data }, LabelMap { width: n, height: n, data: labels })
}
