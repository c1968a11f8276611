//! Procedural striped-texture classes at 3×16×16.
//!
//! A class is a (base hue, stripe orientation, stripe frequency) tuple.
//! Samples differ by a random ±2 pixel translation, clipped Gaussian pixel
//! noise and optional hue and brightness jitter.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tensor};

use super::dataset::Dataset;

pub const SIDE: usize = 16;
pub const HUES: usize = 8;
pub const ORIENTATIONS_DEG: [u32; 4] = [0, 45, 90, 135];
pub const FREQUENCIES: [u32; 3] = [2, 3, 4];
pub const NOISE_SIGMA: f64 = 0.05;
pub const MAX_SHIFT: i64 = 2;

/// Colour and contrast settings shared by every class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStyle {
    pub saturation: f64,
    pub value: f64,
    /// Mean brightness factor of the stripe pattern.
    pub base: f64,
    /// Stripe amplitude around `base`.
    pub contrast: f64,
    /// Degrees of hue covered by the `HUES` base hues.
    pub hue_span: f64,
    /// Half-width in degrees of the uniform per-sample hue offset.
    pub hue_jitter: f64,
    /// Half-width of the uniform per-sample relative brightness change.
    pub brightness_jitter: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            saturation: 0.2,
            value: 0.7,
            base: 0.6,
            contrast: 0.3,
            hue_span: 180.0,
            hue_jitter: 0.0,
            brightness_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    /// Hue in degrees.
    pub hue: f64,
    pub orientation_deg: u32,
    pub frequency: u32,
}

impl ClassParams {
    pub fn rgb(&self, style: &SynthStyle) -> [f64; 3] {
        hsv_to_rgb(self.hue, style.saturation, style.value)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// All distinct class tuples, in a fixed order.
pub fn parameter_space(hue_span: f64) -> Vec<ClassParams> {
    let mut out = Vec::new();
    for h in 0..HUES {
        for &o in &ORIENTATIONS_DEG {
            for &f in &FREQUENCIES {
                out.push(ClassParams {
                    hue: h as f64 * hue_span / HUES as f64,
                    orientation_deg: o,
                    frequency: f,
                });
            }
        }
    }
    out
}

/// Renders one sample of a class into `out` (CHW, length 768).
pub fn render(params: &ClassParams, style: &SynthStyle, rng: &mut RngStream, out: &mut [f32]) {
    let dx = rng.below((2 * MAX_SHIFT + 1) as usize) as i64 - MAX_SHIFT;
    let dy = rng.below((2 * MAX_SHIFT + 1) as usize) as i64 - MAX_SHIFT;
    let hue = params.hue + style.hue_jitter * rng.uniform(-1.0, 1.0);
    let value = style.value * (1.0 + style.brightness_jitter * rng.uniform(-1.0, 1.0));
    let theta = (params.orientation_deg as f64).to_radians();
    let (ct, st) = (theta.cos(), theta.sin());
    let rgb = hsv_to_rgb(hue, style.saturation, value.clamp(0.0, 1.0));
    let plane = SIDE * SIDE;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let u = (x as i64 + dx) as f64 * ct + (y as i64 + dy) as f64 * st;
            let s = (2.0 * PI * params.frequency as f64 * u / SIDE as f64).sin();
            let shade = style.base + style.contrast * s;
            for (c, &base) in rgb.iter().enumerate() {
                let v = base * shade + NOISE_SIGMA * rng.normal();
                out[c * plane + y * SIDE + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Generates `n_classes × per_class` images. Class tuples are a seeded
/// draw without replacement from [`parameter_space`].
pub fn synth_generate(n_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    synth_generate_styled(n_classes, per_class, seed, &SynthStyle::default())
}

pub fn synth_generate_styled(n_classes: usize, per_class: usize, seed: u64, style: &SynthStyle) -> Result<Dataset> {
    if n_classes < 8 || per_class < 20 {
        return Err(Error::Config(format!(
            "synthetic data needs n_classes >= 8 and per_class >= 20 (got {n_classes}, {per_class})"
        )));
    }
    let mut space = parameter_space(style.hue_span);
    if n_classes > space.len() {
        return Err(Error::Config(format!(
            "only {} distinct class parameter tuples exist, {} requested",
            space.len(),
            n_classes
        )));
    }
    RngStream::keyed(seed, &[0xc1a55]).shuffle(&mut space);
    let classes = &space[..n_classes];
    let item = 3 * SIDE * SIDE;
    let mut data = vec![0f32; n_classes * per_class * item];
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, params) in classes.iter().enumerate() {
        let mut rng = RngStream::keyed(seed, &[0x5a3b1e, c as u64]);
        for i in 0..per_class {
            let idx = c * per_class + i;
            render(params, style, &mut rng, &mut data[idx * item..(idx + 1) * item]);
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n_classes * per_class, 3, SIDE, SIDE], data)?;
    let descriptor = format!("synthetic stripes n_classes={n_classes} per_class={per_class} seed={seed} style={style:?}");
    Dataset::new(images, labels, descriptor)
}
