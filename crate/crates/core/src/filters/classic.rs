//! Fixed image filters: channel-variance noise, 2×2 median, bit reduction and
//! total-variation minimisation. All map `[n, c, h, w]` batches in [0,1] to
//! batches of the same shape in [0,1].

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tensor};

fn dims(images: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match *images.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(&[0, 3, 16, 16], images.shape())),
    }
}

/// Adds `N(0, var_c)` per channel, where `var_c` is the channel's population
/// variance over the whole batch, then clips.
pub fn filter_noise(images: &Tensor<f32>, rng: &mut RngStream) -> Result<Tensor<f32>> {
    let (n, c, h, w) = dims(images)?;
    let plane = h * w;
    let mut out = images.clone();
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |i| images.item(i)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64));
        let count = (n * plane) as f64;
        let mean = vals().sum::<f64>() / count;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        if var == 0.0 {
            continue;
        }
        let sd = var.sqrt();
        for i in 0..n {
            for v in &mut out.item_mut(i)[ch * plane..(ch + 1) * plane] {
                *v += (sd * rng.normal()) as f32;
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Median of the 2×2 window anchored at each pixel, replicating the bottom
/// and right edges. The median of four is the mean of the middle two.
pub fn filter_feats_median(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = dims(images)?;
    if h < 2 || w < 2 {
        return Err(Error::Input("median filter needs H, W >= 2".into()));
    }
    let mut out = images.clone();
    for i in 0..n {
        let src = images.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let y1 = (y + 1).min(h - 1);
                for x in 0..w {
                    let x1 = (x + 1).min(w - 1);
                    let mut win = [p[y * w + x], p[y * w + x1], p[y1 * w + x], p[y1 * w + x1]];
                    win.sort_by(f32::total_cmp);
                    dst[ch * h * w + y * w + x] = (win[1] + win[2]) / 2.0;
                }
            }
        }
    }
    Ok(out)
}

/// Quantises every value to `2^r` evenly spaced levels.
pub fn filter_bitr(images: &Tensor<f32>, r: u32) -> Result<Tensor<f32>> {
    if !(1..=8).contains(&r) {
        return Err(Error::Config(format!("bit depth r must be in 1..=8 (got {r})")));
    }
    let levels = ((1u32 << r) - 1) as f32;
    Ok(images.map(|v| (v * levels + 0.5).floor() / levels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvmParams {
    pub keep_p: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for TvmParams {
    fn default() -> Self {
        Self {
            keep_p: 0.5,
            lambda: 0.03,
            iterations: 50,
            step: 0.1,
        }
    }
}

const TV_SMOOTH: f64 = 1e-6;

/// Objective `Σ m(z−x)² + λ Σ √(Δ²+1e-6)` over left and upper neighbours of one plane.
pub fn tvm_objective(z: &[f64], x: &[f64], mask: &[bool], h: usize, w: usize, lambda: f64) -> f64 {
    let mut data = 0.0;
    let mut tv = 0.0;
    for y in 0..h {
        for xi in 0..w {
            let i = y * w + xi;
            if mask[i] {
                data += (z[i] - x[i]).powi(2);
            }
            if xi > 0 {
                tv += ((z[i] - z[i - 1]).powi(2) + TV_SMOOTH).sqrt();
            }
            if y > 0 {
                tv += ((z[i] - z[i - w]).powi(2) + TV_SMOOTH).sqrt();
            }
        }
    }
    data + lambda * tv
}

fn tvm_gradient(z: &[f64], x: &[f64], mask: &[bool], h: usize, w: usize, lambda: f64, g: &mut [f64]) {
    g.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        for xi in 0..w {
            let i = y * w + xi;
            if mask[i] {
                g[i] += 2.0 * (z[i] - x[i]);
            }
            for j in [(xi > 0).then(|| i - 1), (y > 0).then(|| i - w)].into_iter().flatten() {
                let d = z[i] - z[j];
                let s = lambda * d / (d * d + TV_SMOOTH).sqrt();
                g[i] += s;
                g[j] -= s;
            }
        }
    }
}

/// Gradient descent from `z = x` with step halving whenever a step would
/// increase the objective. Returns the solution and the objective after
/// each iteration (first entry is the starting value).
pub fn tvm_solve(x: &[f64], mask: &[bool], h: usize, w: usize, params: &TvmParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut z = x.to_vec();
    let mut g = vec![0.0; z.len()];
    let mut trial = vec![0.0; z.len()];
    let mut obj = tvm_objective(&z, x, mask, h, w, params.lambda);
    let mut history = vec![obj];
    let mut step = params.step;
    for it in 0..params.iterations {
        tvm_gradient(&z, x, mask, h, w, params.lambda, &mut g);
        let mut accepted = false;
        for _ in 0..30 {
            for ((t, &zi), &gi) in trial.iter_mut().zip(&z).zip(&g) {
                *t = zi - step * gi;
            }
            let o = tvm_objective(&trial, x, mask, h, w, params.lambda);
            if !o.is_finite() {
                return Err(Error::numeric(format!("tvm objective at iteration {it}")));
            }
            if o <= obj {
                std::mem::swap(&mut z, &mut trial);
                obj = o;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        history.push(obj);
        if !accepted {
            break;
        }
    }
    Ok((z, history))
}

/// Total-variation minimisation with a Bernoulli(`keep_p`) pixel mask shared
/// across channels.
pub fn filter_tvm(images: &Tensor<f32>, params: &TvmParams, rng: &mut RngStream) -> Result<Tensor<f32>> {
    if !(params.keep_p > 0.0 && params.keep_p <= 1.0) {
        return Err(Error::Config(format!("tvm keep probability must be in (0,1] (got {})", params.keep_p)));
    }
    let (n, c, h, w) = dims(images)?;
    let plane = h * w;
    let mut out = images.clone();
    for i in 0..n {
        let mask: Vec<bool> = (0..plane).map(|_| rng.bernoulli(params.keep_p)).collect();
        for ch in 0..c {
            let x: Vec<f64> = images.item(i)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
            let (z, _) = tvm_solve(&x, &mask, h, w, params)?;
            for (o, v) in out.item_mut(i)[ch * plane..(ch + 1) * plane].iter_mut().zip(z) {
                *o = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}
