//! Central finite differences, the reference for every analytic gradient.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    h: F,
) -> Result<Tensor<F>> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!("finite difference at coordinate {i}")));
        }
        out.data_mut()[i] = (up - down) / two_h;
    }
    Ok(out)
}

/// Central differences at the listed coordinates only.
pub fn finite_diff_coords<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    h: F,
    coords: &[usize],
) -> Result<Vec<F>> {
    let mut probe = x.clone();
    let two_h = h + h;
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numeric(format!("finite difference at coordinate {i}")));
            }
            Ok((up - down) / two_h)
        })
        .collect()
}

/// Largest mismatch between two gradients: relative where the analytic
/// entry is at least `floor` in magnitude, absolute otherwise.
/// Returns `(max_relative, max_absolute_on_small_entries)`.
pub fn gradient_mismatch<F: Real>(analytic: &Tensor<F>, numeric: &Tensor<F>, floor: f64) -> (f64, f64) {
    let mut rel: f64 = 0.0;
    let mut abs: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let (a, n) = (a.to_f64(), n.to_f64());
        if a.abs() < floor {
            abs = abs.max((a - n).abs());
        } else {
            rel = rel.max((a - n).abs() / a.abs().max(n.abs()));
        }
    }
    (rel, abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(vec![4], vec![0.3f64, -1.0, 2.0, 5.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_two() {
        let x = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_error() {
        let x = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        assert!(finite_diff_grad(|t| Ok(1.0 / t.data()[0].abs().min(1e-4) - 1e4 + f64::NAN), &x, 1e-4).is_err());
    }
}
