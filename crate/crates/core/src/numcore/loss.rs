//! Losses with their gradients, and whole-network gradient helpers.

use super::nn::Network;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax of an N×K matrix, with optional temperature.
pub fn softmax_rows<F: Real>(logits: &Tensor<F>, temperature: F) -> Tensor<F> {
    let k = logits.item_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over rows and its gradient wrt the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    let n = logits.batch();
    let k = logits.item_len();
    if labels.len() != n {
        return Err(Error::shape(&[n], &[labels.len()]));
    }
    let mut grad = softmax_rows(logits, F::one());
    let inv_n = F::one() / F::lit(n as f64);
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        let row = &mut grad.data_mut()[i * k..(i + 1) * k];
        loss -= row[y].max(F::min_positive_value()).ln();
        row[y] -= F::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::numeric("cross-entropy loss"));
    }
    Ok((loss, grad))
}

/// Mean squared error over all elements and its gradient wrt `pred`.
pub fn mean_squared_error<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<(F, Tensor<F>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    let inv = F::one() / F::lit(pred.len() as f64);
    let mut grad = pred.clone();
    let mut loss = F::zero();
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        loss += d * d;
        *g = F::lit(2.0) * d * inv;
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::numeric("mean-squared-error loss"));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, F> {
    Labels(&'a [usize]),
    Values(&'a Tensor<F>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFn {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

impl LossFn {
    pub fn eval<F: Real>(&self, out: &Tensor<F>, targets: Targets<'_, F>) -> Result<(F, Tensor<F>)> {
        match (self, targets) {
            (LossFn::SoftmaxCrossEntropy, Targets::Labels(l)) => {
                let flat = out.clone().reshape(&[out.batch(), out.item_len()])?;
                let (loss, g) = softmax_cross_entropy(&flat, l)?;
                Ok((loss, g.reshape(out.shape())?))
            }
            (LossFn::MeanSquaredError, Targets::Values(t)) => mean_squared_error(out, t),
            _ => Err(Error::Input("loss/target kind mismatch".into())),
        }
    }
}

/// Loss value and gradients wrt every parameter. Does not mutate `net`.
pub fn grad_params<F: Real>(
    net: &Network<F>,
    loss: LossFn,
    batch: &Tensor<F>,
    targets: Targets<'_, F>,
) -> Result<(F, Vec<Tensor<F>>)> {
    let trace = net.forward_trace(batch)?;
    let (l, g) = loss.eval(&trace.output, targets)?;
    Ok((l, net.backward(&trace, &g, false)?.params))
}

/// Loss value and gradient wrt the input batch.
pub fn grad_input<F: Real>(
    net: &Network<F>,
    loss: LossFn,
    batch: &Tensor<F>,
    targets: Targets<'_, F>,
) -> Result<(F, Tensor<F>)> {
    let trace = net.forward_trace(batch)?;
    let (l, g) = loss.eval(&trace.output, targets)?;
    let grads = net.backward(&trace, &g, true)?;
    Ok((l, grads.input.expect("requested")))
}
