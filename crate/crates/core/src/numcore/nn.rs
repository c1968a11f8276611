//! Layer-stack networks with explicit forward and backward passes.
//!
//! Activations are NCHW (or N×D after a dense layer). Convolutions use
//! "same" zero padding of `kernel / 2` and are lowered to im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    /// 2×2 average pooling, stride 2.
    AvgPool2,
    /// 2× nearest-neighbour upsampling.
    Upsample2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Encoder,
    Decoder,
    RelationHead,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(Error::shape(&[in_ch, 0, 0], input));
                }
                let pad = kernel / 2;
                let ho = (input[1] + 2 * pad - kernel) / stride + 1;
                let wo = (input[2] + 2 * pad - kernel) / stride + 1;
                Ok(vec![out_ch, ho, wo])
            }
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::shape(&[inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::AvgPool2 => {
                if input.len() != 3 || input[1] % 2 != 0 || input[2] % 2 != 0 {
                    return Err(Error::Input(format!("avg-pool needs even C×H×W, got {input:?}")));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Upsample2 => {
                if input.len() != 3 {
                    return Err(Error::Input(format!("upsample needs C×H×W, got {input:?}")));
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch * kernel * kernel], vec![out_ch]],
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => vec![],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F = f32> {
    pub topology: Topology,
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    /// `[weight, bias]` per parametric layer, in layer order.
    params: Vec<Tensor<F>>,
    /// Index into `params` of each layer's weight, if it has one.
    param_slot: Vec<Option<usize>>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    inputs: Vec<Tensor<F>>,
    cols: Vec<Option<Vec<F>>>,
    pub output: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub params: Vec<Tensor<F>>,
    pub input: Option<Tensor<F>>,
}

impl<F: Real> Network<F> {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new(
        topology: Topology,
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut net = Self::zeroed(topology, input_shape, specs)?;
        for (li, spec) in net.specs.iter().enumerate() {
            if let Some(slot) = net.param_slot[li] {
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                for w in net.params[slot].data_mut() {
                    *w = F::lit(rng.normal() * std);
                }
            }
        }
        Ok(net)
    }

    /// Builds a network with all parameters zero.
    pub fn zeroed(topology: Topology, input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        let mut param_slot = Vec::with_capacity(specs.len());
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
            let ps = spec.param_shapes();
            if ps.is_empty() {
                param_slot.push(None);
            } else {
                param_slot.push(Some(params.len()));
                params.extend(ps.iter().map(|s| Tensor::zeros(s)));
            }
        }
        Ok(Self {
            topology,
            input_shape: input_shape.to_vec(),
            specs,
            params,
            param_slot,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = self.input_shape.clone();
        for spec in &self.specs {
            s = spec.output_shape(&s).expect("validated at construction");
        }
        s
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    /// Replaces all parameters, checking shapes.
    pub fn set_params(&mut self, params: Vec<Tensor<F>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::shape(old.shape(), new.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            topology: self.topology,
            input_shape: self.input_shape.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            param_slot: self.param_slot.clone(),
        }
    }

    pub fn zero_grads(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    fn check_input(&self, batch: &Tensor<F>) -> Result<()> {
        if batch.rank() == 0 || batch.item_shape() != self.input_shape.as_slice() {
            let mut expected = vec![batch.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape(&expected, batch.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (li, spec) in self.specs.iter().enumerate() {
            let (y, _) = self.layer_forward(li, spec, &x, false);
            if !y.all_finite() {
                return Err(Error::numeric(format!("output of layer {li}")));
            }
            x = y;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, batch: &Tensor<F>) -> Result<Trace<F>> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut cols = Vec::with_capacity(self.specs.len());
        let mut x = batch.clone();
        for (li, spec) in self.specs.iter().enumerate() {
            let (y, c) = self.layer_forward(li, spec, &x, true);
            if !y.all_finite() {
                return Err(Error::numeric(format!("output of layer {li}")));
            }
            inputs.push(std::mem::replace(&mut x, y));
            cols.push(c);
        }
        Ok(Trace {
            inputs,
            cols,
            output: x,
        })
    }

    /// Backpropagates `grad_out` (same shape as the trace output).
    pub fn backward(&self, trace: &Trace<F>, grad_out: &Tensor<F>, need_input: bool) -> Result<Gradients<F>> {
        if grad_out.shape() != trace.output.shape() {
            return Err(Error::shape(trace.output.shape(), grad_out.shape()));
        }
        let mut grads = self.zero_grads();
        let mut g = grad_out.clone();
        for li in (0..self.specs.len()).rev() {
            if !g.all_finite() {
                return Err(Error::numeric(format!("gradient into layer {li}")));
            }
            let want_dx = li > 0 || need_input;
            let x = &trace.inputs[li];
            let y = if li + 1 < self.specs.len() {
                &trace.inputs[li + 1]
            } else {
                &trace.output
            };
            g = self.layer_backward(li, x, y, trace.cols[li].as_deref(), &g, &mut grads, want_dx);
        }
        Ok(Gradients {
            params: grads,
            input: need_input.then_some(g),
        })
    }

    fn layer_forward(&self, li: usize, spec: &LayerSpec, x: &Tensor<F>, keep: bool) -> (Tensor<F>, Option<Vec<F>>) {
        let n = x.batch();
        match *spec {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                let slot = self.param_slot[li].unwrap();
                let (w, b) = (&self.params[slot], &self.params[slot + 1]);
                let (h, wd) = (x.shape()[2], x.shape()[3]);
                let geo = ConvGeom::new(in_ch, h, wd, kernel, stride);
                let cols = im2col(x.data(), n, &geo);
                let np = n * geo.p();
                let mut yt = vec![F::zero(); out_ch * np];
                F::gemm(out_ch, geo.k(), np, w.data(), false, &cols, false, F::zero(), &mut yt);
                let p = geo.p();
                let mut out = Tensor::zeros(&[n, out_ch, geo.ho, geo.wo]);
                let od = out.data_mut();
                for co in 0..out_ch {
                    let bias = b.data()[co];
                    for s in 0..n {
                        let src = &yt[co * np + s * p..co * np + (s + 1) * p];
                        let dst = &mut od[(s * out_ch + co) * p..(s * out_ch + co + 1) * p];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + bias;
                        }
                    }
                }
                (out, keep.then_some(cols))
            }
            LayerSpec::Dense { inputs, outputs } => {
                let slot = self.param_slot[li].unwrap();
                let (w, b) = (&self.params[slot], &self.params[slot + 1]);
                let mut out = Tensor::zeros(&[n, outputs]);
                {
                    let od = out.data_mut();
                    for s in 0..n {
                        od[s * outputs..(s + 1) * outputs].copy_from_slice(b.data());
                    }
                    F::gemm(n, inputs, outputs, x.data(), false, w.data(), true, F::one(), od);
                }
                (out, None)
            }
            LayerSpec::Relu => (x.map(|v| v.max(F::zero())), None),
            LayerSpec::Sigmoid => (x.map(|v| F::one() / (F::one() + (-v).exp())), None),
            LayerSpec::AvgPool2 => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = F::lit(0.25);
                let xd = x.data();
                let out = Tensor::from_fn(&[n, c, ho, wo], |idx| {
                    let j = idx % wo;
                    let i = (idx / wo) % ho;
                    let plane = idx / (wo * ho);
                    let base = plane * h * w + 2 * i * w + 2 * j;
                    (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter
                });
                (out, None)
            }
            LayerSpec::Upsample2 => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (ho, wo) = (h * 2, w * 2);
                let xd = x.data();
                let out = Tensor::from_fn(&[n, c, ho, wo], |idx| {
                    let j = idx % wo;
                    let i = (idx / wo) % ho;
                    let plane = idx / (wo * ho);
                    xd[plane * h * w + (i / 2) * w + j / 2]
                });
                (out, None)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        li: usize,
        x: &Tensor<F>,
        y: &Tensor<F>,
        cols: Option<&[F]>,
        gy: &Tensor<F>,
        grads: &mut [Tensor<F>],
        want_dx: bool,
    ) -> Tensor<F> {
        let n = x.batch();
        match self.specs[li] {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                let slot = self.param_slot[li].unwrap();
                let (h, wd) = (x.shape()[2], x.shape()[3]);
                let geo = ConvGeom::new(in_ch, h, wd, kernel, stride);
                let p = geo.p();
                let np = n * p;
                // dY as Cout × (N·P)
                let mut gyt = vec![F::zero(); out_ch * np];
                let gd = gy.data();
                for s in 0..n {
                    for co in 0..out_ch {
                        gyt[co * np + s * p..co * np + (s + 1) * p]
                            .copy_from_slice(&gd[(s * out_ch + co) * p..(s * out_ch + co + 1) * p]);
                    }
                }
                let owned;
                let cols = match cols {
                    Some(c) => c,
                    None => {
                        owned = im2col(x.data(), n, &geo);
                        &owned
                    }
                };
                F::gemm(out_ch, np, geo.k(), &gyt, false, cols, true, F::zero(), grads[slot].data_mut());
                let db = grads[slot + 1].data_mut();
                for co in 0..out_ch {
                    db[co] = gyt[co * np..(co + 1) * np].iter().copied().sum();
                }
                if !want_dx {
                    return Tensor::zeros(x.shape());
                }
                let mut dcols = vec![F::zero(); geo.k() * np];
                let w = &self.params[slot];
                F::gemm(geo.k(), out_ch, np, w.data(), true, &gyt, false, F::zero(), &mut dcols);
                let mut dx = Tensor::zeros(x.shape());
                col2im(&dcols, n, &geo, dx.data_mut());
                dx
            }
            LayerSpec::Dense { inputs, outputs } => {
                let slot = self.param_slot[li].unwrap();
                F::gemm(outputs, n, inputs, gy.data(), true, x.data(), false, F::zero(), grads[slot].data_mut());
                let db = grads[slot + 1].data_mut();
                for s in 0..n {
                    for (d, &g) in db.iter_mut().zip(&gy.data()[s * outputs..(s + 1) * outputs]) {
                        *d += g;
                    }
                }
                if !want_dx {
                    return Tensor::zeros(x.shape());
                }
                let w = &self.params[slot];
                let mut dx = Tensor::zeros(x.shape());
                F::gemm(n, outputs, inputs, gy.data(), false, w.data(), false, F::zero(), dx.data_mut());
                dx
            }
            LayerSpec::Relu => {
                let mut dx = gy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= F::zero() {
                        *d = F::zero();
                    }
                }
                dx
            }
            LayerSpec::Sigmoid => {
                let mut dx = gy.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (F::one() - s);
                }
                dx
            }
            LayerSpec::AvgPool2 => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = F::lit(0.25);
                let gd = gy.data();
                Tensor::from_fn(x.shape(), |idx| {
                    let j = idx % w;
                    let i = (idx / w) % h;
                    let plane = idx / (w * h);
                    gd[plane * ho * wo + (i / 2) * wo + j / 2] * quarter
                })
            }
            LayerSpec::Upsample2 => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let wo = w * 2;
                let gd = gy.data();
                Tensor::from_fn(x.shape(), |idx| {
                    let j = idx % w;
                    let i = (idx / w) % h;
                    let plane = idx / (w * h);
                    let base = plane * 4 * h * w + 2 * i * wo + 2 * j;
                    gd[base] + gd[base + 1] + gd[base + wo] + gd[base + wo + 1]
                })
            }
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        Self {
            c,
            h,
            w,
            kernel,
            stride,
            pad,
            ho: (h + 2 * pad - kernel) / stride + 1,
            wo: (w + 2 * pad - kernel) / stride + 1,
        }
    }
    fn k(&self) -> usize {
        self.c * self.kernel * self.kernel
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Rows index (channel, ky, kx); columns index (sample, oy, ox).
fn im2col<F: Real>(x: &[F], n: usize, g: &ConvGeom) -> Vec<F> {
    let p = g.p();
    let np = n * p;
    let mut cols = vec![F::zero(); g.k() * np];
    for c in 0..g.c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for s in 0..n {
                    let plane = &x[(s * g.c + c) * g.h * g.w..(s * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out_row = &mut dst[s * p + oy * g.wo..s * p + (oy + 1) * g.wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], n: usize, g: &ConvGeom, dx: &mut [F]) {
    let p = g.p();
    let np = n * p;
    for c in 0..g.c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * np..(row + 1) * np];
                for s in 0..n {
                    let plane = &mut dx[(s * g.c + c) * g.h * g.w..(s * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[s * p + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The desk encoder: three blocks of (3×3 conv, ReLU, 2× average pool)
/// with widths 16/32/64, mapping 3×16×16 images to 64×2×2 features.
pub fn desk_encoder_specs() -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, o) in [(3, 16), (16, 32), (32, 64)] {
        specs.push(LayerSpec::Conv {
            in_ch: i,
            out_ch: o,
            kernel: 3,
            stride: 1,
        });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::AvgPool2);
    }
    specs
}

pub const IMAGE_SHAPE: [usize; 3] = [3, 16, 16];
pub const FEATURE_SHAPE: [usize; 3] = [64, 2, 2];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_conv() {
        let mut net = Network::<f64>::zeroed(
            Topology::Encoder,
            &[3, 4, 4],
            vec![LayerSpec::Conv {
                in_ch: 3,
                out_ch: 3,
                kernel: 1,
                stride: 1,
            }],
        )
        .unwrap();
        let w = net.params_mut()[0].data_mut();
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let mut r = RngStream::new(1, 0);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| r.uniform(0.0, 1.0));
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_dense_gives_zero() {
        let net = Network::<f32>::zeroed(
            Topology::RelationHead,
            &[5],
            vec![LayerSpec::Dense { inputs: 5, outputs: 3 }],
        )
        .unwrap();
        let x = Tensor::full(&[2, 5], 1.5f32);
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_shapes() {
        let mut r = RngStream::new(3, 0);
        let net = Network::<f32>::new(Topology::Encoder, &IMAGE_SHAPE, desk_encoder_specs(), &mut r).unwrap();
        assert_eq!(net.output_shape(), FEATURE_SHAPE.to_vec());
        let out = net.forward(&Tensor::full(&[2, 3, 16, 16], 0.5)).unwrap();
        assert_eq!(out.shape(), &[2, 64, 2, 2]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut r = RngStream::new(3, 0);
        let net = Network::<f32>::new(Topology::Encoder, &IMAGE_SHAPE, desk_encoder_specs(), &mut r).unwrap();
        match net.forward(&Tensor::zeros(&[1, 3, 8, 8])) {
            Err(Error::Shape { expected, actual }) => {
                assert_eq!(expected, vec![1, 3, 16, 16]);
                assert_eq!(actual, vec![1, 3, 8, 8]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strided_conv_shape() {
        let s = LayerSpec::Conv {
            in_ch: 2,
            out_ch: 4,
            kernel: 3,
            stride: 2,
        };
        assert_eq!(s.output_shape(&[2, 8, 8]).unwrap(), vec![4, 4, 4]);
    }
}
