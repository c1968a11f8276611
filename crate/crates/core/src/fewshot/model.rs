//! Prototypical and relation-style metric heads over a shared encoder.
//!
//! Every consumer (training, attacks, ODIN, detection) goes through
//! [`FewShotModel::episode_grads`], which mixes differentiable images with
//! precomputed features so gradients are only paid for where needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{desk_encoder_specs, Trace, FEATURE_SHAPE, IMAGE_SHAPE};
use crate::numcore::{LayerSpec, Network, Real, RngStream, Tensor, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Prototypical,
    Relation,
}

pub const RELATION_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotModel<F = f32> {
    pub encoder: Network<F>,
    pub head_kind: HeadKind,
    /// Present iff `head_kind == Relation`.
    pub relation: Option<Network<F>>,
    pub k_way: usize,
    pub n_shot: usize,
}

/// Role of an image or feature row inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Support(usize),
    Query(usize),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeGrads<F> {
    pub loss: F,
    /// Query logits, rows ordered traced queries first then fixed queries.
    pub logits: Tensor<F>,
    pub query_labels: Vec<usize>,
    pub encoder: Option<Vec<Tensor<F>>>,
    pub relation: Option<Vec<Tensor<F>>>,
    /// Gradient wrt the traced images.
    pub input: Option<Tensor<F>>,
}

/// Caches what the head needs for its backward pass.
pub enum HeadCache<F> {
    Proto,
    Relation { trace: Trace<F> },
}

impl<F: Real> FewShotModel<F> {
    pub fn new(head_kind: HeadKind, k_way: usize, n_shot: usize, rng: &mut RngStream) -> Result<Self> {
        let encoder = Network::new(Topology::Encoder, &IMAGE_SHAPE, desk_encoder_specs(), &mut rng.child(1))?;
        let relation = match head_kind {
            HeadKind::Prototypical => None,
            HeadKind::Relation => Some(Network::new(
                Topology::RelationHead,
                &[2 * FEATURE_SHAPE[0]],
                relation_head_specs(FEATURE_SHAPE[0]),
                &mut rng.child(2),
            )?),
        };
        Ok(Self {
            encoder,
            head_kind,
            relation,
            k_way,
            n_shot,
        })
    }

    pub fn cast<G: Real>(&self) -> FewShotModel<G> {
        FewShotModel {
            encoder: self.encoder.cast(),
            head_kind: self.head_kind,
            relation: self.relation.as_ref().map(Network::cast),
            k_way: self.k_way,
            n_shot: self.n_shot,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.output_shape()[0]
    }

    /// Flattened encoder features `[n, d]`.
    pub fn encode(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let f = self.encoder.forward(images)?;
        let (n, d) = (f.batch(), f.item_len());
        f.reshape(&[n, d])
    }

    /// Averaged feature of one class's support images.
    pub fn class_feature(&self, support_of_class: &Tensor<F>) -> Result<Tensor<F>> {
        if support_of_class.batch() == 0 {
            return Err(Error::Input("class feature needs at least one support sample".into()));
        }
        let f = self.encode(support_of_class)?;
        let d = f.item_len();
        let n = F::lit(f.batch() as f64);
        let mut out = Tensor::zeros(&[d]);
        for i in 0..f.batch() {
            for (o, &v) in out.data_mut().iter_mut().zip(f.item(i)) {
                *o += v;
            }
        }
        out.scale(F::one() / n);
        Ok(out)
    }

    /// Query-by-way logits from class features `[k, d]` and query features `[q, d]`.
    pub fn head_logits(&self, class_feats: &Tensor<F>, query_feats: &Tensor<F>) -> Result<(Tensor<F>, HeadCache<F>)> {
        match self.head_kind {
            HeadKind::Prototypical => Ok((proto_logits(class_feats, query_feats), HeadCache::Proto)),
            HeadKind::Relation => {
                let head = self.relation.as_ref().ok_or_else(|| Error::Config("relation head missing".into()))?;
                let pairs = self.relation_pairs(class_feats, query_feats);
                let trace = head.forward_trace(&pairs)?;
                let (q, k) = (query_feats.batch(), class_feats.batch());
                let logits = trace.output.clone().reshape(&[q, k])?;
                Ok((logits, HeadCache::Relation { trace }))
            }
        }
    }

    /// Backward through the head: `(d_class, d_query, relation param grads)`.
    pub fn head_backward(
        &self,
        class_feats: &Tensor<F>,
        query_feats: &Tensor<F>,
        cache: &HeadCache<F>,
        dlogits: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>, Option<Vec<Tensor<F>>>)> {
        let (k, d) = (class_feats.batch(), class_feats.item_len());
        let q = query_feats.batch();
        match cache {
            HeadCache::Proto => {
                // logit = -|f_q - f_c|^2
                let mut dc = Tensor::zeros(&[k, d]);
                let mut dq = Tensor::zeros(&[q, d]);
                for qi in 0..q {
                    for ci in 0..k {
                        let g = dlogits.data()[qi * k + ci];
                        if g == F::zero() {
                            continue;
                        }
                        let two_g = g + g;
                        for j in 0..d {
                            let diff = query_feats.data()[qi * d + j] - class_feats.data()[ci * d + j];
                            dq.data_mut()[qi * d + j] -= two_g * diff;
                            dc.data_mut()[ci * d + j] += two_g * diff;
                        }
                    }
                }
                Ok((dc, dq, None))
            }
            HeadCache::Relation { trace } => {
                let head = self.relation.as_ref().expect("relation cache implies head");
                let gout = dlogits.clone().reshape(&[q * k, 1])?;
                let grads = head.backward(trace, &gout, true)?;
                let dpairs = grads.input.expect("requested");
                let ch = self.feature_channels();
                let spatial = d / ch;
                let inv = F::one() / F::lit(spatial as f64);
                let mut dc = Tensor::zeros(&[k, d]);
                let mut dq = Tensor::zeros(&[q, d]);
                for qi in 0..q {
                    for ci in 0..k {
                        let row = dpairs.item(qi * k + ci);
                        for c in 0..ch {
                            let gc = row[c] * inv;
                            let gq = row[ch + c] * inv;
                            for s in 0..spatial {
                                dc.data_mut()[ci * d + c * spatial + s] += gc;
                                dq.data_mut()[qi * d + c * spatial + s] += gq;
                            }
                        }
                    }
                }
                Ok((dc, dq, Some(grads.params)))
            }
        }
    }

    /// Rows `[pool(class_k), pool(query_q)]`, ordered query-major.
    fn relation_pairs(&self, class_feats: &Tensor<F>, query_feats: &Tensor<F>) -> Tensor<F> {
        let ch = self.feature_channels();
        let pc = global_pool(class_feats, ch);
        let pq = global_pool(query_feats, ch);
        let (k, q) = (class_feats.batch(), query_feats.batch());
        let mut data = Vec::with_capacity(q * k * 2 * ch);
        for qi in 0..q {
            for ci in 0..k {
                data.extend_from_slice(pc.item(ci));
                data.extend_from_slice(pq.item(qi));
            }
        }
        Tensor::new(vec![q * k, 2 * ch], data).expect("consistent sizes")
    }

    /// Plain inference: support images with way labels, query images.
    pub fn logits(&self, support: &Tensor<F>, support_ways: &[usize], k_way: usize, query: &Tensor<F>) -> Result<Tensor<F>> {
        let sf = self.encode(support)?;
        let qf = self.encode(query)?;
        self.logits_from_features(&sf, support_ways, k_way, &qf)
    }

    pub fn logits_from_features(
        &self,
        support_feats: &Tensor<F>,
        support_ways: &[usize],
        k_way: usize,
        query_feats: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let (class_feats, _) = class_means(support_feats, support_ways, k_way)?;
        Ok(self.head_logits(&class_feats, query_feats)?.0)
    }

    /// Forward and backward of one episode objective.
    ///
    /// `traced` images go through a recorded encoder pass; `fixed` rows are
    /// precomputed features treated as constants. The objective maps
    /// `(logits, query_labels)` to a loss and its gradient wrt the logits.
    #[allow(clippy::too_many_arguments)]
    pub fn episode_grads(
        &self,
        traced: Option<(&Tensor<F>, &[Role])>,
        fixed: Option<(&Tensor<F>, &[Role])>,
        k_way: usize,
        objective: &dyn Fn(&Tensor<F>, &[usize]) -> Result<(F, Tensor<F>)>,
        want: Want,
    ) -> Result<EpisodeGrads<F>> {
        let trace = match traced {
            Some((imgs, roles)) if imgs.batch() > 0 => {
                if roles.len() != imgs.batch() {
                    return Err(Error::shape(&[imgs.batch()], &[roles.len()]));
                }
                Some(self.encoder.forward_trace(imgs)?)
            }
            _ => None,
        };
        let traced_feats = match &trace {
            Some(t) => Some(t.output.clone().reshape(&[t.output.batch(), t.output.item_len()])?),
            None => None,
        };
        let d = traced_feats
            .as_ref()
            .map(|f| f.item_len())
            .or_else(|| fixed.map(|(f, _)| f.item_len()))
            .ok_or_else(|| Error::Input("episode has no images".into()))?;

        let mut rows: Vec<(&[F], Role)> = Vec::new();
        if let (Some(f), Some((_, roles))) = (&traced_feats, traced) {
            rows.extend(roles.iter().enumerate().map(|(i, &r)| (f.item(i), r)));
        }
        if let Some((f, roles)) = fixed {
            if roles.len() != f.batch() {
                return Err(Error::shape(&[f.batch()], &[roles.len()]));
            }
            rows.extend(roles.iter().enumerate().map(|(i, &r)| (f.item(i), r)));
        }

        let mut sums = Tensor::zeros(&[k_way, d]);
        let mut counts = vec![0usize; k_way];
        let mut qdata = Vec::new();
        let mut labels = Vec::new();
        for (row, role) in &rows {
            match *role {
                Role::Support(w) => {
                    if w >= k_way {
                        return Err(Error::Input(format!("support way {w} >= {k_way}")));
                    }
                    counts[w] += 1;
                    for (s, &v) in sums.item_mut(w).iter_mut().zip(row.iter()) {
                        *s += v;
                    }
                }
                Role::Query(l) => {
                    qdata.extend_from_slice(row);
                    labels.push(l);
                }
            }
        }
        if let Some(w) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Input(format!("way {w} has no support samples")));
        }
        for (w, &c) in counts.iter().enumerate() {
            let inv = F::one() / F::lit(c as f64);
            for v in sums.item_mut(w) {
                *v *= inv;
            }
        }
        let class_feats = sums;
        let query_feats = Tensor::new(vec![labels.len(), d], qdata)?;
        let (logits, cache) = self.head_logits(&class_feats, &query_feats)?;
        let (loss, dlogits) = objective(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::numeric("episode loss"));
        }
        let (dc, dq, head_grads) = self.head_backward(&class_feats, &query_feats, &cache, &dlogits)?;

        let mut encoder_grads = None;
        let mut input = None;
        if let (Some(trace), Some((_, roles))) = (&trace, traced) {
            if want.params || want.input {
                let mut dfeat = Tensor::zeros(trace.output.shape());
                let mut qi = 0;
                for (i, role) in roles.iter().enumerate() {
                    let dst = dfeat.item_mut(i);
                    match *role {
                        Role::Support(w) => {
                            let inv = F::one() / F::lit(counts[w] as f64);
                            for (o, &g) in dst.iter_mut().zip(dc.item(w)) {
                                *o = g * inv;
                            }
                        }
                        Role::Query(_) => {
                            dst.copy_from_slice(dq.item(qi));
                            qi += 1;
                        }
                    }
                }
                let g = self.encoder.backward(trace, &dfeat, want.input)?;
                if want.params {
                    encoder_grads = Some(g.params);
                }
                input = g.input;
            }
        }
        Ok(EpisodeGrads {
            loss,
            logits,
            query_labels: labels,
            encoder: encoder_grads,
            relation: if want.params { head_grads } else { None },
            input,
        })
    }

    /// All trainable tensors: encoder then relation head.
    pub fn params(&self) -> Vec<Tensor<F>> {
        let mut p = self.encoder.params().to_vec();
        if let Some(h) = &self.relation {
            p.extend_from_slice(h.params());
        }
        p
    }

    pub fn set_params(&mut self, mut params: Vec<Tensor<F>>) -> Result<()> {
        let n_enc = self.encoder.params().len();
        let head = params.split_off(n_enc.min(params.len()));
        self.encoder.set_params(params)?;
        if let Some(h) = &mut self.relation {
            h.set_params(head)?;
        }
        Ok(())
    }
}

pub fn relation_head_specs(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            inputs: 2 * channels,
            outputs: RELATION_HIDDEN,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: RELATION_HIDDEN,
            outputs: 1,
        },
    ]
}

/// `logit(q, c) = -‖f_q − f_c‖²`.
pub fn proto_logits<F: Real>(class_feats: &Tensor<F>, query_feats: &Tensor<F>) -> Tensor<F> {
    let (k, d) = (class_feats.batch(), class_feats.item_len());
    let q = query_feats.batch();
    Tensor::from_fn(&[q, k], |idx| {
        let (qi, ci) = (idx / k, idx % k);
        let a = &query_feats.data()[qi * d..(qi + 1) * d];
        let b = &class_feats.data()[ci * d..(ci + 1) * d];
        -a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>()
    })
}

/// Per-way mean of flattened features. Returns `(means, counts)`.
pub fn class_means<F: Real>(feats: &Tensor<F>, ways: &[usize], k_way: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    if ways.len() != feats.batch() {
        return Err(Error::shape(&[feats.batch()], &[ways.len()]));
    }
    let d = feats.item_len();
    let mut sums = Tensor::zeros(&[k_way, d]);
    let mut counts = vec![0usize; k_way];
    for (i, &w) in ways.iter().enumerate() {
        counts[w] += 1;
        for (s, &v) in sums.item_mut(w).iter_mut().zip(feats.item(i)) {
            *s += v;
        }
    }
    if let Some(w) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("way {w} has no support samples")));
    }
    for (w, &c) in counts.iter().enumerate() {
        let inv = F::one() / F::lit(c as f64);
        for v in sums.item_mut(w) {
            *v *= inv;
        }
    }
    Ok((sums, counts))
}

/// Spatial average of `[n, channels·spatial]` rows into `[n, channels]`.
fn global_pool<F: Real>(feats: &Tensor<F>, channels: usize) -> Tensor<F> {
    let n = feats.batch();
    let spatial = feats.item_len() / channels;
    let inv = F::one() / F::lit(spatial as f64);
    Tensor::from_fn(&[n, channels], |idx| {
        let (i, c) = (idx / channels, idx % channels);
        feats.item(i)[c * spatial..(c + 1) * spatial].iter().copied().sum::<F>() * inv
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::loss::argmax;

    fn model(kind: HeadKind) -> FewShotModel<f32> {
        FewShotModel::new(kind, 3, 1, &mut RngStream::new(4, 0)).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut r = RngStream::new(seed, 9);
        Tensor::from_fn(&[n, 3, 16, 16], |_| r.uniform(0.0, 1.0) as f32)
    }

    #[test]
    fn one_shot_class_feature_is_the_feature() {
        let m = model(HeadKind::Prototypical);
        let x = images(1, 1);
        let f = m.encode(&x).unwrap();
        assert_eq!(m.class_feature(&x).unwrap().data(), f.item(0));
        let twice = Tensor::concat(&[&x, &x]).unwrap();
        let f2 = m.class_feature(&twice).unwrap();
        for (a, b) in f2.data().iter().zip(f.item(0)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn proto_query_equal_to_support_scores_zero() {
        let m = model(HeadKind::Prototypical);
        let s = images(3, 2);
        let q = s.select(&[1]);
        let logits = m.logits(&s, &[0, 1, 2], 3, &q).unwrap();
        assert_eq!(logits.data()[1], 0.0);
        assert!(logits.data()[0] < 0.0 && logits.data()[2] < 0.0);
        assert_eq!(argmax(logits.data()), 1);
    }

    #[test]
    fn proto_equidistant_tie_breaks_low() {
        let c = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, -1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.0f32, 0.5]).unwrap();
        let l = proto_logits(&c, &q);
        assert_eq!(l.data()[0], l.data()[1]);
        assert_eq!(argmax(l.data()), 0);
    }

    #[test]
    fn zero_relation_head_outputs_bias() {
        let mut m = model(HeadKind::Relation);
        let head = m.relation.as_mut().unwrap();
        for p in head.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = head.params().len() - 1;
        head.params_mut()[last].data_mut()[0] = 0.37;
        let s = images(3, 3);
        let q = images(2, 4);
        let logits = m.logits(&s, &[0, 1, 2], 3, &q).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn way_permutation_equivariance() {
        for kind in [HeadKind::Prototypical, HeadKind::Relation] {
            let m = model(kind);
            let s = images(3, 5);
            let q = images(4, 6);
            let base = m.logits(&s, &[0, 1, 2], 3, &q).unwrap();
            // way of support i becomes perm[i]
            let perm = [2, 0, 1];
            let permuted = m.logits(&s, &perm, 3, &q).unwrap();
            for qi in 0..4 {
                for w in 0..3 {
                    assert_eq!(base.data()[qi * 3 + w], permuted.data()[qi * 3 + perm[w]]);
                }
            }
        }
    }

    #[test]
    fn proto_logits_non_positive() {
        let m = model(HeadKind::Prototypical);
        let l = m.logits(&images(6, 7), &[0, 0, 1, 1, 2, 2], 3, &images(5, 8)).unwrap();
        assert!(l.data().iter().all(|&v| v <= 0.0));
    }
}
