//! Self-similarity scores and the ODIN baseline on episodic logits.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fewshot::{FewShotModel, Role, Want};
use crate::filters::{apply_filter, AeModel, FilterSpec};
use crate::numcore::loss::{argmax, softmax_cross_entropy, softmax_rows};
use crate::numcore::{RngStream, Tensor};

use super::{aux_partitions, filter_direction, AuxSplit, DetectionScore, Direction, Statistic};

/// The K−1 clean ways the defender supplies around the inspected class.
#[derive(Debug, Clone)]
pub struct Context {
    pub ids: Vec<usize>,
    pub feats: Tensor<f32>,
    /// Way of each context sample.
    pub ways: Vec<usize>,
    pub target_way: usize,
    pub k_way: usize,
}

impl Context {
    /// Draws `k_way − 1` classes of `split` other than `target` with
    /// `n_shot` samples each, and a random way slot for the target.
    pub fn draw(
        model: &FewShotModel<f32>,
        ds: &Dataset,
        split: Split,
        target: usize,
        k_way: usize,
        n_shot: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let others: Vec<usize> = ds.classes_in(split).into_iter().filter(|&c| c != target).collect();
        if others.len() + 1 < k_way {
            return Err(Error::Sampling(format!(
                "{split} split has {} classes besides {target}, context needs {}",
                others.len(),
                k_way - 1
            )));
        }
        let target_way = rng.below(k_way);
        let picks = rng.choose_distinct(others.len(), k_way - 1);
        let slots: Vec<usize> = (0..k_way).filter(|&w| w != target_way).collect();
        let mut ids = Vec::new();
        let mut ways = Vec::new();
        for (&p, &w) in picks.iter().zip(&slots) {
            let pool = ds.samples_of(others[p]);
            if pool.len() < n_shot {
                return Err(Error::Sampling(format!("class {} has too few samples", others[p])));
            }
            for i in rng.choose_distinct(pool.len(), n_shot) {
                ids.push(pool[i]);
                ways.push(w);
            }
        }
        let feats = model.encode(&ds.gather(&ids))?;
        Ok(Self {
            ids,
            feats,
            ways,
            target_way,
            k_way,
        })
    }

    /// Query logits with `support` filling the target way.
    pub fn logits(&self, model: &FewShotModel<f32>, support: &Tensor<f32>, query_feats: &Tensor<f32>) -> Result<Tensor<f32>> {
        let sf = model.encode(support)?;
        let feats = Tensor::concat(&[&self.feats, &sf])?;
        let mut ways = self.ways.clone();
        ways.extend(std::iter::repeat(self.target_way).take(support.batch()));
        model.logits_from_features(&feats, &ways, self.k_way, query_feats)
    }
}

/// Filter resources shared by the filter-based scores.
#[derive(Clone, Copy)]
pub struct FilterRef<'a> {
    pub spec: &'a FilterSpec,
    pub ae: Option<&'a AeModel<f32>>,
}

/// `(logits before, logits after)` filtering the auxiliary support of one split.
fn split_logits(
    model: &FewShotModel<f32>,
    filter: FilterRef<'_>,
    ctx: &Context,
    s_c: &Tensor<f32>,
    split: &AuxSplit,
    rng: &mut RngStream,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let aux = s_c.select(&split.support);
    let qf = model.encode(&s_c.select(&[split.query]))?;
    let before = ctx.logits(model, &aux, &qf)?;
    let filtered = apply_filter(filter.spec, &aux, filter.ae, rng)?;
    let after = ctx.logits(model, &filtered, &qf)?;
    Ok((before, after))
}

/// ℓ₁ change of the auxiliary query's logits when the auxiliary support is filtered.
pub fn u_adv(
    model: &FewShotModel<f32>,
    filter: FilterRef<'_>,
    ctx: &Context,
    s_c: &Tensor<f32>,
    split: &AuxSplit,
    rng: &mut RngStream,
) -> Result<DetectionScore> {
    let (before, after) = split_logits(model, filter, ctx, s_c, split, rng)?;
    let value = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(DetectionScore {
        statistic: Statistic::UAdv,
        value,
        direction: filter_direction(filter.spec, Statistic::UAdv),
    })
}

/// Mean of [`u_adv`] over every leave-one-out split.
pub fn u_adv_averaged(
    model: &FewShotModel<f32>,
    filter: FilterRef<'_>,
    ctx: &Context,
    s_c: &Tensor<f32>,
    rng: &mut RngStream,
) -> Result<DetectionScore> {
    let parts = aux_partitions(s_c.batch())?;
    let mut total = 0.0;
    for p in &parts {
        total += u_adv(model, filter, ctx, s_c, p, rng)?.value;
    }
    Ok(DetectionScore {
        statistic: Statistic::UAdvAvg,
        value: total / parts.len() as f64,
        direction: filter_direction(filter.spec, Statistic::UAdvAvg),
    })
}

/// Fraction of leave-one-out queries misclassified after filtering.
pub fn u_adv_prime(
    model: &FewShotModel<f32>,
    filter: FilterRef<'_>,
    ctx: &Context,
    s_c: &Tensor<f32>,
    rng: &mut RngStream,
) -> Result<DetectionScore> {
    let parts = aux_partitions(s_c.batch())?;
    let mut wrong = 0usize;
    for p in &parts {
        let aux = apply_filter(filter.spec, &s_c.select(&p.support), filter.ae, rng)?;
        let qf = model.encode(&s_c.select(&[p.query]))?;
        let logits = ctx.logits(model, &aux, &qf)?;
        if argmax(logits.item(0)) != ctx.target_way {
            wrong += 1;
        }
    }
    Ok(DetectionScore {
        statistic: Statistic::UAdvPrime,
        value: wrong as f64 / parts.len() as f64,
        direction: Direction::FlagIfAbove,
    })
}

/// Leave-one-out accuracy of a support set on itself, unfiltered.
pub fn self_similarity(model: &FewShotModel<f32>, ctx: &Context, s_c: &Tensor<f32>) -> Result<f64> {
    let spec = FilterSpec::Identity;
    let miss = u_adv_prime(
        model,
        FilterRef { spec: &spec, ae: None },
        ctx,
        s_c,
        &mut RngStream::new(0, 0),
    )?;
    Ok(1.0 - miss.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdinConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinConfig {
    fn default() -> Self {
        Self {
            temperature: 100.0,
            epsilon: 0.002,
        }
    }
}

/// Max temperature-scaled softmax of the auxiliary query after one signed
/// descent step on `−log softmax_ŷ(·/T)`.
pub fn odin_score(
    model: &FewShotModel<f32>,
    ctx: &Context,
    s_c: &Tensor<f32>,
    split: &AuxSplit,
    cfg: &OdinConfig,
) -> Result<DetectionScore> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config("ODIN temperature must be positive".into()));
    }
    let aux = s_c.select(&split.support);
    let q = s_c.select(&[split.query]);
    let sf = model.encode(&aux)?;
    let fixed = Tensor::concat(&[&ctx.feats, &sf])?;
    let mut roles: Vec<Role> = ctx.ways.iter().map(|&w| Role::Support(w)).collect();
    roles.extend(std::iter::repeat(Role::Support(ctx.target_way)).take(aux.batch()));

    let logits = ctx.logits(model, &aux, &model.encode(&q)?)?;
    let y_hat = argmax(logits.item(0));
    let t = cfg.temperature as f32;
    let scaled_ce = |l: &Tensor<f32>, labels: &[usize]| {
        let scaled = l.map(|v| v / t);
        let (loss, mut g) = softmax_cross_entropy(&scaled, labels)?;
        g.scale(1.0 / t);
        Ok((loss, g))
    };
    let g = model.episode_grads(
        Some((&q, &[Role::Query(y_hat)])),
        Some((&fixed, &roles)),
        ctx.k_way,
        &scaled_ce,
        Want {
            params: false,
            input: true,
        },
    )?;
    let grad = g.input.expect("requested");
    let eps = cfg.epsilon as f32;
    let q_tilde = Tensor::from_fn(q.shape(), |i| {
        let s = grad.data()[i];
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        };
        q.data()[i] - eps * sign
    });
    let logits = ctx.logits(model, &aux, &model.encode(&q_tilde)?)?;
    let p = softmax_rows(&logits, t);
    let value = p.item(0).iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    Ok(DetectionScore {
        statistic: Statistic::Odin,
        value,
        direction: Direction::FlagIfBelow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::fewshot::HeadKind;

    fn setup() -> (FewShotModel<f32>, Dataset, Context, Tensor<f32>) {
        let mut ds = synth_generate(12, 20, 3).unwrap();
        ds.split_classes([0.5, 0.25, 0.25], 3).unwrap();
        let m = FewShotModel::new(HeadKind::Prototypical, 3, 5, &mut RngStream::new(1, 1)).unwrap();
        let t = ds.classes_in(Split::Test)[0];
        let ctx = Context::draw(&m, &ds, Split::Test, t, 3, 5, &mut RngStream::new(2, 2)).unwrap();
        let s_c = ds.gather(&ds.samples_of(t)[..5]);
        (m, ds, ctx, s_c)
    }

    #[test]
    fn identity_filter_scores_zero() {
        let (m, _, ctx, s_c) = setup();
        let f = FilterRef {
            spec: &FilterSpec::Identity,
            ae: None,
        };
        let mut rng = RngStream::new(0, 0);
        for p in aux_partitions(5).unwrap() {
            assert_eq!(u_adv(&m, f, &ctx, &s_c, &p, &mut rng).unwrap().value, 0.0);
        }
        assert_eq!(u_adv_averaged(&m, f, &ctx, &s_c, &mut rng).unwrap().value, 0.0);
    }

    #[test]
    fn averaged_is_mean_of_splits() {
        let (m, _, ctx, s_c) = setup();
        let f = FilterRef {
            spec: &FilterSpec::Feats,
            ae: None,
        };
        let mut rng = RngStream::new(0, 0);
        let per: Vec<f64> = aux_partitions(5)
            .unwrap()
            .iter()
            .map(|p| u_adv(&m, f, &ctx, &s_c, p, &mut rng).unwrap().value)
            .collect();
        let avg = u_adv_averaged(&m, f, &ctx, &s_c, &mut rng).unwrap().value;
        assert!((avg - per.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    }

    #[test]
    fn prime_in_unit_interval() {
        let (m, _, ctx, s_c) = setup();
        let f = FilterRef {
            spec: &FilterSpec::Noise,
            ae: None,
        };
        let v = u_adv_prime(&m, f, &ctx, &s_c, &mut RngStream::new(0, 0)).unwrap().value;
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn odin_reduces_to_max_softmax() {
        let (m, _, ctx, s_c) = setup();
        let split = aux_partitions(5).unwrap().remove(2);
        let cfg = OdinConfig {
            temperature: 1.0,
            epsilon: 0.0,
        };
        let s = odin_score(&m, &ctx, &s_c, &split, &cfg).unwrap();
        let qf = m.encode(&s_c.select(&[2])).unwrap();
        let logits = ctx.logits(&m, &s_c.select(&split.support), &qf).unwrap();
        let p = softmax_rows(&logits, 1.0);
        let max = p.data().iter().copied().fold(0.0f32, f32::max) as f64;
        assert!((s.value - max).abs() < 1e-7);
        assert!(s.value > 1.0 / 3.0 && s.value <= 1.0);
    }
}
