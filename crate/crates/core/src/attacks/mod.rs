//! Support-set poisoning: PGD and CW-SGD perturb the target class's support
//! while every other class and the target queries are redrawn per iteration.

pub mod archive;

use serde::{Deserialize, Serialize};

use crate::data::{sample_attack_episode, AttackEpisode, Dataset};
use crate::error::{Error, Result};
use crate::fewshot::{FewShotModel, Role, Want};
use crate::numcore::loss::softmax_cross_entropy;
use crate::numcore::{Real, RngStream, Tensor};

pub use archive::{attack_batch, load_archive, save_adv_set, BatchOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Pgd,
    CwSgd,
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMethod::Pgd => "pgd",
            AttackMethod::CwSgd => "cw_sgd",
        })
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(AttackMethod::Pgd),
            "cw_sgd" | "cw-sgd" | "cw" => Ok(AttackMethod::CwSgd),
            _ => Err(Error::Config(format!("unknown attack method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// ℓ∞ budget for PGD; half-width of the initial noise for both methods.
    pub eps: f64,
    pub eta: f64,
    pub iterations: usize,
    pub kappa: f64,
    pub cw_const: f64,
    pub n_attacked: usize,
    pub k_way: usize,
    pub n_shot: usize,
    pub n_qt: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn pgd(eps: f64) -> Self {
        Self {
            method: AttackMethod::Pgd,
            eps,
            eta: 0.05,
            iterations: 75,
            kappa: 0.0,
            cw_const: 1.0,
            n_attacked: 5,
            k_way: 5,
            n_shot: 5,
            n_qt: 8,
            seed: 0,
        }
    }

    pub fn cw_sgd(kappa: f64, eta: f64) -> Self {
        Self {
            method: AttackMethod::CwSgd,
            eps: 12.0 / 255.0,
            eta,
            iterations: 150,
            kappa,
            ..Self::pgd(12.0 / 255.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == AttackMethod::Pgd && !(self.eps > 0.0) {
            return Err(Error::Config("pgd needs eps > 0".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config("kappa must be >= 0".into()));
        }
        if self.n_attacked == 0 || self.n_attacked > self.n_shot {
            return Err(Error::Config(format!(
                "n_attacked must be in 1..={} (got {})",
                self.n_shot, self.n_attacked
            )));
        }
        if self.k_way < 2 || self.n_qt == 0 {
            return Err(Error::Config("attacks need k_way >= 2 and n_qt >= 1".into()));
        }
        Ok(())
    }
}

/// One poisoned support set. `delta` covers all `n_shot` slots; slots past
/// `n_attacked` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvSupportSet {
    pub target_class: usize,
    pub base_support: Vec<usize>,
    pub delta: Tensor<f32>,
    pub config: AttackConfig,
    pub run_id: String,
    /// Run index within its batch; 0 for a single attack.
    pub run: usize,
}

impl AdvSupportSet {
    /// `x + δ`, clamped to [0,1] against rounding.
    pub fn images(&self, ds: &Dataset) -> Tensor<f32> {
        let mut x = ds.gather(&self.base_support);
        x.add_assign(&self.delta);
        x.clamp_unit();
        x
    }

    pub fn attacked_slots(&self) -> Vec<usize> {
        (0..self.delta.batch())
            .filter(|&i| self.delta.item(i).iter().any(|&v| v != 0.0))
            .collect()
    }
}

/// Per-iteration view handed to attack observers.
pub struct IterationRecord<'a> {
    pub iteration: usize,
    /// Current attacked-slot images (after the step's projection, if any).
    pub x_adv: &'a Tensor<f32>,
    pub clean: &'a Tensor<f32>,
    pub loss: f64,
    /// CW only: smallest per-query `max(−κ, margin)` term of this iteration.
    pub min_margin_term: Option<f64>,
}

pub type Observer<'o> = &'o mut dyn FnMut(&IterationRecord<'_>);

pub fn pgd_support_attack(
    model: &FewShotModel<f32>,
    ds: &Dataset,
    target: usize,
    base_support: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<AdvSupportSet> {
    support_attack(model, ds, target, base_support, cfg, rng, &mut |_| {})
}

pub fn cw_sgd_support_attack(
    model: &FewShotModel<f32>,
    ds: &Dataset,
    target: usize,
    base_support: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<AdvSupportSet> {
    support_attack(model, ds, target, base_support, cfg, rng, &mut |_| {})
}

/// Runs `cfg.method`, reporting every iterate to `observer`.
pub fn support_attack(
    model: &FewShotModel<f32>,
    ds: &Dataset,
    target: usize,
    base_support: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
    observer: Observer<'_>,
) -> Result<AdvSupportSet> {
    cfg.validate()?;
    if base_support.len() != cfg.n_shot {
        return Err(Error::Input(format!(
            "base support has {} samples, config says n_shot = {}",
            base_support.len(),
            cfg.n_shot
        )));
    }
    let split = ds
        .split_of(target)
        .ok_or_else(|| Error::Input(format!("class {target} belongs to no split")))?;
    let attacked: Vec<usize> = base_support[..cfg.n_attacked].to_vec();
    let clean = ds.gather(&attacked);
    let rest = &base_support[cfg.n_attacked..];
    let rest_feats = if rest.is_empty() {
        Tensor::zeros(&[0, model.encoder.output_shape().iter().product()])
    } else {
        model.encode(&ds.gather(rest))?
    };

    let eps = cfg.eps as f32;
    let mut init_rng = rng.child(0x1417);
    let mut x = clean.clone();
    for v in x.data_mut() {
        *v += init_rng.uniform(-cfg.eps, cfg.eps) as f32;
    }
    x.clamp_unit();

    let mut episode_rng = rng.child(0xe915);
    for it in 0..cfg.iterations {
        let ep = sample_attack_episode(ds, split, target, base_support, cfg.k_way, cfg.n_shot, cfg.n_qt, 0, &mut episode_rng)?;
        let (fixed, fixed_roles) = fixed_context(model, ds, &ep, &rest_feats, cfg.n_shot)?;
        let roles = vec![Role::Support(ep.target_way); attacked.len()];
        match cfg.method {
            AttackMethod::Pgd => {
                let g = model.episode_grads(
                    Some((&x, &roles)),
                    Some((&fixed, &fixed_roles)),
                    cfg.k_way,
                    &softmax_cross_entropy,
                    Want {
                        params: false,
                        input: true,
                    },
                )?;
                let grad = g.input.expect("requested");
                if !grad.all_finite() {
                    return Err(Error::numeric(&format!("pgd gradient at iteration {it}")));
                }
                let step = cfg.eta as f32;
                for ((xv, &cv), &gv) in x.data_mut().iter_mut().zip(clean.data()).zip(grad.data()) {
                    let moved = *xv + step * sign(gv);
                    *xv = moved.clamp(cv - eps, cv + eps).clamp(0.0, 1.0);
                }
                observer(&IterationRecord {
                    iteration: it,
                    x_adv: &x,
                    clean: &clean,
                    loss: g.loss as f64,
                    min_margin_term: None,
                });
            }
            AttackMethod::CwSgd => {
                let target_way = ep.target_way;
                let kappa = cfg.kappa as f32;
                let margin_obj = |logits: &Tensor<f32>, _: &[usize]| cw_margin(logits, target_way, kappa);
                let g = model.episode_grads(
                    Some((&x, &roles)),
                    Some((&fixed, &fixed_roles)),
                    cfg.k_way,
                    &margin_obj,
                    Want {
                        params: false,
                        input: true,
                    },
                )?;
                let margin_grad = g.input.expect("requested");
                if !margin_grad.all_finite() {
                    return Err(Error::numeric(&format!("cw gradient at iteration {it}")));
                }
                let terms = cw_margin_terms(&g.logits, target_way, kappa);
                let min_term = terms.iter().copied().fold(f32::INFINITY, f32::min);
                let norm = delta_norm(&x, &clean);
                let c = cfg.cw_const as f32;
                // Steps are taken on the per-element (mean-reduced) objective.
                let step = (cfg.eta / x.len() as f64) as f32;
                let inv_norm = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                for ((xv, &cv), &gm) in x.data_mut().iter_mut().zip(clean.data()).zip(margin_grad.data()) {
                    let d = *xv - cv;
                    *xv -= step * (d * inv_norm + c * gm);
                }
                observer(&IterationRecord {
                    iteration: it,
                    x_adv: &x,
                    clean: &clean,
                    loss: (norm + c * g.loss) as f64,
                    min_margin_term: Some(min_term as f64),
                });
            }
        }
    }
    x.clamp_unit();

    let mut delta = Tensor::zeros(&[cfg.n_shot, clean.item_shape()[0], clean.item_shape()[1], clean.item_shape()[2]]);
    for i in 0..attacked.len() {
        for ((d, &a), &c) in delta.item_mut(i).iter_mut().zip(x.item(i)).zip(clean.item(i)) {
            *d = a - c;
        }
    }
    Ok(AdvSupportSet {
        target_class: target,
        base_support: base_support.to_vec(),
        delta,
        config: *cfg,
        run_id: format!("{}-c{target}-{:016x}", cfg.method, rng.stream_id()),
        run: 0,
    })
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn delta_norm(x: &Tensor<f32>, clean: &Tensor<f32>) -> f32 {
    x.data()
        .iter()
        .zip(clean.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f32>()
        .sqrt()
}

/// Features and roles of everything except the attacked slots: the other
/// ways' supports, the unattacked target slots and the target queries.
fn fixed_context(
    model: &FewShotModel<f32>,
    ds: &Dataset,
    ep: &AttackEpisode,
    rest_feats: &Tensor<f32>,
    n_shot: usize,
) -> Result<(Tensor<f32>, Vec<Role>)> {
    let ids: Vec<usize> = ep.other_support.iter().chain(&ep.target_query).copied().collect();
    let feats = model.encode(&ds.gather(&ids))?;
    let ways = ep.other_ways();
    let mut roles: Vec<Role> = ways
        .iter()
        .flat_map(|&w| std::iter::repeat(Role::Support(w)).take(n_shot))
        .collect();
    roles.extend(std::iter::repeat(Role::Query(ep.target_way)).take(ep.target_query.len()));
    roles.extend(std::iter::repeat(Role::Support(ep.target_way)).take(rest_feats.batch()));
    let all = if rest_feats.batch() > 0 {
        Tensor::concat(&[&feats, rest_feats])?
    } else {
        feats
    };
    Ok((all, roles))
}

/// Per-query `max(−κ, h_t − max_{i≠t} h_i)`.
pub fn cw_margin_terms<F: Real>(logits: &Tensor<F>, target_way: usize, kappa: F) -> Vec<F> {
    (0..logits.batch())
        .map(|q| {
            let row = logits.item(q);
            let other = runner_up(row, target_way);
            (row[target_way] - row[other]).max(-kappa)
        })
        .collect()
}

fn runner_up<F: Real>(row: &[F], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != skip && (best == usize::MAX || v > row[best]) {
            best = i;
        }
    }
    best
}

/// Mean margin term over queries and its gradient wrt the logits.
pub fn cw_margin<F: Real>(logits: &Tensor<F>, target_way: usize, kappa: F) -> Result<(F, Tensor<F>)> {
    let q = logits.batch();
    if q == 0 {
        return Err(Error::Input("cw margin needs at least one query".into()));
    }
    let inv = F::one() / F::lit(q as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = F::zero();
    for qi in 0..q {
        let row = logits.item(qi);
        let other = runner_up(row, target_way);
        let m = row[target_way] - row[other];
        if m > -kappa {
            total += m;
            let g = grad.item_mut(qi);
            g[target_way] = inv;
            g[other] = -inv;
        } else {
            total += -kappa;
        }
    }
    Ok((total * inv, grad))
}
