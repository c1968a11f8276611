//! AUROC, attack success rate and rank correlation.

use serde::{Deserialize, Serialize};

use crate::attacks::AdvSupportSet;
use crate::data::{Dataset, Split};
use crate::detection::Direction;
use crate::error::{Error, Result};
use crate::fewshot::FewShotModel;
use crate::numcore::loss::argmax;
use crate::numcore::{RngStream, Tensor};

fn check_scores(clean: &[f64], adv: &[f64]) -> Result<()> {
    if clean.is_empty() || adv.is_empty() {
        return Err(Error::Input(format!(
            "AUROC needs both score lists non-empty (clean {}, adversarial {})",
            clean.len(),
            adv.len()
        )));
    }
    if clean.iter().chain(adv).any(|v| v.is_nan()) {
        return Err(Error::Input("AUROC scores contain NaN".into()));
    }
    Ok(())
}

fn oriented(v: f64, direction: Direction) -> f64 {
    match direction {
        Direction::FlagIfAbove => v,
        Direction::FlagIfBelow => -v,
    }
}

/// `P(adv more adversarial than clean) + ½·P(tie)` from mid-ranks.
pub fn auroc(clean: &[f64], adv: &[f64], direction: Direction) -> Result<f64> {
    check_scores(clean, adv)?;
    let mut all: Vec<(f64, bool)> = clean
        .iter()
        .map(|&v| (oriented(v, direction), false))
        .chain(adv.iter().map(|&v| (oriented(v, direction), true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut adv_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        adv_rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (na, nc) = (adv.len() as f64, clean.len() as f64);
    Ok((adv_rank_sum - na * (na + 1.0) / 2.0) / (na * nc))
}

/// ROC points `(false positive rate, true positive rate)` from sweeping the
/// threshold over every observed score, flagging scores at or beyond it.
pub fn roc_curve(clean: &[f64], adv: &[f64], direction: Direction) -> Result<Vec<(f64, f64)>> {
    check_scores(clean, adv)?;
    let c: Vec<f64> = clean.iter().map(|&v| oriented(v, direction)).collect();
    let a: Vec<f64> = adv.iter().map(|&v| oriented(v, direction)).collect();
    let mut thresholds: Vec<f64> = c.iter().chain(&a).copied().collect();
    thresholds.sort_by(|x, y| y.total_cmp(x));
    thresholds.dedup();
    let rate = |xs: &[f64], t: f64| xs.iter().filter(|&&v| v >= t).count() as f64 / xs.len() as f64;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(thresholds.iter().map(|&t| (rate(&c, t), rate(&a, t))));
    Ok(pts)
}

/// Trapezoid area under [`roc_curve`].
pub fn auroc_sweep(clean: &[f64], adv: &[f64], direction: Direction) -> Result<f64> {
    let pts = roc_curve(clean, adv, direction)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Spearman rank correlation with mid-ranks for ties; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The perturbed support is reused; other ways and queries are redrawn.
    FixedSupports,
    /// The stored perturbation is added to freshly drawn target supports.
    NewSupports,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::FixedSupports => "fixed_supports",
            Scenario::NewSupports => "new_supports",
        }
    }
}

/// Per-episode attack success rate: the fraction of target-class queries
/// not assigned to the target's way. Returns the mean and standard deviation
/// over `n_episodes` episodes drawn from the target class's split.
pub fn asr(
    model: &FewShotModel<f32>,
    set: &AdvSupportSet,
    ds: &Dataset,
    scenario: Scenario,
    n_episodes: usize,
    n_queries: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let cfg = &set.config;
    let t = set.target_class;
    let split = ds
        .split_of(t)
        .ok_or_else(|| Error::Sampling(format!("class {t} is not assigned to a split")))?;
    let rates = (0..n_episodes)
        .map(|_| asr_episode(model, set, ds, split, scenario, n_queries, cfg.k_way, rng))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_sd(&rates))
}

#[allow(clippy::too_many_arguments)]
fn asr_episode(
    model: &FewShotModel<f32>,
    set: &AdvSupportSet,
    ds: &Dataset,
    split: Split,
    scenario: Scenario,
    n_queries: usize,
    k_way: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let t = set.target_class;
    let n_shot = set.base_support.len();
    let pool = ds.samples_of(t);
    let target_support: Tensor<f32>;
    let used: Vec<usize>;
    match scenario {
        Scenario::FixedSupports => {
            target_support = set.images(ds);
            used = set.base_support.clone();
        }
        Scenario::NewSupports => {
            let fresh: Vec<usize> = rng.choose_distinct(pool.len(), n_shot).into_iter().map(|i| pool[i]).collect();
            let mut x = ds.gather(&fresh);
            x.add_assign(&set.delta);
            x.clamp_unit();
            target_support = x;
            used = fresh;
        }
    }
    let rest: Vec<usize> = pool.iter().copied().filter(|i| !used.contains(i)).collect();
    if rest.len() < n_queries {
        return Err(Error::Sampling(format!(
            "class {t} has {} samples outside the support, {n_queries} queries requested",
            rest.len()
        )));
    }
    let queries: Vec<usize> = rng.choose_distinct(rest.len(), n_queries).into_iter().map(|i| rest[i]).collect();

    let others: Vec<usize> = ds.classes_in(split).into_iter().filter(|&c| c != t).collect();
    if others.len() + 1 < k_way {
        return Err(Error::Sampling(format!("{split} split cannot fill {k_way} ways")));
    }
    let target_way = rng.below(k_way);
    let picks = rng.choose_distinct(others.len(), k_way - 1);
    let mut ids = Vec::new();
    let mut ways = Vec::new();
    for (&p, w) in picks.iter().zip((0..k_way).filter(|&w| w != target_way)) {
        let c_pool = ds.samples_of(others[p]);
        for i in rng.choose_distinct(c_pool.len(), n_shot) {
            ids.push(c_pool[i]);
            ways.push(w);
        }
    }
    let support = Tensor::concat(&[&ds.gather(&ids), &target_support])?;
    ways.extend(std::iter::repeat(target_way).take(n_shot));
    let logits = model.logits(&support, &ways, k_way, &ds.gather(&queries))?;
    let wrong = (0..n_queries).filter(|&q| argmax(logits.item(q)) != target_way).count();
    Ok(wrong as f64 / n_queries as f64)
}
