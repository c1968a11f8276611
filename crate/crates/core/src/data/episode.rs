//! Episode sampling, including attack-time redraws of the non-target ways.

use crate::error::{Error, Result};
use crate::numcore::RngStream;

use super::dataset::{Dataset, Split};

/// One K-way N-shot task. Sample ids index into the [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way_classes: Vec<usize>,
    /// Way-major: ids of way `w` are `support[w*n_shot..(w+1)*n_shot]`.
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Way index of each query.
    pub query_labels: Vec<usize>,
    pub n_shot: usize,
}

impl Episode {
    pub fn k_way(&self) -> usize {
        self.way_classes.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.k_way()).flat_map(|w| std::iter::repeat(w).take(self.n_shot)).collect()
    }
}

fn per_way_counts(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|w| total / k + usize::from(w < total % k)).collect()
}

/// Samples an episode from `split`: classes uniformly without replacement,
/// then support and query samples without replacement inside each class.
/// `n_query` queries in total are spread as evenly as possible over the ways.
pub fn sample_episode(
    ds: &Dataset,
    split: Split,
    k_way: usize,
    n_shot: usize,
    n_query: usize,
    rng: &mut RngStream,
) -> Result<Episode> {
    let classes = ds.classes_in(split);
    if classes.len() < k_way {
        return Err(Error::Sampling(format!(
            "{split} split has {} classes, episode needs {k_way}",
            classes.len()
        )));
    }
    let picks = rng.choose_distinct(classes.len(), k_way);
    let way_classes: Vec<usize> = picks.iter().map(|&i| classes[i]).collect();
    let q_counts = per_way_counts(n_query, k_way);
    let mut support = Vec::with_capacity(k_way * n_shot);
    let mut query = Vec::with_capacity(n_query);
    let mut query_labels = Vec::with_capacity(n_query);
    for (w, &c) in way_classes.iter().enumerate() {
        let pool = ds.samples_of(c);
        let need = n_shot + q_counts[w];
        if pool.len() < need {
            return Err(Error::Sampling(format!(
                "class {c} has {} samples, episode needs {need}",
                pool.len()
            )));
        }
        let idx = rng.choose_distinct(pool.len(), need);
        support.extend(idx[..n_shot].iter().map(|&i| pool[i]));
        for &i in &idx[n_shot..] {
            query.push(pool[i]);
            query_labels.push(w);
        }
    }
    Ok(Episode {
        way_classes,
        support,
        query,
        query_labels,
        n_shot,
    })
}

/// The attacker's view of one optimisation step: the target class's support
/// is fixed, everything else is redrawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackEpisode {
    pub target_class: usize,
    /// Position of the target class among the K ways.
    pub target_way: usize,
    /// The K−1 other classes, in way order with the target slot removed.
    pub other_classes: Vec<usize>,
    /// Way-major supports of the other classes, `n_shot` each.
    pub other_support: Vec<usize>,
    pub other_query: Vec<usize>,
    pub other_query_labels: Vec<usize>,
    /// Queries of the target class, disjoint from the fixed support.
    pub target_query: Vec<usize>,
}

impl AttackEpisode {
    /// Way indices of the other classes, skipping the target slot.
    pub fn other_ways(&self) -> Vec<usize> {
        (0..=self.other_classes.len()).filter(|&w| w != self.target_way).collect()
    }
}

/// Draws `C⁻ᵗ` uniformly from `split ∖ {t}`, fresh supports and queries for
/// those classes, and `n_qt` queries of class `t` avoiding `fixed_support`.
#[allow(clippy::too_many_arguments)]
pub fn sample_attack_episode(
    ds: &Dataset,
    split: Split,
    target: usize,
    fixed_support: &[usize],
    k_way: usize,
    n_shot: usize,
    n_qt: usize,
    n_q_other: usize,
    rng: &mut RngStream,
) -> Result<AttackEpisode> {
    if ds.split_of(target) != Some(split) {
        return Err(Error::Sampling(format!("class {target} is not in the {split} split")));
    }
    if fixed_support.iter().any(|&s| ds.label(s) != target) {
        return Err(Error::Sampling(format!("fixed support contains samples outside class {target}")));
    }
    let others: Vec<usize> = ds.classes_in(split).into_iter().filter(|&c| c != target).collect();
    if others.len() < k_way - 1 {
        return Err(Error::Sampling(format!(
            "{split} split has {} non-target classes, need {}",
            others.len(),
            k_way - 1
        )));
    }
    let picks = rng.choose_distinct(others.len(), k_way - 1);
    let other_classes: Vec<usize> = picks.iter().map(|&i| others[i]).collect();
    let target_way = rng.below(k_way);

    let mut other_support = Vec::with_capacity((k_way - 1) * n_shot);
    let mut other_query = Vec::new();
    let mut other_query_labels = Vec::new();
    let q_counts = per_way_counts(n_q_other, k_way - 1);
    let ways: Vec<usize> = (0..k_way).filter(|&w| w != target_way).collect();
    for (j, &c) in other_classes.iter().enumerate() {
        let pool = ds.samples_of(c);
        let need = n_shot + q_counts[j];
        if pool.len() < need {
            return Err(Error::Sampling(format!("class {c} has too few samples")));
        }
        let idx = rng.choose_distinct(pool.len(), need);
        other_support.extend(idx[..n_shot].iter().map(|&i| pool[i]));
        for &i in &idx[n_shot..] {
            other_query.push(pool[i]);
            other_query_labels.push(ways[j]);
        }
    }

    let avail: Vec<usize> = ds
        .samples_of(target)
        .iter()
        .copied()
        .filter(|s| !fixed_support.contains(s))
        .collect();
    if avail.len() < n_qt {
        return Err(Error::Sampling(format!(
            "class {target} has {} non-support samples, need {n_qt} queries",
            avail.len()
        )));
    }
    let target_query = rng.choose_distinct(avail.len(), n_qt).into_iter().map(|i| avail[i]).collect();
    Ok(AttackEpisode {
        target_class: target,
        target_way,
        other_classes,
        other_support,
        other_query,
        other_query_labels,
        target_query,
    })
}
