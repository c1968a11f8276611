//! Support-set poisoning detectors: the self-similarity scores under a
//! filter, and the ODIN and Isolation Forest baselines.

pub mod iforest;
pub mod scores;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::FilterSpec;
use crate::numcore::RngStream;

pub use iforest::{average_path_length, IsolationForest};
pub use scores::{odin_score, self_similarity, u_adv, u_adv_averaged, u_adv_prime, Context, FilterRef, OdinConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FlagIfAbove,
    FlagIfBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    UAdv,
    UAdvAvg,
    UAdvPrime,
    Odin,
    Iforest,
}

impl Statistic {
    pub fn name(&self) -> &'static str {
        match self {
            Statistic::UAdv => "u_adv",
            Statistic::UAdvAvg => "u_adv_avg",
            Statistic::UAdvPrime => "u_adv_prime",
            Statistic::Odin => "odin",
            Statistic::Iforest => "iforest",
        }
    }
}

impl std::str::FromStr for Statistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Statistic::UAdv, Statistic::UAdvAvg, Statistic::UAdvPrime, Statistic::Odin, Statistic::Iforest]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown statistic `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub statistic: Statistic,
    pub value: f64,
    pub direction: Direction,
}

/// Direction of the filter-based statistics. Bit reduction is flagged when
/// the logit change is small rather than large.
pub fn filter_direction(spec: &FilterSpec, statistic: Statistic) -> Direction {
    match (spec, statistic) {
        (FilterSpec::Bitr { .. }, Statistic::UAdv | Statistic::UAdvAvg) => Direction::FlagIfBelow,
        (_, Statistic::Odin) => Direction::FlagIfBelow,
        _ => Direction::FlagIfAbove,
    }
}

pub fn verdict(score: &DetectionScore, threshold: f64) -> bool {
    match score.direction {
        Direction::FlagIfAbove => score.value > threshold,
        Direction::FlagIfBelow => score.value < threshold,
    }
}

/// Positions of an `n_shot` support split into auxiliary support and query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxSplit {
    pub support: Vec<usize>,
    pub query: usize,
}

/// One random auxiliary split.
pub fn aux_split(n_shot: usize, rng: &mut RngStream) -> Result<AuxSplit> {
    if n_shot < 2 {
        return Err(Error::Config(format!("auxiliary splits need n_shot >= 2 (got {n_shot})")));
    }
    let q = rng.below(n_shot);
    Ok(leave_out(n_shot, q))
}

/// All `n_shot` leave-one-out splits; split `i` uses sample `i` as query.
pub fn aux_partitions(n_shot: usize) -> Result<Vec<AuxSplit>> {
    if n_shot < 2 {
        return Err(Error::Config(format!("auxiliary splits need n_shot >= 2 (got {n_shot})")));
    }
    Ok((0..n_shot).map(|q| leave_out(n_shot, q)).collect())
}

fn leave_out(n: usize, q: usize) -> AuxSplit {
    AuxSplit {
        support: (0..n).filter(|&i| i != q).collect(),
        query: q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_directions() {
        let mut s = DetectionScore {
            statistic: Statistic::UAdv,
            value: 0.7,
            direction: Direction::FlagIfAbove,
        };
        assert!(verdict(&s, 0.5));
        s.direction = Direction::FlagIfBelow;
        assert!(!verdict(&s, 0.5));
    }

    #[test]
    fn splits_cover_and_are_disjoint() {
        let s = aux_split(5, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(s.support.len(), 4);
        assert!(!s.support.contains(&s.query));
        let parts = aux_partitions(5).unwrap();
        assert_eq!(parts.len(), 5);
        let mut queries: Vec<usize> = parts.iter().map(|p| p.query).collect();
        queries.sort_unstable();
        assert_eq!(queries, vec![0, 1, 2, 3, 4]);
        for p in &parts {
            let mut all = p.support.clone();
            all.push(p.query);
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3, 4]);
        }
        assert!(aux_split(1, &mut RngStream::new(1, 1)).is_err());
        assert!(aux_partitions(1).is_err());
    }

    #[test]
    fn only_bitr_is_flipped() {
        assert_eq!(filter_direction(&FilterSpec::Bitr { r: 6 }, Statistic::UAdv), Direction::FlagIfBelow);
        for f in [FilterSpec::Noise, FilterSpec::Feats, FilterSpec::tvm_default(), FilterSpec::Fpa] {
            assert_eq!(filter_direction(&f, Statistic::UAdv), Direction::FlagIfAbove);
        }
    }
}
