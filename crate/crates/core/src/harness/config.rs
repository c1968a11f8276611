//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackMethod};
use crate::data::SynthStyle;
use crate::detection::{OdinConfig, Statistic};
use crate::error::{Error, Result};
use crate::fewshot::HeadKind;
use crate::filters::FilterSpec;
use crate::numcore::RngStream;

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "FSSENTRY_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data, training, attacks and detection.
    pub seed: u64,
    /// Replicate index mixed into the attack, detection and ASR streams only,
    /// so replicates share the trained models.
    pub replicate: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub fewshot: FewShotConfig,
    pub ae: AeConfig,
    pub attacks: AttackGrid,
    pub detection: DetectionConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub per_class: usize,
    /// Train / val / test class fractions.
    pub ratios: [f64; 3],
    pub style: SynthStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub head: HeadKind,
    pub k_way: usize,
    pub n_shot: usize,
    pub episodes: usize,
    pub n_query: usize,
    pub lr: f64,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Random rotations, reflections and channel permutations of training batches.
    pub augment: bool,
    /// Uniform per-channel and per-pixel input corruption; reconstruction
    /// targets stay clean.
    pub corruption: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackGrid {
    /// PGD ℓ∞ budgets, weakest first.
    pub pgd_eps: Vec<f64>,
    pub pgd_eta: f64,
    pub pgd_iterations: usize,
    /// CW-SGD `(κ, η)` pairs, weakest first.
    pub cw: Vec<[f64; 2]>,
    pub cw_iterations: usize,
    pub cw_const: f64,
    pub n_attacked: usize,
    pub n_qt: usize,
    /// Attacked sets per test class in every cell.
    pub runs_per_class: usize,
    /// Adds a strongest-PGD cell with this many attacked samples.
    pub ablation_n_attacked: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub filters: Vec<FilterSpec>,
    /// Filter-based statistics computed for every filter.
    pub statistics: Vec<Statistic>,
    pub odin: OdinConfig,
    pub iforest_m: usize,
    /// Candidate tree counts; the best on the validation sets is kept.
    pub iforest_trees: Vec<usize>,
    /// Fraction of set pairs per cell held out for tuning the forest.
    pub iforest_val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// ASR episodes per adversarial set and scenario.
    pub asr_episodes: usize,
    /// Target-class queries per ASR episode.
    pub asr_queries: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            replicate: 0,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            fewshot: FewShotConfig::default(),
            ae: AeConfig::default(),
            attacks: AttackGrid::default(),
            detection: DetectionConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 32,
            per_class: 60,
            ratios: [20.0 / 32.0, 6.0 / 32.0, 6.0 / 32.0],
            style: SynthStyle::default(),
        }
    }
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Prototypical,
            k_way: 5,
            n_shot: 5,
            episodes: 1000,
            n_query: 25,
            lr: 1e-3,
            eval_episodes: 500,
        }
    }
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            finetune_epochs: 10,
            finetune_lr: 5e-4,
            augment: true,
            corruption: 0.0,
        }
    }
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            pgd_eps: vec![3.0 / 255.0, 6.0 / 255.0, 12.0 / 255.0],
            pgd_eta: 0.05,
            pgd_iterations: 75,
            cw: vec![[0.0, 25.0], [0.0, 50.0], [0.1, 50.0]],
            cw_iterations: 150,
            cw_const: 1.0,
            n_attacked: 5,
            n_qt: 8,
            runs_per_class: 5,
            ablation_n_attacked: Some(1),
        }
    }
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            filters: vec![
                FilterSpec::Noise,
                FilterSpec::Feats,
                FilterSpec::Bitr { r: 6 },
                FilterSpec::tvm_default(),
                FilterSpec::Fpa,
                FilterSpec::FpaPrime,
            ],
            statistics: vec![Statistic::UAdv, Statistic::UAdvPrime],
            odin: OdinConfig::default(),
            iforest_m: 256,
            iforest_trees: vec![25, 50, 100, 200],
            iforest_val_fraction: 0.1,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            asr_episodes: 20,
            asr_queries: 10,
        }
    }
}

/// One attack setting of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Directory-safe identifier, e.g. `pgd-eps12` or `cw_sgd-k0.1-e50`.
    pub name: String,
    /// Human-readable strength, e.g. `12/255` or `k=0.1 eta=50`.
    pub strength: String,
    /// Position in the strength ordering of its method, weakest first.
    pub strength_rank: usize,
    pub attack: AttackConfig,
}

/// `eps·255` without trailing zeros.
fn eps_label(eps: f64) -> String {
    let v = eps * 255.0;
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialisation: {e}")))
    }

    /// Applies `FSSENTRY_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form with `out_dir` blanked, so the
    /// same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attacks;
        if self.seed > i64::MAX as u64 || self.replicate > i64::MAX as u64 {
            return Err(Error::Config(format!("seed and replicate must not exceed {}", i64::MAX)));
        }
        if a.pgd_eps.is_empty() && a.cw.is_empty() {
            return Err(Error::Config("attack grid is empty".into()));
        }
        if self.detection.filters.is_empty() {
            return Err(Error::Config("filter grid is empty".into()));
        }
        if a.runs_per_class == 0 {
            return Err(Error::Config("runs_per_class must be positive".into()));
        }
        if self.fewshot.n_shot < 2 {
            return Err(Error::Config("detection needs n_shot >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.detection.iforest_val_fraction) {
            return Err(Error::Config("iforest_val_fraction must lie in [0, 1)".into()));
        }
        if self.detection.iforest_trees.is_empty() {
            return Err(Error::Config("iforest_trees must list at least one candidate".into()));
        }
        for cell in self.cells() {
            cell.attack.validate()?;
        }
        Ok(())
    }

    /// Seed of every attack cell; shared so that run `r` of class `c`
    /// perturbs the same base support in every cell. Kept to 63 bits so it
    /// fits a TOML integer.
    pub fn attack_seed(&self) -> u64 {
        RngStream::keyed(self.seed, &[0xa7, self.replicate]).next_u64() >> 1
    }

    fn attack_base(&self, method: AttackMethod) -> AttackConfig {
        let a = &self.attacks;
        let mut cfg = match method {
            AttackMethod::Pgd => AttackConfig::pgd(a.pgd_eps.last().copied().unwrap_or(12.0 / 255.0)),
            AttackMethod::CwSgd => AttackConfig::cw_sgd(0.0, 50.0),
        };
        cfg.n_attacked = a.n_attacked;
        cfg.k_way = self.fewshot.k_way;
        cfg.n_shot = self.fewshot.n_shot;
        cfg.n_qt = a.n_qt;
        cfg.seed = self.attack_seed();
        cfg
    }

    /// The attack grid in report order: PGD strengths, CW-SGD strengths,
    /// then the single-sample ablation cell.
    pub fn cells(&self) -> Vec<Cell> {
        let a = &self.attacks;
        let mut out = Vec::new();
        for (rank, &eps) in a.pgd_eps.iter().enumerate() {
            let mut c = self.attack_base(AttackMethod::Pgd);
            c.eps = eps;
            c.eta = a.pgd_eta;
            c.iterations = a.pgd_iterations;
            out.push(Cell {
                name: format!("pgd-eps{}", eps_label(eps)),
                strength: format!("{}/255", eps_label(eps)),
                strength_rank: rank,
                attack: c,
            });
        }
        for (rank, &[kappa, eta]) in a.cw.iter().enumerate() {
            let mut c = self.attack_base(AttackMethod::CwSgd);
            c.kappa = kappa;
            c.eta = eta;
            c.iterations = a.cw_iterations;
            c.cw_const = a.cw_const;
            out.push(Cell {
                name: format!("cw_sgd-k{kappa}-e{eta}"),
                strength: format!("k={kappa} eta={eta}"),
                strength_rank: rank,
                attack: c,
            });
        }
        if let (Some(n), Some(&eps)) = (a.ablation_n_attacked, a.pgd_eps.last()) {
            let mut c = self.attack_base(AttackMethod::Pgd);
            c.eps = eps;
            c.eta = a.pgd_eta;
            c.iterations = a.pgd_iterations;
            c.n_attacked = n;
            out.push(Cell {
                name: format!("pgd-eps{}-n{n}", eps_label(eps)),
                strength: format!("{}/255", eps_label(eps)),
                strength_rank: a.pgd_eps.len() - 1,
                attack: c,
            });
        }
        out
    }
}

/// Parses `12/255`, `0.047` or `1e-2` into a real number.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("`{s}` is not a number or fraction"));
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0.0 {
                return Err(bad());
            }
            n / d
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if !v.is_finite() {
        return Err(bad());
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn attack_seeds_fit_in_toml() {
        for replicate in 0..64 {
            let cfg = ExperimentConfig {
                replicate,
                ..ExperimentConfig::default()
            };
            for cell in cfg.cells() {
                assert!(toml::to_string(&cell.attack).is_ok(), "replicate {replicate}");
            }
        }
        let cfg = ExperimentConfig {
            seed: u64::MAX,
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grid_has_seven_cells() {
        let cells = ExperimentConfig::default().cells();
        let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "pgd-eps3",
                "pgd-eps6",
                "pgd-eps12",
                "cw_sgd-k0-e25",
                "cw_sgd-k0-e50",
                "cw_sgd-k0.1-e50",
                "pgd-eps12-n1"
            ]
        );
        assert_eq!(cells[6].attack.n_attacked, 1);
        assert!(cells.iter().all(|c| c.attack.seed == cells[0].attack.seed));
    }

    #[test]
    fn hash_ignores_out_dir_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn fractions() {
        assert!((parse_fraction("12/255").unwrap() - 12.0 / 255.0).abs() < 1e-15);
        assert_eq!(parse_fraction("0.5").unwrap(), 0.5);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("abc").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 3").is_err());
        let c: ExperimentConfig = toml::from_str("seed = 3\n[attacks]\nruns_per_class = 2").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.attacks.runs_per_class, 2);
        assert_eq!(c.attacks.pgd_iterations, 75);
    }
}
