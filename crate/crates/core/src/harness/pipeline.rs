//! The experiment pipeline: data, few-shot model, autoencoders, attack
//! grid, then detection, ASR and self-similarity. Every training and attack
//! stage persists its artifacts under the output directory together with a
//! key of the configuration that produced them, so a rerun resumes from
//! whatever is already on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{attack_batch, load_archive, AdvSupportSet};
use crate::data::{synth_generate_styled, Dataset, Split};
use crate::detection::{
    aux_split, filter_direction, odin_score, self_similarity, u_adv, u_adv_averaged, u_adv_prime, Context, Direction,
    FilterRef, IsolationForest, Statistic,
};
use crate::error::{Error, Result};
use crate::fewshot::{
    eval_accuracy, load_fewshot, save_fewshot, train_fewshot, EvalConfig, FewShotModel, HeadKind, TrainConfig,
};
use crate::filters::ae::{feature_error, reconstruction_rmse};
use crate::filters::{
    finetune_fpa, finetune_fpa_prime, load_ae, save_ae, train_ae_standard, AeModel, AeStage, AeTrainConfig,
    FilterSpec,
};
use crate::numcore::checkpoint::{read_toml, write_toml};
use crate::numcore::{RngStream, Tensor};

use super::config::{Cell, ExperimentConfig};
use super::metrics::{asr, auroc, mean_sd, Scenario};
use super::report::{report_write, AeSummary, AsrRow, AurocRow, EvalReport, ScoreRow, SelfSimRow, SelfSimSummary, Summary};

const KEY_FILE: &str = "stage.key";
const DATASET_LABEL: &str = "synth";
const NO_FILTER: &str = "none";

mod tag {
    pub const FEWSHOT: u64 = 0xf5;
    pub const AE: u64 = 0xae;
    pub const CLEAN: u64 = 0xc1ea;
    pub const DETECT: u64 = 0xde7;
    pub const FILTER: u64 = 0xf17;
    pub const IFOREST: u64 = 0x1f;
    pub const IFOREST_VAL: u64 = 0x1fa;
    pub const ASR: u64 = 0xa5;
}

fn stage_key<T: Serialize>(parts: &T) -> Result<String> {
    let text = serde_json::to_string(parts).map_err(|e| Error::Config(format!("stage key: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// `true` if `dir` holds finished artifacts for `key`; an error if it holds
/// artifacts of a different configuration.
fn stage_done(dir: &Path, key: &str) -> Result<bool> {
    let path = dir.join(KEY_FILE);
    if !path.is_file() {
        return Ok(false);
    }
    let found = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if found.trim() == key {
        Ok(true)
    } else {
        Err(Error::Config(format!(
            "{} holds artifacts of a different configuration; choose a fresh out_dir",
            dir.display()
        )))
    }
}

fn mark_done(dir: &Path, key: &str) -> Result<()> {
    let path = dir.join(KEY_FILE);
    std::fs::write(&path, format!("{key}\n")).map_err(|e| Error::io(&path, e))
}

fn model_label(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Prototypical => "protonet",
        HeadKind::Relation => "relationnet",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanAccuracy {
    pub mean: f64,
    pub ci95: f64,
}

pub struct TrainedFewShot {
    pub model: FewShotModel<f32>,
    pub accuracy: CleanAccuracy,
    key: String,
}

#[derive(Default)]
pub struct Autoencoders {
    pub standard: Option<AeModel<f32>>,
    pub fpa: Option<AeModel<f32>>,
    pub fpa_prime: Option<AeModel<f32>>,
    pub summary: AeSummary,
}

impl Autoencoders {
    pub fn for_filter(&self, spec: &FilterSpec) -> Option<&AeModel<f32>> {
        match spec.needs_ae()? {
            AeStage::Standard => self.standard.as_ref(),
            AeStage::Fpa => self.fpa.as_ref(),
            AeStage::FpaPrime => self.fpa_prime.as_ref(),
        }
    }
}

pub struct CellSets {
    pub cell: Cell,
    pub sets: Vec<AdvSupportSet>,
    pub failures: Vec<String>,
}

/// Everything measured on one support set.
#[derive(Debug, Clone, Default)]
struct SetScores {
    /// `(filter, statistic, value, direction)`.
    filtered: Vec<(String, Statistic, f64, Direction)>,
    odin: f64,
    /// Isolation-forest score per candidate tree count.
    iforest: Vec<f64>,
    selfsim: f64,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub hash: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        for s in &cfg.detection.statistics {
            if matches!(s, Statistic::Odin | Statistic::Iforest) {
                return Err(Error::Config(format!(
                    "`{}` is a baseline and always computed; list only filter statistics",
                    s.name()
                )));
            }
        }
        let hash = cfg.hash()?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        Ok(Self { cfg, hash })
    }

    fn dir(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.cfg.out_dir.clone(), |p, s| p.join(s))
    }

    fn data_key(&self) -> Result<String> {
        stage_key(&(self.cfg.seed, &self.cfg.data))
    }

    pub fn data(&self) -> Result<Dataset> {
        let dir = self.dir(&["data"]);
        let key = self.data_key()?;
        if stage_done(&dir, &key)? {
            return Dataset::load(&dir);
        }
        let d = &self.cfg.data;
        let mut ds = synth_generate_styled(d.n_classes, d.per_class, self.cfg.seed, &d.style)?;
        ds.split_classes(d.ratios, self.cfg.seed)?;
        ds.save(&dir)?;
        mark_done(&dir, &key)?;
        Ok(ds)
    }

    pub fn fewshot(&self, ds: &Dataset) -> Result<TrainedFewShot> {
        let dir = self.dir(&["fewshot"]);
        let key = stage_key(&(self.data_key()?, &self.cfg.fewshot))?;
        let acc_path = dir.join("accuracy.toml");
        if stage_done(&dir, &key)? {
            return Ok(TrainedFewShot {
                model: load_fewshot(&dir)?,
                accuracy: read_toml(&acc_path)?,
                key,
            });
        }
        let f = &self.cfg.fewshot;
        let seed = self.cfg.seed;
        let mut model = FewShotModel::new(f.head, f.k_way, f.n_shot, &mut RngStream::keyed(seed, &[tag::FEWSHOT, 0]))?;
        let mut tc = TrainConfig {
            episodes: f.episodes,
            k_way: f.k_way,
            n_shot: f.n_shot,
            n_query: f.n_query,
            ..TrainConfig::default()
        };
        tc.optimizer.lr = f.lr;
        let log = train_fewshot(&mut model, ds, &tc, &mut RngStream::keyed(seed, &[tag::FEWSHOT, 1]))?;
        let report = eval_accuracy(
            &model,
            ds,
            Split::Test,
            &EvalConfig {
                episodes: f.eval_episodes,
                k_way: f.k_way,
                n_shot: f.n_shot,
                n_query: f.n_query,
            },
            &mut RngStream::keyed(seed, &[tag::FEWSHOT, 2]),
        )?;
        let accuracy = CleanAccuracy {
            mean: report.mean,
            ci95: report.ci95,
        };
        log::info!("few-shot test accuracy {:.4} ± {:.4}", accuracy.mean, accuracy.ci95);
        save_fewshot(&dir, &model, Some(&log))?;
        write_toml(&acc_path, &accuracy)?;
        mark_done(&dir, &key)?;
        Ok(TrainedFewShot { model, accuracy, key })
    }

    fn ae_configs(&self) -> (AeTrainConfig, AeTrainConfig) {
        let a = &self.cfg.ae;
        let mut base = AeTrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            augment: a.augment,
            corruption: a.corruption,
            ..AeTrainConfig::default()
        };
        base.optimizer.lr = a.lr;
        let mut fine = base.clone();
        fine.epochs = a.finetune_epochs;
        fine.optimizer.lr = a.finetune_lr;
        (base, fine)
    }

    /// Trains (or loads) the autoencoder stages the filter grid needs.
    pub fn autoencoders(&self, ds: &Dataset, fs: &TrainedFewShot) -> Result<Autoencoders> {
        let stages: Vec<AeStage> = self.cfg.detection.filters.iter().filter_map(|f| f.needs_ae()).collect();
        let mut out = Autoencoders::default();
        if stages.is_empty() {
            return Ok(out);
        }
        let key = stage_key(&(&fs.key, &self.cfg.ae))?;
        let (base_cfg, fine_cfg) = self.ae_configs();
        let seed = self.cfg.seed;
        let val = ds.samples_in(Split::Val);

        let std_dir = self.dir(&["ae", "standard"]);
        let standard = if stage_done(&std_dir, &key)? {
            load_ae(&std_dir)?
        } else {
            let (ae, log) = train_ae_standard(ds, &base_cfg, &mut RngStream::keyed(seed, &[tag::AE, 0]))?;
            log::info!("standard autoencoder: best epoch {:?}", log.best_epoch);
            save_ae(&std_dir, &ae)?;
            mark_done(&std_dir, &key)?;
            ae
        };
        out.summary.rmse_standard = Some(reconstruction_rmse(&standard, ds, &val)?);
        out.summary.feature_error_standard = Some(feature_error(&standard, &fs.model, ds, &val)?);

        for (stage, tag_id) in [(AeStage::Fpa, 1), (AeStage::FpaPrime, 2)] {
            if !stages.contains(&stage) {
                continue;
            }
            let name = if stage == AeStage::Fpa { "fpa" } else { "fpa_prime" };
            let dir = self.dir(&["ae", name]);
            let ae = if stage_done(&dir, &key)? {
                load_ae(&dir)?
            } else {
                let mut rng = RngStream::keyed(seed, &[tag::AE, tag_id]);
                let (ae, log) = match stage {
                    AeStage::Fpa => finetune_fpa(&standard, &fs.model, ds, &fine_cfg, &mut rng)?,
                    _ => finetune_fpa_prime(&standard, &fs.model, ds, &fine_cfg, &mut rng)?,
                };
                log::info!("{name} autoencoder: best epoch {:?}", log.best_epoch);
                save_ae(&dir, &ae)?;
                mark_done(&dir, &key)?;
                ae
            };
            let err = Some(feature_error(&ae, &fs.model, ds, &val)?);
            if stage == AeStage::Fpa {
                out.summary.feature_error_fpa = err;
                out.fpa = Some(ae);
            } else {
                out.summary.feature_error_fpa_prime = err;
                out.fpa_prime = Some(ae);
            }
        }
        out.standard = Some(standard);
        Ok(out)
    }

    /// Runs (or loads) every cell of the attack grid on the test classes.
    pub fn attacks(&self, ds: &Dataset, fs: &TrainedFewShot) -> Result<Vec<CellSets>> {
        let classes = ds.classes_in(Split::Test);
        let runs = self.cfg.attacks.runs_per_class;
        let replicate = format!("r{}", self.cfg.replicate);
        let mut out = Vec::new();
        for cell in self.cfg.cells() {
            let dir = self.dir(&["attacks", &replicate, &cell.name]);
            let key = stage_key(&(&fs.key, &cell.attack, runs, &classes))?;
            let mut failures = Vec::new();
            let sets = if stage_done(&dir, &key)? {
                load_archive(&dir)?
            } else {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let outcome = attack_batch(&fs.model, ds, &cell.attack, &classes, runs, Some(&dir))?;
                for (c, r, msg) in &outcome.failures {
                    failures.push(format!("{} class {c} run {r}: {msg}", cell.name));
                }
                if outcome.failures.is_empty() {
                    mark_done(&dir, &key)?;
                }
                outcome.sets
            };
            log::info!("cell {}: {} adversarial sets", cell.name, sets.len());
            out.push(CellSets { cell, sets, failures });
        }
        Ok(out)
    }

    fn clean_support(&self, ds: &Dataset, class: usize, run: usize) -> Result<Tensor<f32>> {
        let pool = ds.samples_of(class);
        let n = self.cfg.fewshot.n_shot;
        if pool.len() < n {
            return Err(Error::Sampling(format!("class {class} has fewer than {n} samples")));
        }
        let mut rng = RngStream::keyed(self.cfg.seed, &[tag::CLEAN, self.cfg.replicate, class as u64, run as u64]);
        let ids: Vec<usize> = rng.choose_distinct(pool.len(), n).into_iter().map(|i| pool[i]).collect();
        Ok(ds.gather(&ids))
    }

    fn iforests(&self, ds: &Dataset, fs: &FewShotModel<f32>) -> Result<Vec<IsolationForest>> {
        let ids = ds.samples_in(Split::Train);
        let feats = fs.encode(&ds.gather(&ids))?;
        let rows = embedding_rows(&feats);
        let m = self.cfg.detection.iforest_m.min(rows.len());
        self.cfg
            .detection
            .iforest_trees
            .iter()
            .map(|&n| {
                let mut rng = RngStream::keyed(self.cfg.seed, &[tag::IFOREST, self.cfg.replicate, n as u64]);
                IsolationForest::fit(&rows, n, m, &mut rng)
            })
            .collect()
    }

    /// Scores one support set of class `class`, run `run`. Clean and
    /// adversarial sets of a pair share the context, split and filter noise.
    fn score_set(
        &self,
        ds: &Dataset,
        fs: &FewShotModel<f32>,
        aes: &Autoencoders,
        forests: &[IsolationForest],
        class: usize,
        run: usize,
        s_c: &Tensor<f32>,
    ) -> Result<SetScores> {
        let seed = self.cfg.seed;
        let rep = self.cfg.replicate;
        let f = &self.cfg.fewshot;
        let mut ctx_rng = RngStream::keyed(seed, &[tag::DETECT, rep, class as u64, run as u64]);
        let ctx = Context::draw(fs, ds, Split::Test, class, f.k_way, f.n_shot, &mut ctx_rng)?;
        let split = aux_split(f.n_shot, &mut ctx_rng)?;
        let mut out = SetScores::default();
        for (fi, spec) in self.cfg.detection.filters.iter().enumerate() {
            let filter = FilterRef {
                spec,
                ae: aes.for_filter(spec),
            };
            for (si, &stat) in self.cfg.detection.statistics.iter().enumerate() {
                let mut rng = RngStream::keyed(seed, &[tag::FILTER, rep, class as u64, run as u64, fi as u64, si as u64]);
                let score = match stat {
                    Statistic::UAdv => u_adv(fs, filter, &ctx, s_c, &split, &mut rng)?,
                    Statistic::UAdvAvg => u_adv_averaged(fs, filter, &ctx, s_c, &mut rng)?,
                    Statistic::UAdvPrime => u_adv_prime(fs, filter, &ctx, s_c, &mut rng)?,
                    Statistic::Odin | Statistic::Iforest => unreachable!("rejected in Pipeline::new"),
                };
                out.filtered
                    .push((spec.name().to_string(), stat, score.value, filter_direction(spec, stat)));
            }
        }
        out.odin = odin_score(fs, &ctx, s_c, &split, &self.cfg.detection.odin)?.value;
        let rows = embedding_rows(&fs.encode(s_c)?);
        out.iforest = forests.iter().map(|forest| forest.score_set(&rows)).collect();
        out.selfsim = self_similarity(fs, &ctx, s_c)?;
        Ok(out)
    }

    /// Detection, ASR and self-similarity over the attack grid.
    pub fn evaluate(
        &self,
        ds: &Dataset,
        fs: &TrainedFewShot,
        aes: &Autoencoders,
        cells: &[CellSets],
    ) -> Result<EvalReport> {
        let model = &fs.model;
        let forests = self.iforests(ds, model)?;
        let mut missing: Vec<String> = cells.iter().flat_map(|c| c.failures.clone()).collect();

        let mut pairs: Vec<(usize, usize)> = cells
            .iter()
            .flat_map(|c| c.sets.iter().map(|s| (s.target_class, s.run)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        let clean: BTreeMap<(usize, usize), SetScores> = pairs
            .par_iter()
            .map(|&(class, run)| {
                let x = self.clean_support(ds, class, run)?;
                Ok(((class, run), self.score_set(ds, model, aes, &forests, class, run, &x)?))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();

        let mut adv: Vec<Vec<SetScores>> = Vec::with_capacity(cells.len());
        let mut asr_sets: Vec<Vec<[f64; 2]>> = Vec::with_capacity(cells.len());
        for c in cells {
            let scored: Vec<(SetScores, [f64; 2])> = c
                .sets
                .par_iter()
                .map(|set| {
                    let x = set.images(ds);
                    let s = self.score_set(ds, model, aes, &forests, set.target_class, set.run, &x)?;
                    let mut rates = [0.0; 2];
                    for (i, sc) in [Scenario::FixedSupports, Scenario::NewSupports].into_iter().enumerate() {
                        let mut rng = RngStream::keyed(
                            self.cfg.seed,
                            &[tag::ASR, self.cfg.replicate, set.target_class as u64, set.run as u64, i as u64],
                        );
                        rates[i] = asr(model, set, ds, sc, self.cfg.eval.asr_episodes, self.cfg.eval.asr_queries, &mut rng)?.0;
                    }
                    Ok((s, rates))
                })
                .collect::<Result<Vec<_>>>()?;
            let (s, r): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
            adv.push(s);
            asr_sets.push(r);
        }

        let trees = self.tune_iforest(cells, &clean, &adv)?;
        let val_pairs = self.iforest_val_pairs(&pairs);

        let s = &self.cfg;
        let label = model_label(s.fewshot.head).to_string();
        let mut report = EvalReport {
            summary: Summary {
                config_hash: self.hash.clone(),
                seed: s.seed,
                replicate: s.replicate,
                seeds: BTreeMap::from([
                    ("master".to_string(), s.seed),
                    ("replicate".to_string(), s.replicate),
                    ("attack".to_string(), s.attack_seed()),
                ]),
                model: label.clone(),
                dataset: DATASET_LABEL.into(),
                clean_accuracy: fs.accuracy.mean,
                clean_accuracy_ci95: fs.accuracy.ci95,
                autoencoder: aes.summary.clone(),
                iforest_trees: s.detection.iforest_trees[trees],
                self_similarity: Vec::new(),
                missing: Vec::new(),
            },
            auroc: Vec::new(),
            asr: Vec::new(),
            scores: Vec::new(),
            selfsim: Vec::new(),
        };

        for (ci, c) in cells.iter().enumerate() {
            let cell = &c.cell;
            if c.sets.is_empty() {
                missing.push(format!("{}: no adversarial sets", cell.name));
                continue;
            }
            let auroc_row = |filter: &str, statistic: &str, value: f64, n_clean: usize, n_adv: usize| AurocRow {
                config_hash: self.hash.clone(),
                seed: s.seed,
                replicate: s.replicate,
                model: label.clone(),
                dataset: DATASET_LABEL.into(),
                attack: cell.attack.method.to_string(),
                strength: cell.strength.clone(),
                n_attacked: cell.attack.n_attacked,
                cell: cell.name.clone(),
                filter: filter.to_string(),
                statistic: statistic.to_string(),
                auroc: value,
                n_clean,
                n_adv,
            };
            let cleans: Vec<&SetScores> = c.sets.iter().map(|set| &clean[&(set.target_class, set.run)]).collect();
            let advs = &adv[ci];

            let n_filtered = advs[0].filtered.len();
            for k in 0..n_filtered {
                let (ref filter, stat, _, dir) = advs[0].filtered[k];
                let cv: Vec<f64> = cleans.iter().map(|x| x.filtered[k].2).collect();
                let av: Vec<f64> = advs.iter().map(|x| x.filtered[k].2).collect();
                let value = auroc(&cv, &av, dir)?;
                report.auroc.push(auroc_row(filter, stat.name(), value, cv.len(), av.len()));
            }
            let cv: Vec<f64> = cleans.iter().map(|x| x.odin).collect();
            let av: Vec<f64> = advs.iter().map(|x| x.odin).collect();
            report
                .auroc
                .push(auroc_row(NO_FILTER, Statistic::Odin.name(), auroc(&cv, &av, Direction::FlagIfBelow)?, cv.len(), av.len()));
            let held_out: Vec<usize> =
                (0..c.sets.len()).filter(|&i| !val_pairs.contains(&(c.sets[i].target_class, c.sets[i].run))).collect();
            if held_out.is_empty() {
                missing.push(format!("{}: no held-out sets for the isolation forest", cell.name));
            } else {
                let cv: Vec<f64> = held_out.iter().map(|&i| cleans[i].iforest[trees]).collect();
                let av: Vec<f64> = held_out.iter().map(|&i| advs[i].iforest[trees]).collect();
                let value = auroc(&cv, &av, Direction::FlagIfAbove)?;
                report
                    .auroc
                    .push(auroc_row(NO_FILTER, Statistic::Iforest.name(), value, cv.len(), av.len()));
            }

            for (si, scenario) in [Scenario::FixedSupports, Scenario::NewSupports].into_iter().enumerate() {
                let per_set: Vec<f64> = asr_sets[ci].iter().map(|r| r[si]).collect();
                let (mean, sd) = mean_sd(&per_set);
                report.asr.push(AsrRow {
                    config_hash: self.hash.clone(),
                    seed: s.seed,
                    replicate: s.replicate,
                    model: label.clone(),
                    dataset: DATASET_LABEL.into(),
                    attack: cell.attack.method.to_string(),
                    strength: cell.strength.clone(),
                    n_attacked: cell.attack.n_attacked,
                    cell: cell.name.clone(),
                    scenario: scenario.name().into(),
                    mean,
                    sd,
                    n_sets: per_set.len(),
                });
            }

            let (mut clean_ss, mut adv_ss) = (Vec::new(), Vec::new());
            for (i, set) in c.sets.iter().enumerate() {
                let set_id = format!("c{:04}_r{:03}", set.target_class, set.run);
                for (is_adv, sc) in [(false, cleans[i]), (true, &advs[i])] {
                    let row = |filter: &str, statistic: &str, value: f64| ScoreRow {
                        cell: cell.name.clone(),
                        set_id: set_id.clone(),
                        class: set.target_class,
                        is_adversarial: is_adv,
                        filter: filter.to_string(),
                        statistic: statistic.to_string(),
                        value,
                    };
                    for (filter, stat, value, _) in &sc.filtered {
                        report.scores.push(row(filter, stat.name(), *value));
                    }
                    report.scores.push(row(NO_FILTER, Statistic::Odin.name(), sc.odin));
                    report.scores.push(row(NO_FILTER, Statistic::Iforest.name(), sc.iforest[trees]));
                    report.selfsim.push(SelfSimRow {
                        cell: cell.name.clone(),
                        set_id: set_id.clone(),
                        class: set.target_class,
                        is_adversarial: is_adv,
                        accuracy: sc.selfsim,
                    });
                    if is_adv {
                        adv_ss.push(sc.selfsim);
                    } else {
                        clean_ss.push(sc.selfsim);
                    }
                }
            }
            report.summary.self_similarity.push(SelfSimSummary {
                cell: cell.name.clone(),
                clean_mean: mean_sd(&clean_ss).0,
                adv_mean: mean_sd(&adv_ss).0,
            });
        }
        report.summary.missing = missing;
        Ok(report)
    }

    /// The `(class, run)` pairs held out for tuning the forest size.
    fn iforest_val_pairs(&self, pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let mut shuffled = pairs.to_vec();
        RngStream::keyed(self.cfg.seed, &[tag::IFOREST_VAL, self.cfg.replicate]).shuffle(&mut shuffled);
        let n = (self.cfg.detection.iforest_val_fraction * pairs.len() as f64).ceil() as usize;
        shuffled.truncate(n);
        shuffled
    }

    /// Index of the candidate tree count with the best mean AUROC over the
    /// cells on the validation pairs; the first candidate wins ties.
    fn tune_iforest(
        &self,
        cells: &[CellSets],
        clean: &BTreeMap<(usize, usize), SetScores>,
        adv: &[Vec<SetScores>],
    ) -> Result<usize> {
        let pairs: Vec<(usize, usize)> = clean.keys().copied().collect();
        let val = self.iforest_val_pairs(&pairs);
        let n_cand = self.cfg.detection.iforest_trees.len();
        let mut best = (0, f64::NEG_INFINITY);
        for t in 0..n_cand {
            let mut total = 0.0;
            let mut n = 0;
            for (ci, c) in cells.iter().enumerate() {
                let idx: Vec<usize> = (0..c.sets.len())
                    .filter(|&i| val.contains(&(c.sets[i].target_class, c.sets[i].run)))
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let cv: Vec<f64> = idx
                    .iter()
                    .map(|&i| clean[&(c.sets[i].target_class, c.sets[i].run)].iforest[t])
                    .collect();
                let av: Vec<f64> = idx.iter().map(|&i| adv[ci][i].iforest[t]).collect();
                total += auroc(&cv, &av, Direction::FlagIfAbove)?;
                n += 1;
            }
            let score = if n == 0 { 0.0 } else { total / n as f64 };
            if score > best.1 {
                best = (t, score);
            }
        }
        Ok(best.0)
    }

    /// All stages, then the report files and the effective configuration.
    pub fn run(&self) -> Result<EvalReport> {
        let ds = self.data()?;
        let fs = self.fewshot(&ds)?;
        let aes = self.autoencoders(&ds, &fs)?;
        let cells = self.attacks(&ds, &fs)?;
        let report = self.evaluate(&ds, &fs, &aes, &cells)?;
        let dir = self.report_dir();
        report_write(&report, &dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }

    /// Report files go under `report/r{replicate}`.
    pub fn report_dir(&self) -> PathBuf {
        self.dir(&["report", &format!("r{}", self.cfg.replicate)])
    }
}

fn embedding_rows(feats: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..feats.batch())
        .map(|i| feats.item(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Runs the whole pipeline for `cfg`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<EvalReport> {
    Pipeline::new(cfg)?.run()
}
