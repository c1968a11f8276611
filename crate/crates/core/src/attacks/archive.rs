//! Batched attack runs and their on-disk archive: one directory per run
//! holding `delta.fstn` and an `attack.toml` manifest.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::FewShotModel;
use crate::numcore::checkpoint::{read_toml, write_toml};
use crate::numcore::{tensor_read_f32, tensor_write, RngStream};

use super::{support_attack, AdvSupportSet, AttackConfig};

const ATTACK_STREAM: u64 = 0xa77a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    target_class: usize,
    base_support: Vec<usize>,
    run_id: String,
    run: usize,
    config: AttackConfig,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub sets: Vec<AdvSupportSet>,
    /// `(class, run, message)` for runs that errored.
    pub failures: Vec<(usize, usize, String)>,
}

pub fn save_adv_set(dir: &Path, set: &AdvSupportSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tensor_write(dir.join("delta.fstn"), &set.delta)?;
    write_toml(
        &dir.join("attack.toml"),
        &Manifest {
            target_class: set.target_class,
            base_support: set.base_support.clone(),
            run_id: set.run_id.clone(),
            run: set.run,
            config: set.config,
        },
    )
}

pub fn load_adv_set(dir: &Path) -> Result<AdvSupportSet> {
    let m: Manifest = read_toml(&dir.join("attack.toml"))?;
    let delta = tensor_read_f32(dir.join("delta.fstn"))?;
    if delta.batch() != m.base_support.len() {
        return Err(Error::shape(&[m.base_support.len()], &[delta.batch()]));
    }
    Ok(AdvSupportSet {
        target_class: m.target_class,
        base_support: m.base_support,
        delta,
        config: m.config,
        run_id: m.run_id,
        run: m.run,
    })
}

/// Every run directory under `root`, in name order.
pub fn load_archive(root: &Path) -> Result<Vec<AdvSupportSet>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("attack.toml").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_adv_set(d)).collect()
}

fn run_dir_name(class: usize, run: usize) -> String {
    format!("c{class:04}_r{run:03}")
}

/// `runs_per_class` independent attacks per class, each with a fresh base
/// support and its own stream keyed by `(cfg.seed, class, run)`. Runs that
/// fail are reported and skipped. If `out` is given every set is persisted.
pub fn attack_batch(
    model: &FewShotModel<f32>,
    ds: &Dataset,
    cfg: &AttackConfig,
    classes: &[usize],
    runs_per_class: usize,
    out: Option<&Path>,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = classes
        .iter()
        .flat_map(|&c| (0..runs_per_class).map(move |r| (c, r)))
        .collect();
    let results: Vec<(usize, usize, Result<AdvSupportSet>)> = jobs
        .par_iter()
        .map(|&(class, run)| {
            let res = (|| {
                let mut rng = RngStream::keyed(cfg.seed, &[ATTACK_STREAM, class as u64, run as u64]);
                let pool = ds.samples_of(class);
                if pool.len() < cfg.n_shot {
                    return Err(Error::Sampling(format!("class {class} has fewer than {} samples", cfg.n_shot)));
                }
                let base: Vec<usize> = rng
                    .child(0xba5e)
                    .choose_distinct(pool.len(), cfg.n_shot)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                let mut set = support_attack(model, ds, class, &base, cfg, &mut rng, &mut |_| {})?;
                set.run = run;
                if let Some(root) = out {
                    save_adv_set(&root.join(run_dir_name(class, run)), &set)?;
                }
                Ok(set)
            })();
            (class, run, res)
        })
        .collect();
    let mut outcome = BatchOutcome {
        sets: Vec::new(),
        failures: Vec::new(),
    };
    for (class, run, res) in results {
        match res {
            Ok(s) => outcome.sets.push(s),
            Err(e) => {
                log::warn!("attack on class {class} run {run} failed: {e}");
                outcome.failures.push((class, run, e.to_string()));
            }
        }
    }
    Ok(outcome)
}
