//! Few-shot model checkpoints: `model.toml` plus parameter tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::checkpoint::{load_network, read_toml, save_network, write_toml, NetworkRecord};

use super::model::{FewShotModel, HeadKind};
use super::train::TrainLog;

pub const MANIFEST: &str = "model.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    head: HeadKind,
    k_way: usize,
    n_shot: usize,
    best_episode: Option<usize>,
    best_val: Option<f64>,
    encoder: NetworkRecord,
    relation: Option<NetworkRecord>,
}

pub fn save_fewshot(dir: &Path, model: &FewShotModel<f32>, log: Option<&TrainLog>) -> Result<()> {
    let manifest = Manifest {
        head: model.head_kind,
        k_way: model.k_way,
        n_shot: model.n_shot,
        best_episode: log.map(|l| l.best_episode),
        best_val: log.map(|l| l.best_val).filter(|v| v.is_finite()),
        encoder: save_network(dir, "encoder", &model.encoder)?,
        relation: model
            .relation
            .as_ref()
            .map(|h| save_network(dir, "relation", h))
            .transpose()?,
    };
    write_toml(&dir.join(MANIFEST), &manifest)
}

pub fn load_fewshot(dir: &Path) -> Result<FewShotModel<f32>> {
    let m: Manifest = read_toml(&dir.join(MANIFEST))?;
    let relation = m.relation.as_ref().map(|r| load_network(dir, r)).transpose()?;
    if (m.head == HeadKind::Relation) != relation.is_some() {
        return Err(Error::Config(format!("{}: head kind does not match stored networks", dir.display())));
    }
    Ok(FewShotModel {
        encoder: load_network(dir, &m.encoder)?,
        head_kind: m.head,
        relation,
        k_way: m.k_way,
        n_shot: m.n_shot,
    })
}
