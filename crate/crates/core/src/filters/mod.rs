//! Filtering functions applied to auxiliary support sets.

pub mod ae;
pub mod classic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tensor};

pub use ae::{
    finetune_fpa, finetune_fpa_prime, load_ae, save_ae, train_ae_standard, AeModel, AeStage, AeTrainConfig,
};
pub use classic::{filter_bitr, filter_feats_median, filter_noise, filter_tvm, TvmParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    /// Leaves images untouched; the zero point of every filter-based score.
    Identity,
    Noise,
    Feats,
    Bitr {
        r: u32,
    },
    Tvm {
        keep_p: f64,
        lambda: f64,
        iterations: usize,
        step: f64,
    },
    Fpa,
    FpaPrime,
}

impl FilterSpec {
    pub fn tvm_default() -> Self {
        let p = TvmParams::default();
        FilterSpec::Tvm {
            keep_p: p.keep_p,
            lambda: p.lambda,
            iterations: p.iterations,
            step: p.step,
        }
    }

    /// Short name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            FilterSpec::Identity => "identity",
            FilterSpec::Noise => "noise",
            FilterSpec::Feats => "feats",
            FilterSpec::Bitr { .. } => "bitr",
            FilterSpec::Tvm { .. } => "tvm",
            FilterSpec::Fpa => "fpa",
            FilterSpec::FpaPrime => "fpa_prime",
        }
    }

    pub fn needs_ae(&self) -> Option<AeStage> {
        match self {
            FilterSpec::Fpa => Some(AeStage::Fpa),
            FilterSpec::FpaPrime => Some(AeStage::FpaPrime),
            _ => None,
        }
    }
}

/// Applies `spec` to a batch. AE-based specs need a matching `ae`.
pub fn apply_filter(
    spec: &FilterSpec,
    images: &Tensor<f32>,
    ae: Option<&AeModel<f32>>,
    rng: &mut RngStream,
) -> Result<Tensor<f32>> {
    match *spec {
        FilterSpec::Identity => Ok(images.clone()),
        FilterSpec::Noise => filter_noise(images, rng),
        FilterSpec::Feats => filter_feats_median(images),
        FilterSpec::Bitr { r } => filter_bitr(images, r),
        FilterSpec::Tvm {
            keep_p,
            lambda,
            iterations,
            step,
        } => filter_tvm(
            images,
            &TvmParams {
                keep_p,
                lambda,
                iterations,
                step,
            },
            rng,
        ),
        FilterSpec::Fpa | FilterSpec::FpaPrime => {
            let ae = ae.ok_or_else(|| Error::Config(format!("filter `{}` needs an autoencoder checkpoint", spec.name())))?;
            let mut out = ae.reconstruct(images)?;
            out.clamp_unit();
            Ok(out)
        }
    }
}
