//! Autoencoder filters: a standard reconstruction AE and its feature-space
//! preserving fine-tunes (image + feature terms, optionally + logits term).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, Split};
use crate::error::{Error, Result};
use crate::fewshot::{class_means, FewShotModel};
use crate::numcore::checkpoint::{load_network, read_toml, save_network, write_toml, NetworkRecord};
use crate::numcore::nn::{desk_encoder_specs, Trace, IMAGE_SHAPE};
use crate::numcore::{LayerSpec, Network, OptimizerConfig, OptimizerKind, OptimizerState, Real, RngStream, StepDecay, Tensor, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeStage {
    Standard,
    Fpa,
    FpaPrime,
}

/// Weight of the image term in the feature-preserving loss.
pub const FPA_IMAGE_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel<F = f32> {
    pub encoder: Network<F>,
    pub decoder: Network<F>,
    pub stage: AeStage,
}

/// Mirror of the desk encoder: three (upsample, conv) blocks ending in a sigmoid.
pub fn ae_decoder_specs() -> Vec<LayerSpec> {
    let conv = |in_ch, out_ch| LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
    };
    vec![
        LayerSpec::Upsample2,
        conv(64, 32),
        LayerSpec::Relu,
        LayerSpec::Upsample2,
        conv(32, 16),
        LayerSpec::Relu,
        LayerSpec::Upsample2,
        conv(16, 16),
        LayerSpec::Relu,
        conv(16, 3),
        LayerSpec::Sigmoid,
    ]
}

pub struct AeTrace<F> {
    enc: Trace<F>,
    dec: Trace<F>,
}

impl<F> AeTrace<F> {
    pub fn output(&self) -> &Tensor<F> {
        &self.dec.output
    }
}

impl<F: Real> AeModel<F> {
    pub fn new(rng: &mut RngStream) -> Result<Self> {
        let encoder = Network::new(Topology::Encoder, &IMAGE_SHAPE, desk_encoder_specs(), &mut rng.child(1))?;
        let decoder = Network::new(Topology::Decoder, &encoder.output_shape(), ae_decoder_specs(), &mut rng.child(2))?;
        Ok(Self {
            encoder,
            decoder,
            stage: AeStage::Standard,
        })
    }

    pub fn cast<G: Real>(&self) -> AeModel<G> {
        AeModel {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            stage: self.stage,
        }
    }

    pub fn reconstruct(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        self.decoder.forward(&self.encoder.forward(images)?)
    }

    pub fn forward_trace(&self, images: &Tensor<F>) -> Result<AeTrace<F>> {
        let enc = self.encoder.forward_trace(images)?;
        let dec = self.decoder.forward_trace(&enc.output)?;
        Ok(AeTrace { enc, dec })
    }

    /// Parameter gradients (encoder then decoder) for `d loss / d x̂`.
    pub fn backward(&self, trace: &AeTrace<F>, grad_out: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let gd = self.decoder.backward(&trace.dec, grad_out, true)?;
        let ge = self.encoder.backward(&trace.enc, &gd.input.expect("requested"), false)?;
        let mut grads = ge.params;
        grads.extend(gd.params);
        Ok(grads)
    }

    pub fn params(&self) -> Vec<Tensor<F>> {
        let mut p = self.encoder.params().to_vec();
        p.extend_from_slice(self.decoder.params());
        p
    }

    pub fn set_params(&mut self, mut params: Vec<Tensor<F>>) -> Result<()> {
        let dec = params.split_off(self.encoder.params().len().min(params.len()));
        self.encoder.set_params(params)?;
        self.decoder.set_params(dec)
    }
}

/// Which reconstruction objective to optimise.
#[derive(Clone, Copy)]
pub enum AeObjective<'a, F> {
    /// Mean squared pixel error.
    Standard,
    /// `0.01·‖x−x̂‖²/√dim(x) + ‖f−f̂‖²/√dim(f)` per sample, averaged.
    Fpa(&'a FewShotModel<F>),
    /// The above plus `‖z−ẑ‖²/√dim(z)` for logits against a calibration support.
    FpaPrime(&'a FewShotModel<F>),
}

/// Per-batch means of the individual loss terms, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub image: f64,
    pub feature: f64,
    pub logits: f64,
}

fn norm_sq_rows<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
    (0..a.batch())
        .map(|i| a.item(i).iter().zip(b.item(i)).map(|(&p, &q)| (p - q) * (p - q)).sum())
        .collect()
}

/// Loss and (optionally) AE parameter gradients on one batch.
///
/// `calib` holds the class features `[k, d]` of the calibration support;
/// it is required for `FpaPrime` and ignored otherwise.
pub fn ae_loss<F: Real>(
    ae: &AeModel<F>,
    objective: AeObjective<'_, F>,
    x: &Tensor<F>,
    calib: Option<&Tensor<F>>,
    want_grads: bool,
) -> Result<(F, LossTerms, Option<Vec<Tensor<F>>>)> {
    ae_loss_from(ae, objective, x, x, calib, want_grads)
}

/// [`ae_loss`] for reconstructing `x` from the AE input `input`.
pub fn ae_loss_from<F: Real>(
    ae: &AeModel<F>,
    objective: AeObjective<'_, F>,
    input: &Tensor<F>,
    x: &Tensor<F>,
    calib: Option<&Tensor<F>>,
    want_grads: bool,
) -> Result<(F, LossTerms, Option<Vec<Tensor<F>>>)> {
    if input.shape() != x.shape() {
        return Err(Error::shape(x.shape(), input.shape()));
    }
    let trace = ae.forward_trace(input)?;
    let xh = trace.output();
    let b = x.batch();
    let inv_b = F::one() / F::lit(b as f64);
    let dim_x = F::lit(x.item_len() as f64);
    let two = F::lit(2.0);
    let mut grad_xh = Tensor::zeros(xh.shape());
    let mut terms = LossTerms::default();

    let img = norm_sq_rows(x, xh);
    let img_mean = img.iter().copied().sum::<F>() * inv_b;
    terms.image = img_mean.to_f64();

    let loss = match objective {
        AeObjective::Standard => {
            let scale = two * inv_b / dim_x;
            for ((g, &p), &q) in grad_xh.data_mut().iter_mut().zip(xh.data()).zip(x.data()) {
                *g = scale * (p - q);
            }
            img_mean / dim_x
        }
        AeObjective::Fpa(fs) | AeObjective::FpaPrime(fs) => {
            let w_img = F::lit(FPA_IMAGE_WEIGHT) / dim_x.sqrt();
            let scale = two * w_img * inv_b;
            for ((g, &p), &q) in grad_xh.data_mut().iter_mut().zip(xh.data()).zip(x.data()) {
                *g = scale * (p - q);
            }
            let f = fs.encode(x)?;
            let tr = fs.encoder.forward_trace(xh)?;
            let fh = tr.output.clone().reshape(f.shape())?;
            let dim_f = F::lit(f.item_len() as f64);
            let feat = norm_sq_rows(&f, &fh);
            let feat_mean = feat.iter().copied().sum::<F>() * inv_b;
            terms.feature = feat_mean.to_f64();
            let fscale = two * inv_b / dim_f.sqrt();
            let mut dfh = Tensor::from_fn(f.shape(), |i| fscale * (fh.data()[i] - f.data()[i]));
            let mut total = w_img * img_mean + feat_mean / dim_f.sqrt();

            if let AeObjective::FpaPrime(_) = objective {
                let cf = calib.ok_or_else(|| Error::Config("logits term needs a calibration support".into()))?;
                let (z, _) = fs.head_logits(cf, &f)?;
                let (zh, cache) = fs.head_logits(cf, &fh)?;
                let dim_z = F::lit(z.item_len() as f64);
                let lg = norm_sq_rows(&z, &zh);
                let lg_mean = lg.iter().copied().sum::<F>() * inv_b;
                terms.logits = lg_mean.to_f64();
                total += lg_mean / dim_z.sqrt();
                let zscale = two * inv_b / dim_z.sqrt();
                let dz = Tensor::from_fn(z.shape(), |i| zscale * (zh.data()[i] - z.data()[i]));
                let (_, dq, _) = fs.head_backward(cf, &fh, &cache, &dz)?;
                dfh.add_assign(&dq);
            }
            if want_grads {
                let dfh = dfh.reshape(tr.output.shape())?;
                let gin = fs.encoder.backward(&tr, &dfh, true)?.input.expect("requested");
                grad_xh.add_assign(&gin);
            }
            total
        }
    };
    if !loss.is_finite() {
        return Err(Error::numeric("autoencoder loss"));
    }
    let grads = if want_grads {
        Some(ae.backward(&trace, &grad_xh)?)
    } else {
        None
    };
    Ok((loss, terms, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Applies [`augment_dihedral_rgb`] to every training batch.
    pub augment: bool,
    /// Amplitude of [`corrupt`] applied to AE inputs; the targets stay clean.
    pub corruption: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::adam(),
                lr: 3e-3,
                weight_decay: 1e-4,
                decay: Some(StepDecay {
                    step_epochs: 20,
                    gamma: 0.5,
                }),
            },
            augment: true,
            corruption: 0.0,
        }
    }
}

/// Adds a `±level` offset of random sign per image and channel and a
/// uniform `[-level, level]` value per pixel, then clips to `[0, 1]`.
pub fn corrupt<F: Real>(x: &Tensor<F>, level: f64, rng: &mut RngStream) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Input(format!("corrupt expects [n, c, h, w], got {shape:?}")));
    }
    let plane = shape[2] * shape[3];
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        let offset = if rng.below(2) == 0 { level } else { -level };
        for v in chunk {
            let y = v.to_f64() + offset + rng.uniform(-level, level);
            *v = F::lit(y.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Replaces every square CHW image in place by one of its eight
/// rotations/reflections with its three colour channels permuted, both
/// drawn uniformly per image.
pub fn augment_dihedral_rgb<F: Real>(x: &mut Tensor<F>, rng: &mut RngStream) -> Result<()> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let shape = x.item_shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::Input(format!("augmentation needs 3×S×S images, got {shape:?}")));
    }
    let s = shape[1];
    let plane = s * s;
    for i in 0..x.batch() {
        let op = rng.below(8);
        let perm = PERMS[rng.below(6)];
        let src = x.item(i).to_vec();
        let dst = x.item_mut(i);
        for y in 0..s {
            for xx in 0..s {
                let (a, b) = if op & 4 != 0 { (xx, y) } else { (y, xx) };
                let a = if op & 1 != 0 { s - 1 - a } else { a };
                let b = if op & 2 != 0 { s - 1 - b } else { b };
                for (c, &pc) in perm.iter().enumerate() {
                    dst[c * plane + y * s + xx] = src[pc * plane + a * s + b];
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AeTrainLog {
    pub train_loss: Vec<f64>,
    /// Validation loss of the starting parameters.
    pub initial_val: f64,
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept; `None` keeps the starting parameters.
    pub best_epoch: Option<usize>,
}

/// Class features of a random `k_way`×`n_shot` support from `split`.
fn calibration<F: Real>(fs: &FewShotModel<F>, ds: &Dataset, split: Split, rng: &mut RngStream) -> Result<Tensor<F>> {
    let ep = sample_episode(ds, split, fs.k_way, fs.n_shot, 0, rng)?;
    let feats = fs.encode(&ds.gather(&ep.support).cast())?;
    Ok(class_means(&feats, &ep.support_labels(), fs.k_way)?.0)
}

/// Mean objective over `ids` in chunks, without gradients.
pub fn ae_eval<F: Real>(
    ae: &AeModel<F>,
    objective: AeObjective<'_, F>,
    ds: &Dataset,
    ids: &[usize],
    calib: Option<&Tensor<F>>,
) -> Result<(f64, LossTerms)> {
    let mut total = 0.0;
    let mut terms = LossTerms::default();
    for chunk in ids.chunks(64) {
        let x = ds.gather(chunk).cast::<F>();
        let (l, t, _) = ae_loss(ae, objective, &x, calib, false)?;
        let w = chunk.len() as f64;
        total += l.to_f64() * w;
        terms.image += t.image * w;
        terms.feature += t.feature * w;
        terms.logits += t.logits * w;
    }
    let n = ids.len().max(1) as f64;
    terms.image /= n;
    terms.feature /= n;
    terms.logits /= n;
    Ok((total / n, terms))
}

/// Minibatch training on the train split with best-validation restore.
pub fn train_ae<F: Real>(
    ae: &mut AeModel<F>,
    objective: AeObjective<'_, F>,
    ds: &Dataset,
    cfg: &AeTrainConfig,
    rng: &mut RngStream,
) -> Result<AeTrainLog> {
    let mut train_ids = ds.samples_in(Split::Train);
    let val_ids = ds.samples_in(Split::Val);
    if train_ids.is_empty() {
        return Err(Error::Input("train split is empty".into()));
    }
    let needs_calib = matches!(objective, AeObjective::FpaPrime(_));
    let fs = match objective {
        AeObjective::FpaPrime(fs) => Some(fs),
        _ => None,
    };
    let val_calib = match fs {
        Some(fs) => Some(calibration(fs, ds, Split::Train, &mut rng.child(0xca1))?),
        None => None,
    };
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = AeTrainLog::default();
    let eval_ids = if val_ids.is_empty() { train_ids.clone() } else { val_ids };
    log.initial_val = ae_eval(ae, objective, ds, &eval_ids, val_calib.as_ref())?.0;
    let mut best_val = log.initial_val;
    let mut best = ae.params();
    let mut order_rng = rng.child(0x0de);
    let mut calib_rng = rng.child(0xca2);
    let mut aug_rng = rng.child(0xa06);
    let mut noise_rng = rng.child(0xd15);
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        order_rng.shuffle(&mut train_ids);
        let calib = match fs {
            Some(fs) if needs_calib => Some(calibration(fs, ds, Split::Train, &mut calib_rng)?),
            _ => None,
        };
        let mut sum = 0.0;
        for chunk in train_ids.chunks(cfg.batch_size.max(1)) {
            let mut x = ds.gather(chunk).cast::<F>();
            if cfg.augment {
                augment_dihedral_rgb(&mut x, &mut aug_rng)?;
            }
            let input = if cfg.corruption > 0.0 {
                corrupt(&x, cfg.corruption, &mut noise_rng)?
            } else {
                x.clone()
            };
            let (l, _, g) = ae_loss_from(ae, objective, &input, &x, calib.as_ref(), true)
                .map_err(|e| Error::numeric(format!("autoencoder epoch {epoch}: {e}")))?;
            let mut params = ae.params();
            opt.step(&mut params, &g.expect("requested"))?;
            ae.set_params(params)?;
            sum += l.to_f64() * chunk.len() as f64;
        }
        log.train_loss.push(sum / train_ids.len() as f64);
        let (v, _) = ae_eval(ae, objective, ds, &eval_ids, val_calib.as_ref())?;
        log::debug!("ae epoch {epoch}: train {:.5} val {v:.5}", log.train_loss[epoch]);
        log.val_loss.push(v);
        if v < best_val {
            best_val = v;
            log.best_epoch = Some(epoch);
            best = ae.params();
        }
    }
    ae.set_params(best)?;
    Ok(log)
}

pub fn train_ae_standard(ds: &Dataset, cfg: &AeTrainConfig, rng: &mut RngStream) -> Result<(AeModel<f32>, AeTrainLog)> {
    let mut ae = AeModel::new(&mut rng.child(0xae))?;
    let log = train_ae(&mut ae, AeObjective::Standard, ds, cfg, rng)?;
    Ok((ae, log))
}

pub fn finetune_fpa(
    ae: &AeModel<f32>,
    fs: &FewShotModel<f32>,
    ds: &Dataset,
    cfg: &AeTrainConfig,
    rng: &mut RngStream,
) -> Result<(AeModel<f32>, AeTrainLog)> {
    finetune(ae, AeObjective::Fpa(fs), AeStage::Fpa, ds, cfg, rng)
}

pub fn finetune_fpa_prime(
    ae: &AeModel<f32>,
    fs: &FewShotModel<f32>,
    ds: &Dataset,
    cfg: &AeTrainConfig,
    rng: &mut RngStream,
) -> Result<(AeModel<f32>, AeTrainLog)> {
    finetune(ae, AeObjective::FpaPrime(fs), AeStage::FpaPrime, ds, cfg, rng)
}

fn finetune(
    ae: &AeModel<f32>,
    objective: AeObjective<'_, f32>,
    stage: AeStage,
    ds: &Dataset,
    cfg: &AeTrainConfig,
    rng: &mut RngStream,
) -> Result<(AeModel<f32>, AeTrainLog)> {
    if ae.stage != AeStage::Standard {
        return Err(Error::Config(format!("fine-tuning starts from a standard AE, got {:?}", ae.stage)));
    }
    let mut tuned = ae.clone();
    let log = train_ae(&mut tuned, objective, ds, cfg, rng)?;
    tuned.stage = stage;
    Ok((tuned, log))
}

/// Mean `‖f−f̂‖²/√dim(f)` over `ids`.
pub fn feature_error(ae: &AeModel<f32>, fs: &FewShotModel<f32>, ds: &Dataset, ids: &[usize]) -> Result<f64> {
    let (_, t) = ae_eval(ae, AeObjective::Fpa(fs), ds, ids, None)?;
    let dim_f: usize = fs.encoder.output_shape().iter().product();
    Ok(t.feature / (dim_f as f64).sqrt())
}

/// Per-pixel root mean squared reconstruction error over `ids`.
pub fn reconstruction_rmse(ae: &AeModel<f32>, ds: &Dataset, ids: &[usize]) -> Result<f64> {
    let (mse, _) = ae_eval(ae, AeObjective::Standard, ds, ids, None)?;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stage: AeStage,
    encoder: NetworkRecord,
    decoder: NetworkRecord,
}

pub const AE_MANIFEST: &str = "ae.toml";

pub fn save_ae(dir: &Path, ae: &AeModel<f32>) -> Result<()> {
    let m = Manifest {
        stage: ae.stage,
        encoder: save_network(dir, "ae_encoder", &ae.encoder)?,
        decoder: save_network(dir, "ae_decoder", &ae.decoder)?,
    };
    write_toml(&dir.join(AE_MANIFEST), &m)
}

pub fn load_ae(dir: &Path) -> Result<AeModel<f32>> {
    let m: Manifest = read_toml(&dir.join(AE_MANIFEST))?;
    Ok(AeModel {
        encoder: load_network(dir, &m.encoder)?,
        decoder: load_network(dir, &m.decoder)?,
        stage: m.stage,
    })
}
