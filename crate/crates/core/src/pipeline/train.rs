//! Two-stage training loops, batch translation and evaluation helpers.

use serde::Serialize;

use crate::autoencoder::{ae_train_step, encode, AeModel, AeTrainState, LossRecord, DOWNSAMPLE_FACTOR};
use crate::diffusion::{diff_train_step, translate, Denoiser, DiffStepRecord, DiffTrainState, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ImagePair, MetricReport};
use crate::phantom::{normalize_pair, split_dataset, NormalizedImage, NormalizedPair, PairedSample};
use crate::rng::RngStream;
use crate::similarity::{cosine_map, dynamic_mask, SimilarityMap, COSINE_EPS};
use crate::tensor::Tensor;

use super::checkpoint::{ae_digest, DiffBundle};
use super::config::RunConfig;

const STAGE1_DATA_STREAM: u64 = 0xDA7A_0001;
const STAGE2_DATA_STREAM: u64 = 0xDA7A_0002;
const STAGE2_INIT_STREAM: u64 = 0xDE00;
const TRANSLATE_STREAM: u64 = 0x7A5E;
const LOG_EVERY: u64 = 100;

/// Minimum number of training pairs for either stage.
pub const MIN_TRAIN_PAIRS: usize = 8;

/// Epoch-wise shuffled cycling over `0..n`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    stream: RngStream,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, stream_id: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            pass: 0,
            stream: RngStream::new(seed, stream_id),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut r = self.stream.fork(self.pass);
        for i in (1..self.order.len()).rev() {
            let j = r.int_range(0, i as u64) as usize;
            self.order.swap(i, j);
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.pass += 1;
                    self.pos = 0;
                    self.shuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Windows every sample and splits 4:1 into training and held-out pairs.
pub fn prepare_pairs(samples: &[PairedSample], cfg: &RunConfig) -> Result<(Vec<NormalizedPair>, Vec<NormalizedPair>)> {
    let pairs = samples
        .iter()
        .map(|s| normalize_pair(s, cfg.window_width, cfg.window_level))
        .collect::<Result<Vec<_>>>()?;
    split_dataset(pairs, cfg.seed)
}

fn check_pairs(train: &[NormalizedPair], size: usize) -> Result<()> {
    if train.len() < MIN_TRAIN_PAIRS {
        return Err(Error::invalid(
            "data",
            format!("need at least {MIN_TRAIN_PAIRS} training pairs, got {}", train.len()),
        ));
    }
    if let Some(p) = train.iter().find(|p| p.ncct.height() != size || p.ncct.width() != size) {
        return Err(Error::invalid(
            "data",
            format!("pair of size {}x{} does not match image_size {size}", p.ncct.height(), p.ncct.width()),
        ));
    }
    Ok(())
}

/// Result of stage 1. `diverged` holds the reason when training stopped on a
/// non-finite value; `model` is then the last finite state.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub model: AeModel,
    pub log: Vec<LossRecord>,
    pub diverged: Option<String>,
}

pub fn train_stage1(cfg: &RunConfig, train: &[NormalizedPair]) -> Result<Stage1Outcome> {
    cfg.validate()?;
    check_pairs(train, cfg.image_size)?;
    let model = AeModel::new(&cfg.arch(), cfg.seed, cfg.lambda_adv > 0.0)?;
    let mut state = AeTrainState::new(model, cfg.seed);
    let mut sampler = BatchSampler::new(train.len(), cfg.seed, STAGE1_DATA_STREAM);
    let mut log = Vec::with_capacity(cfg.s1_steps as usize);
    for step in 0..cfg.s1_steps {
        let batch: Vec<NormalizedPair> = sampler
            .next_batch(cfg.s1_batch_size)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let snapshot = state.model.clone();
        match ae_train_step(&mut state, &batch, &cfg.step_config(step)) {
            Ok(rec) => {
                if step % LOG_EVERY == 0 {
                    log::info!(
                        "stage1 step {step}: total {:.5} rec {:.5} quan {:.5} sim {:.5}",
                        rec.total,
                        rec.rec,
                        rec.quan,
                        rec.sim
                    );
                }
                log.push(rec);
            }
            Err(Error::Divergence(reason)) => {
                return Ok(Stage1Outcome {
                    model: snapshot,
                    log,
                    diverged: Some(format!("step {step}: {reason}")),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Stage1Outcome {
        model: state.model,
        log,
        diverged: None,
    })
}

/// Unquantized encoder outputs `(E_n, E_c)` of each pair.
pub fn latent_pairs(ae: &AeModel, pairs: &[NormalizedPair]) -> Result<Vec<(Tensor, Tensor)>> {
    pairs
        .iter()
        .map(|p| Ok((encode(&p.ncct, &ae.encoder)?, encode(&p.cect, &ae.encoder)?)))
        .collect()
}

/// Mean of the dynamic mask over all locations of all latent pairs.
pub fn epoch_mask_mean(latents: &[(Tensor, Tensor)], tau: u64, total: u64, alpha: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e_n, e_c) in latents {
        let m = dynamic_mask(&cosine_map(e_n, e_c, COSINE_EPS)?, tau, total, alpha)?;
        sum += m.values().iter().sum::<f64>();
        n += m.values().len();
    }
    if n == 0 {
        return Err(Error::invalid("latents", "empty"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub mask_mean: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub bundle: DiffBundle,
    pub steps: Vec<DiffStepRecord>,
    pub epochs: Vec<EpochLog>,
    pub diverged: Option<String>,
}

/// Trains the denoiser on latents of the frozen autoencoder. Epoch `tau`
/// runs from 0 to `epochs - 1`; each epoch is `steps_per_epoch` updates.
pub fn train_stage2(cfg: &RunConfig, train: &[NormalizedPair], ae: &AeModel) -> Result<Stage2Outcome> {
    cfg.validate()?;
    check_pairs(train, cfg.image_size)?;
    let arch = ae.arch();
    if arch.latent_channels != cfg.latent_channels {
        return Err(Error::invalid(
            "ae",
            format!(
                "autoencoder latent has {} channels, config expects {}",
                arch.latent_channels, cfg.latent_channels
            ),
        ));
    }
    let latent_hw = cfg.image_size / DOWNSAMPLE_FACTOR;
    if latent_hw % 4 != 0 {
        return Err(Error::invalid("image_size", format!("latent size {latent_hw} is not a multiple of 4")));
    }
    let digest = ae_digest(ae);
    let latents = latent_pairs(ae, train)?;
    let sched = cfg.schedule()?;
    let den = Denoiser::new(cfg.denoiser_config(), &mut RngStream::new(cfg.seed, STAGE2_INIT_STREAM))?;
    let mut state = DiffTrainState::new(den, cfg.seed);
    let mut sampler = BatchSampler::new(train.len(), cfg.seed, STAGE2_DATA_STREAM);
    let opt = cfg.stage2_opt();
    let total = cfg.s2_epochs;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut diverged = None;
    'outer: for tau in 0..total {
        let mask_mean = epoch_mask_mean(&latents, tau, total, cfg.alpha)?;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.s2_steps_per_epoch {
            let idx = sampler.next_batch(cfg.s2_batch_size);
            let batch: Vec<(&Tensor, &Tensor)> = idx.iter().map(|&i| (&latents[i].0, &latents[i].1)).collect();
            let snapshot = state.denoiser.clone();
            match diff_train_step(&mut state, &batch, tau, total, cfg.alpha, &sched, &opt) {
                Ok(rec) => {
                    loss_sum += rec.loss;
                    steps.push(rec);
                }
                Err(Error::Divergence(reason)) => {
                    state.denoiser = snapshot;
                    diverged = Some(format!("epoch {tau}: {reason}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = loss_sum / cfg.s2_steps_per_epoch as f64;
        log::info!("stage2 epoch {tau}: mask mean {mask_mean:.6} loss {loss:.5}");
        epochs.push(EpochLog {
            epoch: tau,
            mask_mean,
            loss,
        });
    }
    if ae_digest(ae) != digest {
        return Err(Error::invalid("ae", "autoencoder weights changed during stage 2"));
    }
    Ok(Stage2Outcome {
        bundle: DiffBundle {
            denoiser: state.denoiser,
            schedule: sched,
            beta_1: cfg.beta_1,
            beta_t: cfg.beta_t,
            t_start_default: cfg.t_start,
            ae_digest: digest,
        },
        steps,
        epochs,
        diverged,
    })
}

/// Sampler seed of image `index` for a run rooted at `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    RngStream::new(seed, TRANSLATE_STREAM).fork(index as u64).next_u64()
}

/// Translates each image with its own derived sampler seed.
pub fn translate_all(
    inputs: &[&NormalizedImage],
    ae: &AeModel,
    bundle: &DiffBundle,
    t_start: usize,
    seed: u64,
) -> Result<Vec<NormalizedImage>> {
    if ae_digest(ae) != bundle.ae_digest {
        return Err(Error::invalid(
            "checkpoints",
            "the diffusion model was trained on a different autoencoder",
        ));
    }
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let cfg = SamplerConfig {
                t_start,
                seed: image_seed(seed, i),
                deterministic_last_step: true,
            };
            translate(x, ae, &bundle.denoiser, &bundle.schedule, &cfg)
        })
        .collect()
}

/// Metrics of predictions against targets (data range 2).
pub fn evaluate_images(preds: &[NormalizedImage], targets: &[&NormalizedImage]) -> Result<MetricReport> {
    if preds.len() != targets.len() {
        return Err(Error::invalid("pairs", format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let pairs: Vec<ImagePair<'_>> = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            if p.height() != t.height() || p.width() != t.width() {
                return Err(Error::invalid("pairs", "prediction and target shapes differ"));
            }
            Ok(ImagePair {
                pred: p.pixels(),
                target: t.pixels(),
                height: t.height(),
                width: t.width(),
            })
        })
        .collect::<Result<_>>()?;
    evaluate(&pairs, 2.0)
}

/// Mean per-location cosine between `E_n` and `E_c` over the pairs.
pub fn mean_latent_cosine(ae: &AeModel, pairs: &[NormalizedPair]) -> Result<f64> {
    let maps = similarity_maps(ae, pairs)?;
    Ok(maps.iter().map(SimilarityMap::mean).sum::<f64>() / maps.len().max(1) as f64)
}

pub fn similarity_maps(ae: &AeModel, pairs: &[NormalizedPair]) -> Result<Vec<SimilarityMap>> {
    latent_pairs(ae, pairs)?
        .iter()
        .map(|(a, b)| cosine_map(a, b, COSINE_EPS))
        .collect()
}

/// Marks each latent location whose `f x f` pixel block touches the mask.
pub fn latent_mask(mask: &[bool], height: usize, width: usize, factor: usize) -> Vec<bool> {
    let (lh, lw) = (height / factor, width / factor);
    let mut out = vec![false; lh * lw];
    for y in 0..lh * factor {
        for x in 0..lw * factor {
            if mask[y * width + x] {
                out[(y / factor) * lw + x / factor] = true;
            }
        }
    }
    out
}

/// Mean similarity at latent locations inside and outside the contrast
/// mask, pooled over all pairs.
pub fn similarity_inside_outside(ae: &AeModel, pairs: &[NormalizedPair]) -> Result<(f64, f64)> {
    let maps = similarity_maps(ae, pairs)?;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (m, p) in maps.iter().zip(pairs) {
        let lm = latent_mask(&p.contrast_mask, p.ncct.height(), p.ncct.width(), DOWNSAMPLE_FACTOR);
        for (&v, &inside) in m.values().iter().zip(&lm) {
            if inside {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::invalid("pairs", "contrast mask is empty or covers everything"));
    }
    Ok((si / ni as f64, so / no as f64))
}
