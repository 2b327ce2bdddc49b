//! Stage-2 model: linear-beta DDPM schedule, closed-form forward noising,
//! a small time-conditioned U-Net noise predictor, the masked training
//! objective, ancestral reverse steps and image translation.
//!
//! Diffusion runs on continuous encoder latents. Translation noises the
//! non-contrast latent to `t_start`, denoises back to `t = 0`, then
//! quantizes and decodes once.

use crate::autoencoder::{decode, encode, quantize, AeModel};
use crate::diffnet::{adamw_step, AdamW, Cache, Layer, LayerKind, Param};
use crate::error::{Error, Result};
use crate::phantom::NormalizedImage;
use crate::rng::RngStream;
use crate::similarity::{apply_mask, cosine_map, dynamic_mask, DynamicMask, COSINE_EPS};
use crate::tensor::Tensor;

const SAMPLER_STREAM: u64 = 0x5A;

/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;

/// Per-step noise levels, indexed from `t = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max() {
            return Err(Error::invalid("t", format!("{t} outside 1..={}", self.t_max())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linear interpolation of beta from `beta_1` to `beta_t`.
pub fn make_schedule(t_max: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::invalid("T", "must be >= 1"));
    }
    if !(beta_1 > 0.0 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(Error::invalid(
            "beta",
            format!("need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_t}"),
        ));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_1
            } else {
                beta_1 + (beta_t - beta_1) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    z0.same_dims(eps, "eps")?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// One ancestral step `t -> t-1`. `noise` is required for `t > 1` and
/// ignored at `t = 1`.
pub fn ddpm_reverse_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    z_t.same_dims(eps_hat, "eps_hat")?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = z_t.zip_map(eps_hat, |z, e| inv * (z - k * e))?;
    if t > 1 {
        let n = noise.ok_or_else(|| Error::invalid("noise", format!("required at t = {t}")))?;
        out.add_scaled(n, beta.sqrt())?;
    }
    Ok(out)
}

/// Closed-form posterior mean of `z_{t-1}` given `z_t` and `z0`.
pub fn posterior_mean(z_t: &Tensor, z0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = if t > 1 { sched.alpha_bar(t - 1)? } else { 1.0 };
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    z0.zip_map(z_t, |a, b| c0 * a + ct * b)
}

/// Denoiser size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Widths are `base`, `2 base`, `4 base`.
    pub base_width: usize,
    pub groups: usize,
}

impl DenoiserConfig {
    pub fn new(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            base_width: 16,
            groups: 8,
        }
    }

    fn temb_dim(&self) -> usize {
        4 * self.base_width
    }

    fn sin_dim(&self) -> usize {
        2 * self.base_width
    }
}

// Layer slots, in parameter order.
const TIME_EMBED: usize = 0;
const TIME_LIN1: usize = 1;
const TIME_LIN2: usize = 2;
const CONV_IN: usize = 3;
const RES_A: usize = 4;
const DOWN1: usize = 5;
const RES_B: usize = 6;
const DOWN2: usize = 7;
const MID1: usize = 8;
const MID2: usize = 9;
const UP2: usize = 10;
const RES_C: usize = 11;
const UP1: usize = 12;
const RES_D: usize = 13;
const GN_OUT: usize = 14;
const CONV_OUT: usize = 15;
const N_LAYERS: usize = 16;

/// U-Net noise predictor: two stride-2 stages down, two residual blocks in
/// the middle, two upsampling stages with additive skips, and the time
/// embedding fed into every residual block.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    layers: Vec<Layer>,
}

/// Forward values kept for [`Denoiser::backward`].
#[derive(Clone, Debug)]
pub struct DenoiserCache {
    caches: Vec<Cache>,
    silu_t1: Cache,
    silu_t2: Cache,
    silu_out: Cache,
    temb_dim: usize,
}

fn silu() -> Layer {
    Layer::new(LayerKind::Silu, &mut RngStream::new(0, 0)).expect("silu has no parameters")
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.latent_channels == 0 || cfg.base_width == 0 {
            return Err(Error::invalid("denoiser", "channels and width must be >= 1"));
        }
        let (w0, w1, w2) = (cfg.base_width, 2 * cfg.base_width, 4 * cfg.base_width);
        let g = cfg.groups;
        let td = Some(cfg.temb_dim());
        let c = cfg.latent_channels;
        let kinds = [
            LayerKind::SinusoidalTimeEmbed { dim: cfg.sin_dim() },
            LayerKind::Linear { in_dim: cfg.sin_dim(), out_dim: cfg.temb_dim() },
            LayerKind::Linear { in_dim: cfg.temb_dim(), out_dim: cfg.temb_dim() },
            LayerKind::Conv3x3 { in_ch: c, out_ch: w0, stride: 1 },
            LayerKind::ResidualBlock { channels: w0, groups: g, temb_dim: td },
            LayerKind::Conv3x3 { in_ch: w0, out_ch: w1, stride: 2 },
            LayerKind::ResidualBlock { channels: w1, groups: g, temb_dim: td },
            LayerKind::Conv3x3 { in_ch: w1, out_ch: w2, stride: 2 },
            LayerKind::ResidualBlock { channels: w2, groups: g, temb_dim: td },
            LayerKind::ResidualBlock { channels: w2, groups: g, temb_dim: td },
            LayerKind::Upsample2xConv3x3 { in_ch: w2, out_ch: w1 },
            LayerKind::ResidualBlock { channels: w1, groups: g, temb_dim: td },
            LayerKind::Upsample2xConv3x3 { in_ch: w1, out_ch: w0 },
            LayerKind::ResidualBlock { channels: w0, groups: g, temb_dim: td },
            LayerKind::GroupNorm { channels: w0, groups: g },
            LayerKind::Conv3x3 { in_ch: w0, out_ch: c, stride: 1 },
        ];
        let layers = kinds
            .iter()
            .map(|&k| Layer::new(k, rng))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(layers.len(), N_LAYERS);
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        let (c, h, w) = z.chw()?;
        if c != self.cfg.latent_channels {
            return Err(Error::invalid(
                "latent",
                format!("denoiser expects {} channels, got {c}", self.cfg.latent_channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid("latent", format!("{h}x{w} is not divisible by 4")));
        }
        Ok(())
    }

    /// Predicted noise with the values needed for backward.
    pub fn forward(&self, z: &Tensor, t: usize) -> Result<(Tensor, DenoiserCache)> {
        self.check_input(z)?;
        let l = &self.layers;
        let s = silu();
        let mut caches = Vec::with_capacity(N_LAYERS);
        let mut run = |i: usize, x: &Tensor, aux: Option<&Tensor>| -> Result<Tensor> {
            let (y, c) = l[i].forward(x, aux)?;
            caches.push(c);
            Ok(y)
        };
        let e = run(TIME_EMBED, &Tensor::new(&[1], vec![t as f64])?, None)?;
        let e = run(TIME_LIN1, &e, None)?;
        let (e, silu_t1) = s.forward(&e, None)?;
        let e = run(TIME_LIN2, &e, None)?;
        let (temb, silu_t2) = s.forward(&e, None)?;
        let temb = temb.reshape(&[self.cfg.temb_dim()])?;
        let tb = Some(&temb);

        let h0 = run(CONV_IN, z, None)?;
        let skip1 = run(RES_A, &h0, tb)?;
        let h = run(DOWN1, &skip1, None)?;
        let skip2 = run(RES_B, &h, tb)?;
        let h = run(DOWN2, &skip2, None)?;
        let h = run(MID1, &h, tb)?;
        let h = run(MID2, &h, tb)?;
        let h = run(UP2, &h, None)?.add(&skip2)?;
        let h = run(RES_C, &h, tb)?;
        let h = run(UP1, &h, None)?.add(&skip1)?;
        let h = run(RES_D, &h, tb)?;
        let h = run(GN_OUT, &h, None)?;
        let (h, silu_out) = s.forward(&h, None)?;
        let out = run(CONV_OUT, &h, None)?;
        Ok((
            out,
            DenoiserCache {
                caches,
                silu_t1,
                silu_t2,
                silu_out,
                temb_dim: self.cfg.temb_dim(),
            },
        ))
    }

    pub fn predict(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.forward(z, t)?.0)
    }

    /// Parameter gradients (in [`Denoiser::params`] order) for the output
    /// gradient `grad`.
    pub fn backward(&self, cache: &DenoiserCache, grad: &Tensor) -> Result<Vec<Tensor>> {
        if cache.caches.len() != N_LAYERS {
            return Err(Error::invalid("cache", "denoiser cache is incomplete"));
        }
        let l = &self.layers;
        let c = &cache.caches;
        let s = silu();
        let mut pg: Vec<Vec<Tensor>> = vec![Vec::new(); N_LAYERS];
        let mut temb_grad = Tensor::zeros(&[cache.temb_dim]);
        let back = |i: usize, g: &Tensor, pg: &mut Vec<Vec<Tensor>>, tg: &mut Tensor| -> Result<Tensor> {
            let lg = l[i].backward(&c[i], g)?;
            pg[i] = lg.params;
            if let Some(a) = lg.aux {
                tg.add_scaled(&a, 1.0)?;
            }
            Ok(lg.input)
        };
        let g = back(CONV_OUT, grad, &mut pg, &mut temb_grad)?;
        let g = s.backward(&cache.silu_out, &g)?.input;
        let g = back(GN_OUT, &g, &mut pg, &mut temb_grad)?;
        let g = back(RES_D, &g, &mut pg, &mut temb_grad)?;
        let g_skip1 = g.clone();
        let g = back(UP1, &g, &mut pg, &mut temb_grad)?;
        let g = back(RES_C, &g, &mut pg, &mut temb_grad)?;
        let g_skip2 = g.clone();
        let g = back(UP2, &g, &mut pg, &mut temb_grad)?;
        let g = back(MID2, &g, &mut pg, &mut temb_grad)?;
        let g = back(MID1, &g, &mut pg, &mut temb_grad)?;
        let g = back(DOWN2, &g, &mut pg, &mut temb_grad)?.add(&g_skip2)?;
        let g = back(RES_B, &g, &mut pg, &mut temb_grad)?;
        let g = back(DOWN1, &g, &mut pg, &mut temb_grad)?.add(&g_skip1)?;
        let g = back(RES_A, &g, &mut pg, &mut temb_grad)?;
        back(CONV_IN, &g, &mut pg, &mut temb_grad)?;

        let tg = temb_grad.reshape(&[1, cache.temb_dim])?;
        let g = s.backward(&cache.silu_t2, &tg)?.input;
        let g = back(TIME_LIN2, &g, &mut pg, &mut Tensor::zeros(&[cache.temb_dim]))?;
        let g = s.backward(&cache.silu_t1, &g)?.input;
        back(TIME_LIN1, &g, &mut pg, &mut Tensor::zeros(&[cache.temb_dim]))?;
        Ok(pg.into_iter().flatten().collect())
    }
}

/// One evaluation of the masked denoising objective.
#[derive(Clone, Debug)]
pub struct DiffLoss {
    pub loss: f64,
    pub t: usize,
    pub mask_mean: f64,
    /// Gradients with respect to the denoiser parameters.
    pub grads: Vec<Tensor>,
}

/// Masked noise-prediction loss. Draws `t` uniformly from `1..=T` and then
/// the noise from `stream`. The mask is a constant.
#[allow(clippy::too_many_arguments)]
pub fn diff_loss(
    e_n: &Tensor,
    e_c: &Tensor,
    tau: u64,
    total_epochs: u64,
    alpha: f64,
    den: &Denoiser,
    sched: &NoiseSchedule,
    stream: &mut RngStream,
) -> Result<DiffLoss> {
    let sim = cosine_map(e_n, e_c, COSINE_EPS)?;
    let mask = dynamic_mask(&sim, tau, total_epochs, alpha)?;
    let z0 = apply_mask(e_n, &mask)?;
    let t = stream.int_range(1, sched.t_max() as u64) as usize;
    let eps = stream.gaussian(z0.dims());
    let zt = q_sample(&z0, t, &eps, sched)?;
    let (pred, cache) = den.forward(&zt, t)?;
    let n = pred.len() as f64;
    let diff = pred.sub(&eps)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite diffusion loss at t = {t}")));
    }
    let grads = den.backward(&cache, &diff.scale(2.0 / n))?;
    Ok(DiffLoss {
        loss,
        t,
        mask_mean: mask.mean(),
        grads,
    })
}

/// Training state of the denoiser.
#[derive(Clone, Debug)]
pub struct DiffTrainState {
    pub denoiser: Denoiser,
    pub step: u64,
    stream: RngStream,
}

impl DiffTrainState {
    pub fn new(denoiser: Denoiser, seed: u64) -> Self {
        Self {
            denoiser,
            step: 0,
            stream: RngStream::new(seed, 0xD1FF),
        }
    }
}

/// Mean loss and mean mask value of one stage-2 step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffStepRecord {
    pub loss: f64,
    pub mask_mean: f64,
}

/// One AdamW update of the denoiser over a batch of `(E_n, E_c)` latents.
pub fn diff_train_step(
    state: &mut DiffTrainState,
    batch: &[(&Tensor, &Tensor)],
    tau: u64,
    total_epochs: u64,
    alpha: f64,
    sched: &NoiseSchedule,
    opt: &AdamW,
) -> Result<DiffStepRecord> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    let k = 1.0 / batch.len() as f64;
    state.denoiser.zero_grad();
    let mut rec = DiffStepRecord {
        loss: 0.0,
        mask_mean: 0.0,
    };
    for (i, (e_n, e_c)) in batch.iter().enumerate() {
        // one independent stream per item and step
        let mut item_stream = state.stream.fork(state.step * batch.len() as u64 + i as u64);
        let dl = diff_loss(e_n, e_c, tau, total_epochs, alpha, &state.denoiser, sched, &mut item_stream)?;
        rec.loss += k * dl.loss;
        rec.mask_mean += k * dl.mask_mean;
        for (p, g) in state.denoiser.params_mut().into_iter().zip(&dl.grads) {
            p.grad.add_scaled(g, k)?;
        }
    }
    for p in state.denoiser.params_mut() {
        adamw_step(p, opt)?;
    }
    state.step += 1;
    Ok(rec)
}

/// Inference settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Noise level to start from; 0 skips diffusion entirely.
    pub t_start: usize,
    pub seed: u64,
    /// When false, noise is also added on the final step.
    pub deterministic_last_step: bool,
}

impl SamplerConfig {
    /// `t_start = T / 2`.
    pub fn for_schedule(sched: &NoiseSchedule, seed: u64) -> Self {
        Self {
            t_start: sched.t_max() / 2,
            seed,
            deterministic_last_step: true,
        }
    }
}

/// Runs reverse steps from `t_start` down to 0 on a latent.
pub fn denoise_from(z0: &Tensor, den: &Denoiser, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Tensor> {
    if cfg.t_start > sched.t_max() {
        return Err(Error::invalid(
            "t_start",
            format!("{} exceeds T = {}", cfg.t_start, sched.t_max()),
        ));
    }
    if cfg.t_start == 0 {
        return Ok(z0.clone());
    }
    let mut stream = RngStream::new(cfg.seed, SAMPLER_STREAM);
    let eps = stream.gaussian(z0.dims());
    let mut z = q_sample(z0, cfg.t_start, &eps, sched)?;
    for t in (1..=cfg.t_start).rev() {
        let eps_hat = den.predict(&z, t)?;
        let noise = if t > 1 { Some(stream.gaussian(z.dims())) } else { None };
        z = ddpm_reverse_step(&z, t, &eps_hat, sched, noise.as_ref())?;
        if t == 1 && !cfg.deterministic_last_step {
            z.add_scaled(&stream.gaussian(z.dims()), sched.beta(1)?.sqrt())?;
        }
    }
    Ok(z)
}

/// Translates a non-contrast image. Only `x_n` and trained weights are used.
pub fn translate(
    x_n: &NormalizedImage,
    ae: &AeModel,
    den: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<NormalizedImage> {
    let arch = ae.arch();
    if den.config().latent_channels != arch.latent_channels {
        return Err(Error::invalid(
            "checkpoints",
            format!(
                "autoencoder latent has {} channels but the denoiser expects {}",
                arch.latent_channels,
                den.config().latent_channels
            ),
        ));
    }
    let e_n = encode(x_n, &ae.encoder)?;
    let (_, h, w) = e_n.chw()?;
    let z0 = apply_mask(&e_n, &DynamicMask::ones(h, w))?;
    let z = denoise_from(&z0, den, sched, cfg)?;
    let q = quantize(&z, &ae.codebook, 0.0)?;
    decode(&q.latent, &ae.decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeArch;
    use crate::diffnet::grad_check;

    fn small_den(c: usize, seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            latent_channels: c,
            base_width: 4,
            groups: 2,
        };
        Denoiser::new(cfg, &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn schedule_matches_product_oracle() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
        let mut prod = 1.0;
        for t in 1..=1000 {
            let b = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= 1.0 - b;
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
        }
        assert!((s.alpha_bar(1000).unwrap() - 4.04e-5).abs() < 0.01e-5);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
        assert!(make_schedule(10, 0.02, 0.01).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(s.beta(0).is_err() && s.beta(1001).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = RngStream::new(1, 0).gaussian(&[2, 4, 4]);
        let zero = Tensor::zeros(z0.dims());
        let a = s.alpha_bar(300).unwrap().sqrt();
        assert_eq!(q_sample(&z0, 300, &zero, &s).unwrap(), z0.scale(a));
        let eps = RngStream::new(2, 0).gaussian(&[2, 4, 4]);
        let zt = q_sample(&z0, 1000, &eps, &s).unwrap();
        assert!(zt.sub(&eps).unwrap().norm() / eps.norm() < 0.01);
        assert!(q_sample(&z0, 0, &eps, &s).is_err());
    }

    #[test]
    fn reverse_step_with_true_noise_is_posterior_mean() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = RngStream::new(3, 0).gaussian(&[2, 4, 4]);
        let eps = RngStream::new(4, 0).gaussian(&[2, 4, 4]);
        for t in [1, 2, 50, 500, 1000] {
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            let zero = Tensor::zeros(z0.dims());
            let step = ddpm_reverse_step(&zt, t, &eps, &s, Some(&zero)).unwrap();
            let mean = posterior_mean(&zt, &z0, t, &s).unwrap();
            assert!(step.sub(&mean).unwrap().data().iter().all(|d| d.abs() < 1e-10), "t = {t}");
        }
        let zt = q_sample(&z0, 1000, &eps, &s).unwrap();
        let zero = Tensor::zeros(z0.dims());
        let prev = ddpm_reverse_step(&zt, 1000, &eps, &s, Some(&zero)).unwrap();
        assert!(prev.sub(&z0).unwrap().norm() < zt.sub(&z0).unwrap().norm());
    }

    #[test]
    fn reverse_step_rules() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let z = RngStream::new(5, 0).gaussian(&[1, 4, 4]);
        let e = RngStream::new(6, 0).gaussian(&[1, 4, 4]);
        let n = RngStream::new(7, 0).gaussian(&[1, 4, 4]);
        assert!(ddpm_reverse_step(&z, 5, &e, &s, None).is_err());
        assert_eq!(
            ddpm_reverse_step(&z, 1, &e, &s, None).unwrap(),
            ddpm_reverse_step(&z, 1, &e, &s, Some(&n)).unwrap()
        );
        let one = ddpm_reverse_step(&z, 7, &e, &s, Some(&n)).unwrap();
        let two = ddpm_reverse_step(&z.scale(2.0), 7, &e.scale(2.0), &s, Some(&n.scale(2.0))).unwrap();
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn denoiser_shapes() {
        let d = small_den(3, 1);
        let z = RngStream::new(8, 0).gaussian(&[3, 8, 8]);
        assert_eq!(d.predict(&z, 5).unwrap().dims(), &[3, 8, 8]);
        assert!(d.predict(&Tensor::zeros(&[2, 8, 8]), 5).is_err());
        assert!(d.predict(&Tensor::zeros(&[3, 6, 6]), 5).is_err());
        let full = Denoiser::new(DenoiserConfig::new(8), &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(full.predict(&Tensor::zeros(&[8, 16, 16]), 1).unwrap().dims(), &[8, 16, 16]);
    }

    #[test]
    fn diff_loss_gradient_on_2_channel_8x8() {
        let d = small_den(2, 30);
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let e_n = RngStream::new(10, 0).gaussian(&[2, 8, 8]);
        let e_c = RngStream::new(11, 0).gaussian(&[2, 8, 8]);
        let stream = RngStream::new(12, 3);
        let base = diff_loss(&e_n, &e_c, 1, 10, 2.0, &d, &s, &mut stream.clone()).unwrap();
        let n_params = d.params().len();
        for pi in 0..n_params {
            let x0 = d.params()[pi].value.clone();
            let g = base.grads[pi].clone();
            let err = grad_check(
                |x| {
                    let mut probe = d.clone();
                    probe.params_mut()[pi].value = x.clone();
                    let l = diff_loss(&e_n, &e_c, 1, 10, 2.0, &probe, &s, &mut stream.clone())?;
                    Ok((l.loss, g.clone()))
                },
                &x0,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "param {pi}: {err}");
        }
    }

    #[test]
    fn saturated_mask_leaves_latent_unchanged() {
        let e_n = RngStream::new(13, 0).gaussian(&[2, 4, 4]);
        let e_c = RngStream::new(14, 0).gaussian(&[2, 4, 4]);
        let sim = cosine_map(&e_n, &e_c, COSINE_EPS).unwrap();
        for tau in 5..=10 {
            let m = dynamic_mask(&sim, tau, 10, 2.0).unwrap();
            assert_eq!(apply_mask(&e_n, &m).unwrap(), e_n);
        }
    }

    #[test]
    fn uniform_t_deciles() {
        let mut s = RngStream::new(15, 0);
        let t_max = 1000u64;
        let mut bins = [0u32; 10];
        let n = 100_000;
        for _ in 0..n {
            let t = s.int_range(1, t_max);
            bins[((t - 1) * 10 / t_max) as usize] += 1;
        }
        for b in bins {
            let f = b as f64 / n as f64;
            assert!((f - 0.1).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn oracle_and_zero_denoisers() {
        // zero-output denoiser: expected loss is mean(eps^2) = 1
        let mut d = small_den(2, 16);
        for p in d.layers[CONV_OUT].params_mut() {
            p.value.fill(0.0);
        }
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let e = RngStream::new(17, 0).gaussian(&[2, 8, 8]);
        let mut st = RngStream::new(18, 0);
        let mut acc = 0.0;
        let n = 400;
        for _ in 0..n {
            acc += diff_loss(&e, &e, 0, 10, 2.0, &d, &s, &mut st).unwrap().loss;
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_latents() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let e_n = RngStream::new(19, 0).gaussian(&[2, 8, 8]);
        let e_c = e_n.clone();
        let mut st = DiffTrainState::new(small_den(2, 20), 1);
        let opt = AdamW::new(2e-3, 0.0);
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..300 {
            let r = diff_train_step(&mut st, &[(&e_n, &e_c)], 9, 10, 2.0, &s, &opt).unwrap();
            if i < 30 {
                first += r.loss;
            }
            if i >= 270 {
                last += r.loss;
            }
        }
        assert!(last < first, "{last} vs {first}");
    }

    #[test]
    fn translate_is_deterministic_and_t0_is_direct() {
        let arch = AeArch {
            latent_channels: 2,
            codebook_size: 8,
            normalize_latent: true,
        };
        let ae = AeModel::new(&arch, 21, false).unwrap();
        let den = small_den(2, 22);
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let x = NormalizedImage::from_tensor(&RngStream::new(23, 0).gaussian(&[1, 32, 32]).map(|v| (0.5 * v).tanh())).unwrap();
        let cfg = SamplerConfig::for_schedule(&s, 7);
        assert_eq!(cfg.t_start, 10);
        let a = translate(&x, &ae, &den, &s, &cfg).unwrap();
        let b = translate(&x, &ae, &den, &s, &cfg).unwrap();
        assert_eq!(a, b);
        let direct = SamplerConfig { t_start: 0, ..cfg };
        assert_eq!(translate(&x, &ae, &den, &s, &direct).unwrap(), ae.translate_direct(&x).unwrap());
        assert!(translate(&x, &ae, &small_den(3, 1), &s, &cfg).is_err());
        let too_far = SamplerConfig { t_start: 21, ..cfg };
        assert!(translate(&x, &ae, &den, &s, &too_far).is_err());
    }
}
