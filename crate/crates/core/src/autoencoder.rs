//! Stage-1 model: a weight-shared encoder applied to both modalities, a
//! vector-quantization codebook, the contrast-image decoder, the
//! high-frequency-enhanced reconstruction target and the composite loss.
//!
//! During training only the contrast latent is quantized and decoded; the
//! non-contrast latent enters through the similarity term. At inference the
//! non-contrast latent is quantized with the same codebook.

use serde::Serialize;

use crate::diffnet::{adamw_step, AdamW, Cache, LayerKind, Param, Sequential};
use crate::error::{Error, Result};
use crate::phantom::{NormalizedImage, NormalizedPair};
use crate::rng::RngStream;
use crate::similarity::{adaptive_sim_loss, LOG_FLOOR};
use crate::tensor::Tensor;

/// Spatial reduction of the encoder (two stride-2 stages).
pub const DOWNSAMPLE_FACTOR: usize = 4;
/// Channel widths of the three resolution levels.
pub const WIDTHS: [usize; 3] = [16, 32, 64];
/// Group count of every group norm.
pub const NORM_GROUPS: usize = 8;

const ENC_STREAM: u64 = 1;
const CODEBOOK_STREAM: u64 = 2;
const DEC_STREAM: u64 = 3;
const DISC_STREAM: u64 = 4;

/// Architecture choices that are fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeArch {
    pub latent_channels: usize,
    pub codebook_size: usize,
    /// Project each latent vector onto the unit sphere at the encoder output.
    pub normalize_latent: bool,
}

impl Default for AeArch {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            codebook_size: 128,
            normalize_latent: true,
        }
    }
}

fn encoder_layers(arch: &AeArch) -> Vec<LayerKind> {
    let [w0, w1, w2] = WIDTHS;
    let g = NORM_GROUPS;
    let mut k = vec![
        LayerKind::Conv3x3 { in_ch: 1, out_ch: w0, stride: 1 },
        LayerKind::Silu,
        LayerKind::Conv3x3 { in_ch: w0, out_ch: w1, stride: 2 },
        LayerKind::ResidualBlock { channels: w1, groups: g, temb_dim: None },
        LayerKind::GroupNorm { channels: w1, groups: g },
        LayerKind::Silu,
        LayerKind::Conv3x3 { in_ch: w1, out_ch: w2, stride: 2 },
        LayerKind::ResidualBlock { channels: w2, groups: g, temb_dim: None },
        LayerKind::GroupNorm { channels: w2, groups: g },
        LayerKind::Silu,
        LayerKind::Conv3x3 { in_ch: w2, out_ch: arch.latent_channels, stride: 1 },
    ];
    if arch.normalize_latent {
        k.push(LayerKind::ChannelL2Norm);
    }
    k
}

fn decoder_layers(arch: &AeArch) -> Vec<LayerKind> {
    let [w0, w1, w2] = WIDTHS;
    let g = NORM_GROUPS;
    vec![
        LayerKind::Conv3x3 { in_ch: arch.latent_channels, out_ch: w2, stride: 1 },
        LayerKind::ResidualBlock { channels: w2, groups: g, temb_dim: None },
        LayerKind::GroupNorm { channels: w2, groups: g },
        LayerKind::Silu,
        LayerKind::Upsample2xConv3x3 { in_ch: w2, out_ch: w1 },
        LayerKind::ResidualBlock { channels: w1, groups: g, temb_dim: None },
        LayerKind::GroupNorm { channels: w1, groups: g },
        LayerKind::Silu,
        LayerKind::Upsample2xConv3x3 { in_ch: w1, out_ch: w0 },
        LayerKind::GroupNorm { channels: w0, groups: g },
        LayerKind::Silu,
        LayerKind::Conv3x3 { in_ch: w0, out_ch: 1, stride: 1 },
        LayerKind::Tanh,
    ]
}

fn image_tensor(x: &NormalizedImage) -> Result<Tensor> {
    let (h, w) = (x.height(), x.width());
    if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
        return Err(Error::invalid(
            "image",
            format!("{h}x{w} is not divisible by {DOWNSAMPLE_FACTOR}"),
        ));
    }
    Ok(x.to_tensor())
}

/// The single encoder shared by both modalities.
#[derive(Clone, Debug)]
pub struct SyncreticEncoder {
    net: Sequential,
    latent_channels: usize,
}

impl SyncreticEncoder {
    pub fn new(arch: &AeArch, rng: &mut RngStream) -> Result<Self> {
        if arch.latent_channels == 0 {
            return Err(Error::invalid("latent_channels", "must be >= 1"));
        }
        Ok(Self {
            net: Sequential::new(&encoder_layers(arch), rng)?,
            latent_channels: arch.latent_channels,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn downsample_factor(&self) -> usize {
        DOWNSAMPLE_FACTOR
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    fn forward(&self, x: &NormalizedImage) -> Result<(Tensor, Vec<Cache>)> {
        self.net.forward(&image_tensor(x)?)
    }
}

/// Learned code vectors with per-code usage statistics.
#[derive(Clone, Debug)]
pub struct Codebook {
    codes: Param,
    usage_counts: Vec<u64>,
    idle_steps: Vec<u64>,
}

impl Codebook {
    /// Codes drawn from `N(0, 1/dim)`, so their norms start near one.
    pub fn new(size: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("codebook_size", "must be >= 2"));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        let codes = rng.gaussian(&[size, dim]).scale(1.0 / (dim as f64).sqrt());
        Ok(Self {
            codes: Param::new(codes),
            usage_counts: vec![0; size],
            idle_steps: vec![0; size],
        })
    }

    /// Builds a codebook from explicit `K x C` code vectors.
    pub fn from_codes(codes: Tensor) -> Result<Self> {
        let (size, dim) = match codes.dims() {
            [k, c] => (*k, *c),
            d => return Err(Error::invalid("codes", format!("expected K x C, got {d:?}"))),
        };
        if size < 2 || dim == 0 {
            return Err(Error::invalid("codes", "need K >= 2 codes of dimension >= 1"));
        }
        if !codes.all_finite() {
            return Err(Error::invalid("codes", "non-finite code vector"));
        }
        Ok(Self {
            codes: Param::new(codes),
            usage_counts: vec![0; size],
            idle_steps: vec![0; size],
        })
    }

    pub fn size(&self) -> usize {
        self.codes.value.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.value.dims()[1]
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes.value
    }

    pub fn param(&self) -> &Param {
        &self.codes
    }

    pub fn param_mut(&mut self) -> &mut Param {
        &mut self.codes
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn set_usage_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.size() {
            return Err(Error::invalid("usage_counts", "length must equal codebook size"));
        }
        self.usage_counts = counts;
        Ok(())
    }

    fn code(&self, k: usize) -> &[f64] {
        let c = self.dim();
        &self.codes.value.data()[k * c..(k + 1) * c]
    }

    /// Index of the nearest code; the lowest index wins ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self.code(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Re-seeds codes idle for at least `after` steps with randomly chosen
    /// latent vectors. Returns the re-seeded indices.
    fn refresh_dead(&mut self, used: &[usize], pool: &[Vec<f64>], after: u64, rng: &mut RngStream) -> Vec<usize> {
        for s in &mut self.idle_steps {
            *s += 1;
        }
        for &k in used {
            self.idle_steps[k] = 0;
        }
        let mut reseeded = Vec::new();
        if pool.is_empty() || after == 0 {
            return reseeded;
        }
        let c = self.dim();
        for k in 0..self.size() {
            if self.idle_steps[k] >= after {
                let pick = rng.int_range(0, pool.len() as u64 - 1) as usize;
                self.codes.value.data_mut()[k * c..(k + 1) * c].copy_from_slice(&pool[pick]);
                for t in [&mut self.codes.adam_m, &mut self.codes.adam_v] {
                    t.data_mut()[k * c..(k + 1) * c].fill(0.0);
                }
                self.idle_steps[k] = 0;
                reseeded.push(k);
            }
        }
        reseeded
    }
}

/// Maps a quantized latent back to a contrast image in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct CectDecoder {
    net: Sequential,
    latent_channels: usize,
}

impl CectDecoder {
    pub fn new(arch: &AeArch, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            net: Sequential::new(&decoder_layers(arch), rng)?,
            latent_channels: arch.latent_channels,
        })
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        let (c, _, _) = z.chw()?;
        if c != self.latent_channels {
            return Err(Error::invalid(
                "latent",
                format!("decoder expects {} channels, got {c}", self.latent_channels),
            ));
        }
        Ok(())
    }
}

/// Encodes one image into a `C x H/4 x W/4` latent.
pub fn encode(x: &NormalizedImage, enc: &SyncreticEncoder) -> Result<Tensor> {
    enc.net.infer(&image_tensor(x)?)
}

/// Result of snapping a latent to the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub latent: Tensor,
    /// Code index per spatial location, row major.
    pub indices: Vec<usize>,
    pub loss: f64,
}

fn location_vectors(e: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = e.chw()?;
    let hw = h * w;
    let d = e.data();
    Ok((0..hw).map(|p| (0..c).map(|ch| d[ch * hw + p]).collect()).collect())
}

/// Replaces each location's vector by its nearest code. The loss is the
/// codebook term plus `beta_commit` times the commitment term, each a
/// squared distance averaged over locations; in value both equal the same
/// distance, they differ only in which side receives gradient.
pub fn quantize(e: &Tensor, cb: &Codebook, beta_commit: f64) -> Result<Quantized> {
    let (c, h, w) = e.chw()?;
    if c != cb.dim() {
        return Err(Error::invalid(
            "latent",
            format!("latent has {c} channels, codes have {}", cb.dim()),
        ));
    }
    if !(beta_commit >= 0.0) {
        return Err(Error::invalid("beta_commit", "must be >= 0"));
    }
    let hw = h * w;
    let vecs = location_vectors(e)?;
    let mut out = vec![0.0; e.len()];
    let mut indices = Vec::with_capacity(hw);
    let mut dist = 0.0;
    for (p, v) in vecs.iter().enumerate() {
        let k = cb.nearest(v);
        indices.push(k);
        for (ch, &q) in cb.code(k).iter().enumerate() {
            out[ch * hw + p] = q;
            dist += (v[ch] - q) * (v[ch] - q);
        }
    }
    let mean = dist / hw as f64;
    Ok(Quantized {
        latent: Tensor::new(e.dims(), out)?,
        indices,
        loss: mean + beta_commit * mean,
    })
}

/// Decodes a latent into an image.
pub fn decode(z: &Tensor, dec: &CectDecoder) -> Result<NormalizedImage> {
    dec.check(z)?;
    let y = dec.net.infer(z)?;
    NormalizedImage::from_tensor(&y)
}

/// Quantized latent of a non-contrast image; the contrast image is never
/// needed after training.
pub fn encode_for_inference(x_n: &NormalizedImage, enc: &SyncreticEncoder, cb: &Codebook) -> Result<Tensor> {
    Ok(quantize(&encode(x_n, enc)?, cb, 0.0)?.latent)
}

/// Normalised 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(pixels: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * pixels[y * width + clampi(x as i64 + i as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[clampi(y as i64 + i as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Unsharp mask `clamp(x + beta (x - blur(x)), -1, 1)`.
pub fn high_freq_enhance(x: &NormalizedImage, beta: f64, sigma: f64) -> Result<NormalizedImage> {
    if !(beta >= 0.0) {
        return Err(Error::invalid("beta", "must be >= 0"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", "must be > 0"));
    }
    let blur = gaussian_blur(x.pixels(), x.height(), x.width(), sigma);
    let out = x
        .pixels()
        .iter()
        .zip(&blur)
        .map(|(&v, &b)| (v + beta * (v - b)).clamp(-1.0, 1.0))
        .collect();
    NormalizedImage::new(x.height(), x.width(), out)
}

/// Weights of the stage-1 loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AeLossWeights {
    pub lambda_r: f64,
    pub lambda_q: f64,
    pub lambda_s: f64,
    pub lambda_adv: f64,
}

impl Default for AeLossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_q: 1.0,
            lambda_s: 0.1,
            lambda_adv: 0.0,
        }
    }
}

impl AeLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_q, self.lambda_s, self.lambda_adv];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("weights", "loss weights must be finite and >= 0"));
        }
        if self.lambda_r + self.lambda_q + self.lambda_s <= 0.0 {
            return Err(Error::invalid("weights", "one of lambda_r, lambda_q, lambda_s must be > 0"));
        }
        Ok(())
    }
}

/// Everything that shapes the stage-1 objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeLossConfig {
    pub weights: AeLossWeights,
    pub gamma: f64,
    pub floor: f64,
    pub beta_commit: f64,
    pub hf_beta: f64,
    pub hf_sigma: f64,
}

impl Default for AeLossConfig {
    fn default() -> Self {
        Self {
            weights: AeLossWeights::default(),
            gamma: 1.0,
            floor: LOG_FLOOR,
            beta_commit: 0.25,
            hf_beta: 1.0,
            hf_sigma: 1.0,
        }
    }
}

/// Loss values of one evaluation (batch means for a training step).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossRecord {
    pub total: f64,
    pub rec: f64,
    pub quan: f64,
    pub sim: f64,
    pub adv_g: f64,
    pub adv_d: f64,
}

/// A small fully convolutional critic producing one score per patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    net: Sequential,
}

impl PatchDiscriminator {
    pub fn new(rng: &mut RngStream) -> Result<Self> {
        let [w0, w1, _] = WIDTHS;
        let net = Sequential::new(
            &[
                LayerKind::Conv3x3 { in_ch: 1, out_ch: w0, stride: 2 },
                LayerKind::Silu,
                LayerKind::Conv3x3 { in_ch: w0, out_ch: w1, stride: 2 },
                LayerKind::Silu,
                LayerKind::Conv3x3 { in_ch: w1, out_ch: 1, stride: 1 },
            ],
            rng,
        )?;
        Ok(Self { net })
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    /// Patch scores, `1 x H/4 x W/4`.
    pub fn scores(&self, x: &NormalizedImage) -> Result<Tensor> {
        self.net.infer(&x.to_tensor())
    }
}

fn hinge_parts(real: &Tensor, fake: &Tensor) -> (f64, f64, f64) {
    let real_term = real.data().iter().map(|d| (1.0 - d).max(0.0)).sum::<f64>() / real.len() as f64;
    let fake_term = fake.data().iter().map(|d| (1.0 + d).max(0.0)).sum::<f64>() / fake.len() as f64;
    let gen_term = fake.data().iter().map(|d| (1.0 - d).max(0.0)).sum::<f64>() / fake.len() as f64;
    (real_term, fake_term, gen_term)
}

/// Hinge losses: `d_loss = (mean relu(1 - D(real)) + mean relu(1 + D(fake))) / 2`
/// and `g_loss = mean relu(1 - D(fake))`.
pub fn patch_disc_loss(x_real: &NormalizedImage, x_fake: &NormalizedImage, disc: &PatchDiscriminator) -> Result<(f64, f64)> {
    let real = disc.scores(x_real)?;
    let fake = disc.scores(x_fake)?;
    let (r, f, g) = hinge_parts(&real, &fake);
    Ok((0.5 * (r + f), g))
}

/// The complete stage-1 model.
#[derive(Clone, Debug)]
pub struct AeModel {
    pub encoder: SyncreticEncoder,
    pub codebook: Codebook,
    pub decoder: CectDecoder,
    pub disc: Option<PatchDiscriminator>,
}

impl AeModel {
    /// Initialises every part from independent streams of `seed`.
    pub fn new(arch: &AeArch, seed: u64, with_disc: bool) -> Result<Self> {
        Ok(Self {
            encoder: SyncreticEncoder::new(arch, &mut RngStream::new(seed, ENC_STREAM))?,
            codebook: Codebook::new(
                arch.codebook_size,
                arch.latent_channels,
                &mut RngStream::new(seed, CODEBOOK_STREAM),
            )?,
            decoder: CectDecoder::new(arch, &mut RngStream::new(seed, DEC_STREAM))?,
            disc: if with_disc {
                Some(PatchDiscriminator::new(&mut RngStream::new(seed, DISC_STREAM))?)
            } else {
                None
            },
        })
    }

    pub fn arch(&self) -> AeArch {
        AeArch {
            latent_channels: self.encoder.latent_channels,
            codebook_size: self.codebook.size(),
            normalize_latent: self
                .encoder
                .net
                .layers()
                .last()
                .is_some_and(|l| l.kind() == LayerKind::ChannelL2Norm),
        }
    }

    /// Encoder, codebook and decoder parameters in checkpoint order.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.net.params();
        v.push(&self.codebook.codes);
        v.extend(self.decoder.net.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.net.params_mut();
        v.push(&mut self.codebook.codes);
        v.extend(self.decoder.net.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Reconstruction of the contrast image from its own quantized latent.
    pub fn reconstruct(&self, x_c: &NormalizedImage) -> Result<NormalizedImage> {
        let q = quantize(&encode(x_c, &self.encoder)?, &self.codebook, 0.0)?;
        decode(&q.latent, &self.decoder)
    }

    /// Translation without diffusion: decode the quantized non-contrast latent.
    pub fn translate_direct(&self, x_n: &NormalizedImage) -> Result<NormalizedImage> {
        decode(&encode_for_inference(x_n, &self.encoder, &self.codebook)?, &self.decoder)
    }
}

/// Values held constant by the stop-gradients of the quantizer, taken at a
/// base point. Re-evaluating the loss with a snapshot makes the
/// straight-through and commitment gradients exact derivatives, so they can
/// be checked by finite differences.
#[derive(Clone, Debug)]
pub struct StopGrad {
    indices: Vec<usize>,
    /// `codes[idx] - E_c`, the straight-through offset.
    offset: Tensor,
    latent: Tensor,
    chosen: Tensor,
}

impl StopGrad {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

struct Forward {
    record: LossRecord,
    stop: StopGrad,
    latent_c: Tensor,
}

/// Evaluates the stage-1 loss on one pair, optionally accumulating
/// `scale`-weighted gradients into the model.
fn loss_core(
    model: &mut AeModel,
    pair: &NormalizedPair,
    cfg: &AeLossConfig,
    frozen: Option<&StopGrad>,
    grads: Option<f64>,
) -> Result<Forward> {
    let w = cfg.weights;
    w.validate()?;
    let x_c = &pair.cect;
    let x_n = &pair.ncct;
    if (x_c.height(), x_c.width()) != (x_n.height(), x_n.width()) {
        return Err(Error::invalid("pair", "ncct and cect sizes differ"));
    }
    let (e_c, cache_c) = model.encoder.forward(x_c)?;
    let (e_n, cache_n) = model.encoder.forward(x_n)?;
    let (c, h, wd) = e_c.chw()?;
    let hw = h * wd;
    let cb = &model.codebook;
    if c != cb.dim() {
        return Err(Error::invalid("codebook", "code dimension differs from latent channels"));
    }

    let stop = match frozen {
        Some(s) => {
            e_c.same_dims(&s.offset, "snapshot")?;
            s.clone()
        }
        None => {
            let q = quantize(&e_c, cb, cfg.beta_commit)?;
            StopGrad {
                offset: q.latent.sub(&e_c)?,
                chosen: q.latent,
                latent: e_c.clone(),
                indices: q.indices,
            }
        }
    };
    let zq = match frozen {
        Some(s) => e_c.add(&s.offset)?,
        None => stop.chosen.clone(),
    };
    let codes_now = |p: usize, ch: usize| cb.codes.value.data()[stop.indices[p] * c + ch];
    let mut codebook_term = 0.0;
    let mut commit_term = 0.0;
    for p in 0..hw {
        for ch in 0..c {
            let i = ch * hw + p;
            codebook_term += (stop.latent.data()[i] - codes_now(p, ch)).powi(2);
            commit_term += (e_c.data()[i] - stop.chosen.data()[i]).powi(2);
        }
    }
    let quan = (codebook_term + cfg.beta_commit * commit_term) / hw as f64;

    model.decoder.check(&zq)?;
    let (x_rec, cache_d) = model.decoder.net.forward(&zq)?;
    let target = high_freq_enhance(x_c, cfg.hf_beta, cfg.hf_sigma)?;
    let n_pix = x_rec.len() as f64;
    let rec = x_rec
        .data()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n_pix;
    let sim = adaptive_sim_loss(&e_n, &e_c, cfg.gamma, cfg.floor)?;

    let mut adv_g = 0.0;
    let mut disc_grad = None;
    if w.lambda_adv > 0.0 {
        if let Some(disc) = &model.disc {
            let (scores, dcache) = disc.net.forward(&x_rec)?;
            let m = scores.len() as f64;
            adv_g = scores.data().iter().map(|d| (1.0 - d).max(0.0)).sum::<f64>() / m;
            disc_grad = Some((scores, dcache));
        }
    }

    let total = w.lambda_r * rec + w.lambda_q * quan + w.lambda_s * sim.loss + w.lambda_adv * adv_g;
    let record = LossRecord {
        total,
        rec,
        quan,
        sim: sim.loss,
        adv_g,
        adv_d: 0.0,
    };
    if ![total, rec, quan, sim.loss, adv_g].iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite stage-1 loss {record:?}")));
    }

    if let Some(scale) = grads {
        let mut d_rec = x_rec.zip_map(&target.to_tensor(), |a, b| {
            let d = a - b;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })?;
        d_rec = d_rec.scale(scale * w.lambda_r / n_pix);
        if let (Some((scores, dcache)), Some(disc)) = (disc_grad, model.disc.as_mut()) {
            let m = scores.len() as f64;
            let g = scores.map(|d| if d < 1.0 { -scale * w.lambda_adv / m } else { 0.0 });
            let d_img = disc.net.backward(&dcache, &g)?;
            d_rec.add_scaled(&d_img, 1.0)?;
        }
        let d_zq = model.decoder.net.backward(&cache_d, &d_rec)?;

        let kq = scale * w.lambda_q * 2.0 / hw as f64;
        let mut d_ec = d_zq;
        {
            let de = d_ec.data_mut();
            for i in 0..de.len() {
                de[i] += kq * cfg.beta_commit * (e_c.data()[i] - stop.chosen.data()[i]);
            }
        }
        d_ec.add_scaled(&sim.grad_b, scale * w.lambda_s)?;
        let mut d_codes = Tensor::zeros(cb.codes.value.dims());
        for p in 0..hw {
            let k = stop.indices[p];
            for ch in 0..c {
                let i = ch * hw + p;
                d_codes.data_mut()[k * c + ch] += kq * (codes_now(p, ch) - stop.latent.data()[i]);
            }
        }
        model.codebook.codes.accumulate(&d_codes)?;
        model.encoder.net.backward(&cache_c, &d_ec)?;
        if w.lambda_s > 0.0 {
            model.encoder.net.backward(&cache_n, &sim.grad_a.scale(scale * w.lambda_s))?;
        }
    }
    Ok(Forward {
        record,
        stop,
        latent_c: e_c,
    })
}

/// Stage-1 loss of one normalized pair (no gradients). Works on a copy of
/// the model, so evaluation never mutates weights.
pub fn auto_loss(pair: &NormalizedPair, model: &AeModel, cfg: &AeLossConfig) -> Result<LossRecord> {
    let mut m = model.clone();
    Ok(loss_core(&mut m, pair, cfg, None, None)?.record)
}

/// Stage-1 loss with gradients accumulated into the model's parameter
/// gradients. With `frozen`, the quantizer's stop-gradient values are taken
/// from the snapshot instead of the current weights.
pub fn auto_loss_grad(
    model: &mut AeModel,
    pair: &NormalizedPair,
    cfg: &AeLossConfig,
    frozen: Option<&StopGrad>,
) -> Result<(LossRecord, StopGrad)> {
    let f = loss_core(model, pair, cfg, frozen, Some(1.0))?;
    Ok((f.record, f.stop))
}

/// [`auto_loss`] evaluated against a stop-gradient snapshot.
pub fn auto_loss_frozen(
    pair: &NormalizedPair,
    model: &AeModel,
    cfg: &AeLossConfig,
    frozen: &StopGrad,
) -> Result<LossRecord> {
    let mut m = model.clone();
    Ok(loss_core(&mut m, pair, cfg, Some(frozen), None)?.record)
}

/// Optimizer settings of one stage-1 step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeStepConfig {
    pub loss: AeLossConfig,
    pub opt: AdamW,
    /// Codes unused for this many consecutive steps are re-seeded (0 disables).
    pub dead_code_steps: u64,
}

impl Default for AeStepConfig {
    fn default() -> Self {
        Self {
            loss: AeLossConfig::default(),
            opt: AdamW::new(1e-4, 0.0),
            dead_code_steps: 200,
        }
    }
}

/// Model plus the bookkeeping a training run carries between steps.
#[derive(Clone, Debug)]
pub struct AeTrainState {
    pub model: AeModel,
    pub step: u64,
    rng: RngStream,
}

impl AeTrainState {
    pub fn new(model: AeModel, seed: u64) -> Self {
        Self {
            model,
            step: 0,
            rng: RngStream::new(seed, 0xC0DE),
        }
    }
}

/// One forward/backward/AdamW update of encoder, codebook and decoder (and
/// the discriminator when adversarial training is on) over a batch. The
/// record holds batch means measured before the update.
pub fn ae_train_step(state: &mut AeTrainState, batch: &[NormalizedPair], cfg: &AeStepConfig) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    let scale = 1.0 / batch.len() as f64;
    let model = &mut state.model;
    model.zero_grad();
    let mut mean = LossRecord::default();
    let mut used = Vec::new();
    let mut pool = Vec::new();
    let mut recs = Vec::new();
    for pair in batch {
        let f = loss_core(model, pair, &cfg.loss, None, Some(scale))?;
        mean.total += f.record.total * scale;
        mean.rec += f.record.rec * scale;
        mean.quan += f.record.quan * scale;
        mean.sim += f.record.sim * scale;
        mean.adv_g += f.record.adv_g * scale;
        used.extend_from_slice(&f.stop.indices);
        pool.extend(location_vectors(&f.latent_c)?);
        if cfg.loss.weights.lambda_adv > 0.0 && model.disc.is_some() {
            recs.push(model.reconstruct(&pair.cect)?);
        }
    }
    for p in model.params_mut() {
        adamw_step(p, &cfg.opt)?;
    }
    if let Some(disc) = model.disc.as_mut() {
        if cfg.loss.weights.lambda_adv > 0.0 {
            disc.net.zero_grad();
            for (pair, fake) in batch.iter().zip(&recs) {
                mean.adv_d += disc_step_grads(disc, &pair.cect, fake, scale)? * scale;
            }
            disc.net.step(&cfg.opt)?;
        }
    }
    for &k in &used {
        model.codebook.usage_counts[k] += 1;
    }
    if cfg.opt.lr > 0.0 {
        model
            .codebook
            .refresh_dead(&used, &pool, cfg.dead_code_steps, &mut state.rng);
    }
    state.step += 1;
    Ok(mean)
}

fn disc_step_grads(disc: &mut PatchDiscriminator, real: &NormalizedImage, fake: &NormalizedImage, scale: f64) -> Result<f64> {
    let (sr, cr) = disc.net.forward(&real.to_tensor())?;
    let (sf, cf) = disc.net.forward(&fake.to_tensor())?;
    let (r, f, _) = hinge_parts(&sr, &sf);
    let mr = sr.len() as f64;
    let mf = sf.len() as f64;
    let gr = sr.map(|d| if d < 1.0 { -0.5 * scale / mr } else { 0.0 });
    let gf = sf.map(|d| if d > -1.0 { 0.5 * scale / mf } else { 0.0 });
    disc.net.backward(&cr, &gr)?;
    disc.net.backward(&cf, &gf)?;
    Ok(0.5 * (r + f))
}
