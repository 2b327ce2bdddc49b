//! Latent-space similarity: the per-location cosine map between two
//! latents, the focal-weighted similarity loss that emphasises dissimilar
//! locations, and the epoch-annealed mask applied to latents during
//! diffusion training.
//!
//! "Feature-wise" is read as per spatial location: the cosine is taken over
//! the channel vector at each `(h, w)` of a `C x H x W` latent.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default norm floor for the cosine.
pub const COSINE_EPS: f64 = 1e-8;
/// Default floor for the log argument of the similarity loss.
pub const LOG_FLOOR: f64 = 1e-7;

/// Per-location cosine similarities, each in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::invalid("values", "length must equal height * width"));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid("values", format!("{v} outside [-1, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Epoch-dependent mask `min(alpha * tau / total + (1 + s) / 2, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub tau: u64,
    pub total: u64,
    pub alpha: f64,
}

impl DynamicMask {
    /// The all-ones mask used at inference time.
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
            tau: 0,
            total: 1,
            alpha: 0.0,
        }
    }

    /// A mask with explicit values, each in `[0, 1]`.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid("values", "length must equal height * width"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("values", "mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
            tau: 0,
            total: 1,
            alpha: 0.0,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn location_norms(e: &Tensor, eps: f64) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = e.chw()?;
    let hw = h * w;
    let d = e.data();
    let norms = (0..hw)
        .map(|p| {
            (0..c)
                .map(|ch| d[ch * hw + p].powi(2))
                .sum::<f64>()
                .sqrt()
                .max(eps)
        })
        .collect();
    Ok((c, hw, norms))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    a.chw()?;
    a.same_dims(b, "latents")
}

/// Cosine similarity of the channel vectors at every spatial location,
/// with norms floored at `eps` and the result clamped to `[-1, 1]`.
pub fn cosine_map(a: &Tensor, b: &Tensor, eps: f64) -> Result<SimilarityMap> {
    check_pair(a, b)?;
    let (_, h, w) = a.chw()?;
    let values = cosine_raw(a, b, eps)?
        .into_iter()
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    SimilarityMap::new(h, w, values)
}

fn cosine_raw(a: &Tensor, b: &Tensor, eps: f64) -> Result<Vec<f64>> {
    let (c, hw, na) = location_norms(a, eps)?;
    let (_, _, nb) = location_norms(b, eps)?;
    let (da, db) = (a.data(), b.data());
    Ok((0..hw)
        .map(|p| {
            let dot: f64 = (0..c).map(|ch| da[ch * hw + p] * db[ch * hw + p]).sum();
            dot / (na[p] * nb[p])
        })
        .collect())
}

/// Loss value and gradients with respect to both latents.
#[derive(Clone, Debug)]
pub struct SimLoss {
    pub loss: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
    pub map: SimilarityMap,
}

/// Per-location loss term `-((1 - s) / 2)^gamma * ln(max((1 + s) / 2, floor))`.
pub fn sim_term(s: f64, gamma: f64, floor: f64) -> f64 {
    let weight = ((1.0 - s) / 2.0).powf(gamma);
    if weight == 0.0 {
        return 0.0;
    }
    -weight * ((1.0 + s) / 2.0).max(floor).ln()
}

/// Derivative of [`sim_term`] with respect to `s`.
pub fn sim_term_grad(s: f64, gamma: f64, floor: f64) -> f64 {
    let q = (1.0 - s) / 2.0;
    let p = (1.0 + s) / 2.0;
    let log_p = p.max(floor).ln();
    // d/ds of q^gamma is -gamma/2 * q^(gamma-1); the product with ln p vanishes at q = 0
    let d_weight = if q > 0.0 {
        -0.5 * gamma * q.powf(gamma - 1.0)
    } else {
        0.0
    };
    let d_log = if p > floor { 0.5 / p } else { 0.0 };
    -(d_weight * log_p + q.powf(gamma) * d_log)
}

/// Adaptive similarity loss averaged over spatial locations, with
/// gradients through the weight, the log and the cosine into both inputs.
pub fn adaptive_sim_loss(a: &Tensor, b: &Tensor, gamma: f64, floor: f64) -> Result<SimLoss> {
    check_pair(a, b)?;
    if !(gamma >= 0.0) {
        return Err(Error::invalid("gamma", "must be >= 0"));
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::invalid("floor", "must lie in (0, 1)"));
    }
    let eps = COSINE_EPS;
    let (c, h, w) = a.chw()?;
    let hw = h * w;
    let (_, _, na) = location_norms(a, eps)?;
    let (_, _, nb) = location_norms(b, eps)?;
    let raw = cosine_raw(a, b, eps)?;
    let (da, db) = (a.data(), b.data());
    let mut grad_a = vec![0.0; da.len()];
    let mut grad_b = vec![0.0; db.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / hw as f64;
    let mut clamped = Vec::with_capacity(hw);
    for p in 0..hw {
        let s = raw[p].clamp(-1.0, 1.0);
        clamped.push(s);
        loss += sim_term(s, gamma, floor);
        let dl_ds = sim_term_grad(s, gamma, floor) * inv_n;
        if dl_ds == 0.0 {
            continue;
        }
        let s_raw = raw[p];
        // ds/da = b / (|a||b|) - s a / |a|^2 (norm floor is inactive when |a| > eps)
        let a_active = na[p] > eps;
        let b_active = nb[p] > eps;
        for ch in 0..c {
            let i = ch * hw + p;
            let mut ga = db[i] / (na[p] * nb[p]);
            if a_active {
                ga -= s_raw * da[i] / (na[p] * na[p]);
            }
            let mut gb = da[i] / (na[p] * nb[p]);
            if b_active {
                gb -= s_raw * db[i] / (nb[p] * nb[p]);
            }
            grad_a[i] = dl_ds * ga;
            grad_b[i] = dl_ds * gb;
        }
    }
    Ok(SimLoss {
        loss: loss * inv_n,
        grad_a: Tensor::new(a.dims(), grad_a)?,
        grad_b: Tensor::new(b.dims(), grad_b)?,
        map: SimilarityMap::new(h, w, clamped)?,
    })
}

/// The epoch-annealed mask; constant with respect to the latents.
pub fn dynamic_mask(sim: &SimilarityMap, tau: u64, total: u64, alpha: f64) -> Result<DynamicMask> {
    if total == 0 {
        return Err(Error::invalid("total", "must be >= 1"));
    }
    if tau > total {
        return Err(Error::invalid("tau", format!("epoch {tau} exceeds total {total}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha", "must be > 0"));
    }
    let ramp = alpha * tau as f64 / total as f64;
    let values = sim
        .values()
        .iter()
        .map(|&s| (ramp + (1.0 + s) / 2.0).min(1.0))
        .collect();
    Ok(DynamicMask {
        height: sim.height(),
        width: sim.width(),
        values,
        tau,
        total,
        alpha,
    })
}

/// Multiplies every channel of `e` by the mask.
pub fn apply_mask(e: &Tensor, mask: &DynamicMask) -> Result<Tensor> {
    let (c, h, w) = e.chw()?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::invalid(
            "mask",
            format!("mask {}x{} vs latent {h}x{w}", mask.height, mask.width),
        ));
    }
    let hw = h * w;
    let mut out = e.clone();
    for ch in 0..c {
        for (v, m) in out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(&mask.values) {
            *v *= m;
        }
    }
    Ok(out)
}
