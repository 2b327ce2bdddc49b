//! Image quality metrics. NMAE and NMSE are normalised by the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEFAULT_DATA_RANGE: f64 = 2.0;

fn same_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(
            "pred",
            format!("length {} vs target length {}", pred.len(), target.len()),
        ));
    }
    Ok(())
}

/// `sum |pred - target| / sum |target|`.
pub fn nmae(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred, target)?;
    let den: f64 = target.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nmae of an all-zero target".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / den)
}

/// `||pred - target||^2 / ||target||^2`.
pub fn nmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred, target)?;
    let den: f64 = target.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nmse of an all-zero target".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / den)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are identical; `db` then holds [`PSNR_CAP_DB`].
    pub exact: bool,
}

pub fn psnr(pred: &[f64], target: &[f64], data_range: f64) -> Result<Psnr> {
    same_len(pred, target)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range", "must be positive"));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            exact: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * (data_range * data_range / mse).log10(),
        exact: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: DEFAULT_DATA_RANGE,
        }
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of an `h x w` grid.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for ox in 0..wo {
            rows[y * wo + ox] = (0..k).map(|j| taps[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            out[oy * wo + ox] = (0..k).map(|i| taps[i] * rows[(oy + i) * wo + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions, Gaussian-weighted local
/// statistics with population variances.
pub fn ssim(pred: &[f64], target: &[f64], height: usize, width: usize, p: &SsimParams) -> Result<f64> {
    same_len(pred, target)?;
    if pred.len() != height * width {
        return Err(Error::invalid("pred", "length must equal height * width"));
    }
    if p.window == 0 || height < p.window || width < p.window {
        return Err(Error::invalid(
            "window",
            format!("{}x{} image is smaller than the {} window", height, width, p.window),
        ));
    }
    if !(p.sigma > 0.0 && p.data_range > 0.0) {
        return Err(Error::invalid("sigma", "sigma and data_range must be positive"));
    }
    let taps = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let f = |v: &[f64]| filter_valid(v, height, width, &taps);
    let xx: Vec<f64> = pred.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = target.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a * b).collect();
    let (mx, my, exx, eyy, exy) = (f(pred), f(target), f(&xx), f(&yy), f(&xy));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cov = exy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Metrics averaged over a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nmae: f64,
    pub nmse: f64,
    pub psnr_db: f64,
    /// True when every prediction matched its target exactly.
    pub psnr_exact: bool,
    pub ssim: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One predicted/target image pair of equal shape.
#[derive(Clone, Copy, Debug)]
pub struct ImagePair<'a> {
    pub pred: &'a [f64],
    pub target: &'a [f64],
    pub height: usize,
    pub width: usize,
}

pub fn evaluate(pairs: &[ImagePair<'_>], data_range: f64) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "no images to evaluate"));
    }
    let params = SsimParams {
        data_range,
        ..SsimParams::default()
    };
    let mut acc = [0.0f64; 4];
    let mut exact = true;
    for p in pairs {
        acc[0] += nmae(p.pred, p.target)?;
        acc[1] += nmse(p.pred, p.target)?;
        let ps = psnr(p.pred, p.target, data_range)?;
        acc[2] += ps.db;
        exact &= ps.exact;
        acc[3] += ssim(p.pred, p.target, p.height, p.width, &params)?;
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        nmae: acc[0] / n,
        nmse: acc[1] / n,
        psnr_db: acc[2] / n,
        psnr_exact: exact,
        ssim: acc[3] / n,
        n_images: pairs.len(),
    })
}
