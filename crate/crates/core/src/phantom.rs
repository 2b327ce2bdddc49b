//! Paired NCCT/CECT phantoms and CT preprocessing.
//!
//! A phantom is air with a body ellipse, a few organ ellipses and a few
//! vessel capsules whose unenhanced lumen is slightly darker than the
//! surrounding tissue. The contrast-enhanced image equals the non-contrast one
//! plus a per-vessel HU offset inside the vessels; the same noise field is
//! added to both, so their difference is supported exactly on the mask.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const GEN_STREAM: u64 = 0x5048_414E; // "PHAN"
const CROP_STREAM: u64 = 0x4352_4F50; // "CROP"
const SPLIT_STREAM: u64 = 0x5350_4C54; // "SPLT"

pub const DEFAULT_WINDOW_WIDTH: f64 = 400.0;
pub const DEFAULT_WINDOW_LEVEL: f64 = 0.0;

/// A grid of Hounsfield-unit values.
#[derive(Clone, Debug, PartialEq)]
pub struct HuImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl HuImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::invalid("dims", format!("image must be at least 8x8, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid("pixels", "length must equal height * width"));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pixels", "non-finite HU value"));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// A grid of values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl NormalizedImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::invalid("pixels", "length must equal height * width"));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid("pixels", format!("{v} outside [-1, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds an image from a `1 x H x W` (or `H x W`) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.dims() {
            [1, h, w] | [h, w] => (*h, *w),
            d => return Err(Error::invalid("tensor", format!("expected 1 x H x W, got {d:?}"))),
        };
        Self::new(h, w, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.pixels.clone()).expect("valid image dims")
    }
}

/// Ranges for the phantom recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub air_hu: f64,
    pub body_hu: f64,
    pub organ_count: (u64, u64),
    pub organ_hu: (f64, f64),
    pub vessel_count: (u64, u64),
    /// Vessel radius in pixels.
    pub vessel_radius: (f64, f64),
    /// Maximum capsule half-length in pixels (0 gives disks).
    pub vessel_half_length: f64,
    pub contrast_delta: (f64, f64),
    /// HU subtracted from the tissue under a vessel in both images, so the
    /// unenhanced lumen is faintly visible on the non-contrast scan.
    pub vessel_lumen_offset: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            air_hu: -1000.0,
            body_hu: 40.0,
            organ_count: (2, 4),
            organ_hu: (20.0, 80.0),
            vessel_count: (2, 6),
            vessel_radius: (2.0, 6.0),
            vessel_half_length: 6.0,
            contrast_delta: (100.0, 250.0),
            vessel_lumen_offset: (20.0, 35.0),
            noise_sigma: 5.0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_delta;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("contrast_delta", format!("empty or non-positive range [{lo}, {hi}]")));
        }
        if self.organ_count.0 > self.organ_count.1 || self.vessel_count.0 > self.vessel_count.1 {
            return Err(Error::invalid("count", "empty organ or vessel count range"));
        }
        if self.vessel_count.1 == 0 {
            return Err(Error::invalid("vessel_count", "at least one vessel is required"));
        }
        if !(self.vessel_radius.0 > 0.0 && self.vessel_radius.0 <= self.vessel_radius.1) {
            return Err(Error::invalid("vessel_radius", "empty or non-positive range"));
        }
        if self.vessel_lumen_offset.0 > self.vessel_lumen_offset.1 {
            return Err(Error::invalid("vessel_lumen_offset", "empty range"));
        }
        if self.organ_hu.0 > self.organ_hu.1 {
            return Err(Error::invalid("organ_hu", "empty range"));
        }
        if !(self.noise_sigma >= 0.0) || self.vessel_half_length < 0.0 {
            return Err(Error::invalid("noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// A non-contrast / contrast-enhanced pair with its ground-truth contrast mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub ncct: HuImage,
    pub cect: HuImage,
    pub contrast_mask: Vec<bool>,
    pub seed: u64,
}

impl PairedSample {
    pub fn height(&self) -> usize {
        self.ncct.height
    }

    pub fn width(&self) -> usize {
        self.ncct.width
    }
}

/// A windowed pair ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPair {
    pub ncct: NormalizedImage,
    pub cect: NormalizedImage,
    pub contrast_mask: Vec<bool>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }

    /// A point at fractional radius `r` along direction `angle` from the centre.
    fn interior_point(&self, r: f64, angle: f64) -> (f64, f64) {
        let (u, v) = (r * self.a * angle.cos(), r * self.b * angle.sin());
        (self.cx + u * self.cos - v * self.sin, self.cy + u * self.sin + v * self.cos)
    }
}

/// Generates one paired phantom; a pure function of its arguments.
pub fn gen_pair(seed: u64, size: usize, spec: &PhantomSpec) -> Result<PairedSample> {
    if size < 32 {
        return Err(Error::invalid("size", format!("must be >= 32, got {size}")));
    }
    spec.validate()?;
    let mut rng = RngStream::new(seed, GEN_STREAM);
    let s = size as f64;
    let n = size * size;
    let centre = |i: usize| ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);

    let body = Ellipse::new(
        s / 2.0 + rng.uniform_range(-2.0, 2.0),
        s / 2.0 + rng.uniform_range(-2.0, 2.0),
        rng.uniform_range(0.38, 0.46) * s,
        rng.uniform_range(0.30, 0.40) * s,
        rng.uniform_range(0.0, std::f64::consts::PI),
    );
    let mut base = vec![spec.air_hu; n];
    let mut inside = vec![false; n];
    for (i, v) in base.iter_mut().enumerate() {
        let (x, y) = centre(i);
        if body.contains(x, y) {
            *v = spec.body_hu;
            inside[i] = true;
        }
    }

    let organs = rng.int_range(spec.organ_count.0, spec.organ_count.1);
    for _ in 0..organs {
        let (ox, oy) = body.interior_point(rng.uniform_range(0.0, 0.5), rng.uniform_range(0.0, std::f64::consts::TAU));
        let organ = Ellipse::new(
            ox,
            oy,
            rng.uniform_range(0.08, 0.2) * s,
            rng.uniform_range(0.08, 0.2) * s,
            rng.uniform_range(0.0, std::f64::consts::PI),
        );
        let hu = rng.uniform_range(spec.organ_hu.0, spec.organ_hu.1);
        for i in 0..n {
            let (x, y) = centre(i);
            if inside[i] && organ.contains(x, y) {
                base[i] = hu;
            }
        }
    }

    let mut delta = vec![0.0; n];
    let mut lumen = vec![0.0; n];
    let mut mask = vec![false; n];
    let vessels = rng.int_range(spec.vessel_count.0, spec.vessel_count.1);
    for _ in 0..vessels {
        let (vx, vy) = body.interior_point(rng.uniform_range(0.0, 0.6), rng.uniform_range(0.0, std::f64::consts::TAU));
        let radius = rng.uniform_range(spec.vessel_radius.0, spec.vessel_radius.1);
        let half = rng.uniform_range(0.0, spec.vessel_half_length);
        let phi = rng.uniform_range(0.0, std::f64::consts::PI);
        let d = rng.uniform_range(spec.contrast_delta.0, spec.contrast_delta.1);
        let lum = rng.uniform_range(spec.vessel_lumen_offset.0, spec.vessel_lumen_offset.1);
        let (ux, uy) = (phi.cos(), phi.sin());
        for i in 0..n {
            if !inside[i] {
                continue;
            }
            let (x, y) = centre(i);
            let (px, py) = (x - vx, y - vy);
            let t = (px * ux + py * uy).clamp(-half, half);
            let (qx, qy) = (px - t * ux, py - t * uy);
            if qx * qx + qy * qy <= radius * radius {
                delta[i] = d;
                lumen[i] = lum;
                mask[i] = true;
            }
        }
    }

    for (b, l) in base.iter_mut().zip(&lumen) {
        *b -= l;
    }

    let noise = rng.gaussian(&[n]);
    let ncct: Vec<f64> = base
        .iter()
        .zip(noise.data())
        .map(|(b, z)| b + spec.noise_sigma * z)
        .collect();
    let cect: Vec<f64> = ncct
        .iter()
        .zip(&delta)
        .map(|(v, d)| if *d != 0.0 { v + d } else { *v })
        .collect();
    Ok(PairedSample {
        ncct: HuImage::new(size, size, ncct)?,
        cect: HuImage::new(size, size, cect)?,
        contrast_mask: mask,
        seed,
    })
}

/// Clips to `[level - width/2, level + width/2]` and maps that interval to `[-1, 1]`.
pub fn window_normalize(img: &HuImage, window_width: f64, window_level: f64) -> Result<NormalizedImage> {
    if !(window_width > 0.0 && window_width.is_finite()) {
        return Err(Error::invalid("window_width", format!("must be positive, got {window_width}")));
    }
    let half = window_width / 2.0;
    let (lo, hi) = (window_level - half, window_level + half);
    let pixels = img
        .pixels
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - window_level) / half).clamp(-1.0, 1.0))
        .collect();
    NormalizedImage::new(img.height, img.width, pixels)
}

pub fn normalize_pair(sample: &PairedSample, window_width: f64, window_level: f64) -> Result<NormalizedPair> {
    Ok(NormalizedPair {
        ncct: window_normalize(&sample.ncct, window_width, window_level)?,
        cect: window_normalize(&sample.cect, window_width, window_level)?,
        contrast_mask: sample.contrast_mask.clone(),
    })
}

fn crop_offset(height: usize, width: usize, patch: usize, seed: u64) -> Result<(usize, usize)> {
    if patch == 0 || patch > height.min(width) {
        return Err(Error::invalid(
            "patch",
            format!("patch {patch} does not fit a {height}x{width} image"),
        ));
    }
    let mut rng = RngStream::new(seed, CROP_STREAM);
    let oy = rng.int_range(0, (height - patch) as u64) as usize;
    let ox = rng.int_range(0, (width - patch) as u64) as usize;
    Ok((oy, ox))
}

fn crop_grid<T: Copy>(src: &[T], width: usize, oy: usize, ox: usize, patch: usize) -> Vec<T> {
    (oy..oy + patch)
        .flat_map(|y| src[y * width + ox..y * width + ox + patch].iter().copied())
        .collect()
}

/// A `patch x patch` window at a seed-determined offset.
pub fn crop_patch(img: &NormalizedImage, patch: usize, seed: u64) -> Result<NormalizedImage> {
    let (oy, ox) = crop_offset(img.height, img.width, patch, seed)?;
    NormalizedImage::new(patch, patch, crop_grid(&img.pixels, img.width, oy, ox, patch))
}

/// Crops both images and the mask at the same offset.
pub fn crop_pair(pair: &NormalizedPair, patch: usize, seed: u64) -> Result<NormalizedPair> {
    let w = pair.ncct.width;
    let (oy, ox) = crop_offset(pair.ncct.height, w, patch, seed)?;
    Ok(NormalizedPair {
        ncct: NormalizedImage::new(patch, patch, crop_grid(&pair.ncct.pixels, w, oy, ox, patch))?,
        cect: NormalizedImage::new(patch, patch, crop_grid(&pair.cect.pixels, w, oy, ox, patch))?,
        contrast_mask: crop_grid(&pair.contrast_mask, w, oy, ox, patch),
    })
}

/// Seeded shuffle followed by a 4:1 split; `round(0.8 N)` items go to training.
pub fn split_dataset<T>(items: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 5 {
        return Err(Error::invalid("pairs", format!("need at least 5, got {n}")));
    }
    let mut rng = RngStream::new(seed, SPLIT_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.int_range(0, i as u64) as usize;
        order.swap(i, j);
    }
    let n_train = (8 * n + 5) / 10;
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter()
            .map(|&i| slots[i].take().expect("each index appears once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..]);
    Ok((train, val))
}
