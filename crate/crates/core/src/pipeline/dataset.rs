//! Phantom datasets on disk: one S2T1 file per pair plus `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{gen_pair, HuImage, NormalizedImage, PairedSample, PhantomSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::container::{Container, TensorData};

const SAMPLE_SEED_STREAM: u64 = 0x5345_4544; // "SEED"
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Seed of pair `index` in a dataset rooted at `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    RngStream::new(seed, SAMPLE_SEED_STREAM).fork(index as u64).next_u64()
}

pub fn generate(n: usize, size: usize, seed: u64, spec: &PhantomSpec) -> Result<Vec<PairedSample>> {
    (0..n).map(|i| gen_pair(sample_seed(seed, i), size, spec)).collect()
}

fn hu_tensor(img: &HuImage) -> Tensor {
    Tensor::new(&[img.height(), img.width()], img.pixels().to_vec()).expect("image dims")
}

fn hu_from(c: &Container, name: &str) -> Result<HuImage> {
    let t = c.tensor(name)?;
    match *t.dims() {
        [h, w] => HuImage::new(h, w, t.into_data()),
        _ => Err(Error::CorruptCheckpoint {
            field: "dims",
            reason: format!("`{name}` must be H x W"),
        }),
    }
}

pub fn sample_container(s: &PairedSample) -> Result<Container> {
    let mut c = Container::new();
    c.push_tensor("ncct", &hu_tensor(&s.ncct))?;
    c.push_tensor("cect", &hu_tensor(&s.cect))?;
    let mask = s.contrast_mask.iter().map(|&m| i64::from(m)).collect();
    c.push("mask", &[s.height(), s.width()], TensorData::I64(mask))?;
    c.push_i64("seed", s.seed as i64)?;
    Ok(c)
}

pub fn sample_from_container(c: &Container) -> Result<PairedSample> {
    let ncct = hu_from(c, "ncct")?;
    let cect = hu_from(c, "cect")?;
    let mask = c.i64s("mask")?;
    if cect.height() != ncct.height() || cect.width() != ncct.width() || mask.len() != ncct.pixels().len() {
        return Err(Error::CorruptCheckpoint {
            field: "dims",
            reason: "ncct, cect and mask shapes differ".into(),
        });
    }
    Ok(PairedSample {
        ncct,
        cect,
        contrast_mask: mask.iter().map(|&m| m != 0).collect(),
        seed: c.scalar_i64("seed")? as u64,
    })
}

pub fn sample_file_name(index: usize) -> String {
    format!("pair_{index:04}.s2t1")
}

/// Writes `n` pairs and the manifest into `dir` (created if missing).
pub fn write_dataset(dir: &Path, n: usize, size: usize, seed: u64, spec: &PhantomSpec) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = generate(n, size, seed, spec)?;
    let mut files = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        sample_container(s)?.save(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        count: n,
        size,
        seed,
        files,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.files.len() != m.count {
        return Err(Error::invalid("manifest", format!("count {} but {} files", m.count, m.files.len())));
    }
    Ok(m)
}

/// Loads every pair listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<PairedSample>> {
    read_manifest(dir)?
        .files
        .iter()
        .map(|f| sample_from_container(&Container::load(&dir.join(f))?))
        .collect()
}

/// A normalized image as a single-entry container named `image`.
pub fn image_container(img: &NormalizedImage) -> Result<Container> {
    let mut c = Container::new();
    c.push_tensor("image", &Tensor::new(&[img.height(), img.width()], img.pixels().to_vec())?)?;
    Ok(c)
}

/// Reads a normalized `image` entry, or windows the first present HU entry
/// among `hu_fallbacks`.
pub fn read_image(c: &Container, hu_fallbacks: &[&str], window_width: f64, window_level: f64) -> Result<NormalizedImage> {
    if c.get("image").is_some() {
        let t = c.tensor("image")?;
        return match *t.dims() {
            [h, w] => NormalizedImage::new(h, w, t.into_data()),
            _ => Err(Error::CorruptCheckpoint {
                field: "dims",
                reason: "`image` must be H x W".into(),
            }),
        };
    }
    for name in hu_fallbacks {
        if c.get(name).is_some() {
            return crate::phantom::window_normalize(&hu_from(c, name)?, window_width, window_level);
        }
    }
    Err(Error::CorruptCheckpoint {
        field: "entry",
        reason: format!("no `image` entry and none of {hu_fallbacks:?}"),
    })
}

/// Sorted `*.s2t1` files of a directory.
pub fn list_containers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "s2t1"))
        .collect();
    v.sort();
    Ok(v)
}
