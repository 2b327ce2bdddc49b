//! Model checkpoints stored as S2T1 containers.
//!
//! Parameters are named `enc.<i>`, `codebook`, `dec.<i>` and `diff.<i>` in
//! parameter order. Metadata lives in scalar entries under `meta.`; the stage
//! tag is `meta.stage` (1 = ae, 2 = diff) and a run that stopped on a
//! non-finite loss carries `meta.diverged = 1`.

use std::path::Path;

use crate::autoencoder::{AeArch, AeModel, Codebook, DOWNSAMPLE_FACTOR};
use crate::diffnet::{value_digest, Param};
use crate::diffusion::{make_schedule, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::container::{Container, TensorData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Diff,
}

impl Stage {
    fn code(self) -> i64 {
        match self {
            Stage::Ae => 1,
            Stage::Diff => 2,
        }
    }

    fn from_code(c: i64) -> Result<Self> {
        match c {
            1 => Ok(Stage::Ae),
            2 => Ok(Stage::Diff),
            _ => Err(corrupt("meta.stage", format!("unknown stage code {c}"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stage::Ae => "ae",
            Stage::Diff => "diff",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetaValue {
    Int(i64),
    Real(f64),
}

/// Named tensors plus scalar metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub diverged: bool,
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Vec<(String, MetaValue)>,
}

fn corrupt(field: &'static str, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        field,
        reason: reason.into(),
    }
}

const META: &str = "meta.";

impl Checkpoint {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            diverged: false,
            tensors: Vec::new(),
            metadata: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt("entry", format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<MetaValue> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| corrupt("metadata", format!("missing `{key}`")))
    }

    pub fn meta_int(&self, key: &str) -> Result<i64> {
        match self.meta(key)? {
            MetaValue::Int(v) => Ok(v),
            MetaValue::Real(_) => Err(corrupt("metadata", format!("`{key}` must be an integer"))),
        }
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.meta_int(key)?).map_err(|_| corrupt("metadata", format!("`{key}` must be >= 0")))
    }

    pub fn meta_real(&self, key: &str) -> Result<f64> {
        match self.meta(key)? {
            MetaValue::Real(v) => Ok(v),
            MetaValue::Int(v) => Ok(v as f64),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_i64("meta.stage", self.stage.code())?;
        c.push_i64("meta.diverged", i64::from(self.diverged))?;
        for (k, v) in &self.metadata {
            let name = format!("{META}{k}");
            match v {
                MetaValue::Int(i) => c.push_i64(&name, *i)?,
                MetaValue::Real(r) => c.push_f64(&name, *r)?,
            }
        }
        for (n, t) in &self.tensors {
            if n.starts_with(META) {
                return Err(Error::invalid("tensors", format!("`{n}` uses the reserved meta prefix")));
            }
            c.push_tensor(n, t)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let stage = Stage::from_code(c.scalar_i64("meta.stage")?)?;
        let diverged = match c.scalar_i64("meta.diverged")? {
            0 => false,
            1 => true,
            v => return Err(corrupt("meta.diverged", format!("expected 0 or 1, got {v}"))),
        };
        let mut ck = Checkpoint::new(stage);
        ck.diverged = diverged;
        for e in c.entries() {
            if let Some(key) = e.name.strip_prefix(META) {
                if key == "stage" || key == "diverged" {
                    continue;
                }
                if !e.dims.is_empty() {
                    return Err(corrupt("metadata", format!("`{}` is not a scalar", e.name)));
                }
                let v = match &e.data {
                    TensorData::I64(v) => MetaValue::Int(v[0]),
                    TensorData::F64(v) => MetaValue::Real(v[0]),
                    TensorData::F32(v) => MetaValue::Real(f64::from(v[0])),
                };
                ck.metadata.push((key.to_string(), v));
            } else {
                ck.tensors.push((e.name.clone(), c.tensor(&e.name)?));
            }
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    fn expect_stage(&self, want: Stage) -> Result<()> {
        if self.stage != want {
            return Err(Error::invalid(
                "checkpoint",
                format!("expected a `{}` checkpoint, got `{}`", want.tag(), self.stage.tag()),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    ck.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path)?)
}

fn assign(params: Vec<&mut Param>, prefix: &str, ck: &Checkpoint) -> Result<()> {
    for (i, p) in params.into_iter().enumerate() {
        let name = format!("{prefix}.{i}");
        let t = ck.tensor(&name)?;
        if t.dims() != p.value.dims() {
            return Err(corrupt(
                "dims",
                format!("`{name}` has dims {:?}, model expects {:?}", t.dims(), p.value.dims()),
            ));
        }
        *p = Param::new(t.clone());
    }
    Ok(())
}

/// Digest of the autoencoder weights used to pair stage-2 checkpoints with
/// the stage-1 model they were trained on.
pub fn ae_digest(model: &AeModel) -> u64 {
    value_digest(model.params())
}

pub fn ae_checkpoint(model: &AeModel) -> Checkpoint {
    let arch = model.arch();
    let mut ck = Checkpoint::new(Stage::Ae);
    for (i, p) in model.encoder.net().params().into_iter().enumerate() {
        ck.tensors.push((format!("enc.{i}"), p.value.clone()));
    }
    ck.tensors.push(("codebook".into(), model.codebook.codes().clone()));
    for (i, p) in model.decoder.net().params().into_iter().enumerate() {
        ck.tensors.push((format!("dec.{i}"), p.value.clone()));
    }
    ck.metadata = vec![
        ("latent_channels".into(), MetaValue::Int(arch.latent_channels as i64)),
        ("downsample_factor".into(), MetaValue::Int(DOWNSAMPLE_FACTOR as i64)),
        ("codebook_size".into(), MetaValue::Int(arch.codebook_size as i64)),
        ("normalize_latent".into(), MetaValue::Int(i64::from(arch.normalize_latent))),
    ];
    ck
}

pub fn ae_from_checkpoint(ck: &Checkpoint) -> Result<AeModel> {
    ck.expect_stage(Stage::Ae)?;
    if ck.meta_usize("downsample_factor")? != DOWNSAMPLE_FACTOR {
        return Err(corrupt("metadata", "unsupported downsample_factor"));
    }
    let arch = AeArch {
        latent_channels: ck.meta_usize("latent_channels")?,
        codebook_size: ck.meta_usize("codebook_size")?,
        normalize_latent: ck.meta_int("normalize_latent")? != 0,
    };
    let mut model = AeModel::new(&arch, 0, false)?;
    assign(model.encoder.net_mut().params_mut(), "enc", ck)?;
    assign(model.decoder.net_mut().params_mut(), "dec", ck)?;
    let codes = ck.tensor("codebook")?;
    if codes.dims() != [arch.codebook_size, arch.latent_channels] {
        return Err(corrupt("dims", format!("codebook has dims {:?}", codes.dims())));
    }
    model.codebook = Codebook::from_codes(codes.clone())?;
    Ok(model)
}

/// A trained denoiser with the schedule and default sampler start it was
/// trained for.
#[derive(Clone, Debug)]
pub struct DiffBundle {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub beta_1: f64,
    pub beta_t: f64,
    pub t_start_default: usize,
    pub ae_digest: u64,
}

pub fn diff_checkpoint(b: &DiffBundle) -> Checkpoint {
    let cfg = b.denoiser.config();
    let mut ck = Checkpoint::new(Stage::Diff);
    for (i, p) in b.denoiser.params().into_iter().enumerate() {
        ck.tensors.push((format!("diff.{i}"), p.value.clone()));
    }
    ck.metadata = vec![
        ("latent_channels".into(), MetaValue::Int(cfg.latent_channels as i64)),
        ("downsample_factor".into(), MetaValue::Int(DOWNSAMPLE_FACTOR as i64)),
        ("base_width".into(), MetaValue::Int(cfg.base_width as i64)),
        ("groups".into(), MetaValue::Int(cfg.groups as i64)),
        ("T".into(), MetaValue::Int(b.schedule.t_max() as i64)),
        ("beta_1".into(), MetaValue::Real(b.beta_1)),
        ("beta_T".into(), MetaValue::Real(b.beta_t)),
        ("t_start_default".into(), MetaValue::Int(b.t_start_default as i64)),
        ("ae_digest".into(), MetaValue::Int(b.ae_digest as i64)),
    ];
    ck
}

pub fn diff_from_checkpoint(ck: &Checkpoint) -> Result<DiffBundle> {
    ck.expect_stage(Stage::Diff)?;
    let cfg = DenoiserConfig {
        latent_channels: ck.meta_usize("latent_channels")?,
        base_width: ck.meta_usize("base_width")?,
        groups: ck.meta_usize("groups")?,
    };
    let mut denoiser = Denoiser::new(cfg, &mut RngStream::new(0, 0))?;
    assign(denoiser.params_mut(), "diff", ck)?;
    let (beta_1, beta_t) = (ck.meta_real("beta_1")?, ck.meta_real("beta_T")?);
    let t_max = ck.meta_usize("T")?;
    Ok(DiffBundle {
        denoiser,
        schedule: make_schedule(t_max, beta_1, beta_t)?,
        beta_1,
        beta_t,
        t_start_default: ck.meta_usize("t_start_default")?,
        ae_digest: ck.meta_int("ae_digest")? as u64,
    })
}
