use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use s2ldm::autoencoder::{AeArch, AeModel};
use s2ldm::diffusion::{make_schedule, Denoiser, DenoiserConfig};
use s2ldm::pipeline::{ae_checkpoint, ae_digest, diff_checkpoint, save_checkpoint, translate_all, DiffBundle};
use s2ldm::phantom::NormalizedImage;
use s2ldm::rng::RngStream;
use s2ldm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(s2ldm_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn write_models(dir: &Path) -> (AeModel, DiffBundle) {
    let arch = AeArch {
        latent_channels: 4,
        codebook_size: 16,
        normalize_latent: true,
    };
    let ae = AeModel::new(&arch, 3, false).unwrap();
    let den = Denoiser::new(
        DenoiserConfig {
            latent_channels: 4,
            base_width: 4,
            groups: 2,
        },
        &mut RngStream::new(3, 9),
    )
    .unwrap();
    let bundle = DiffBundle {
        denoiser: den,
        schedule: make_schedule(20, 1e-4, 0.02).unwrap(),
        beta_1: 1e-4,
        beta_t: 0.02,
        t_start_default: 10,
        ae_digest: ae_digest(&ae),
    };
    save_checkpoint(&dir.join("ae.s2t1"), &ae_checkpoint(&ae)).unwrap();
    save_checkpoint(&dir.join("diff.s2t1"), &diff_checkpoint(&bundle)).unwrap();
    (ae, bundle)
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(s2ldm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn phantom_and_metrics() {
    let n = 32 * 32;
    let (mut a, mut b, mut m) = (vec![0.0; n], vec![0.0; n], vec![0u8; n]);
    let st = unsafe { s2ldm_phantom_pair(5, 32, a.as_mut_ptr(), b.as_mut_ptr(), m.as_mut_ptr()) };
    assert_eq!(st, S2Status::Ok);
    assert!(m.iter().any(|&x| x == 1));
    for i in 0..n {
        if m[i] == 0 {
            assert_eq!(a[i], b[i]);
        }
    }
    assert!((0..n).any(|i| m[i] == 1 && b[i] > a[i]));
    let mut out = S2Metrics::default();
    let st = unsafe { s2ldm_metrics(b.as_ptr(), b.as_ptr(), 32, 32, &mut out) };
    assert_eq!(st, S2Status::Ok);
    assert_eq!(out.psnr_exact, 1);
    assert_eq!(out.nmae, 0.0);
    assert!((out.ssim - 1.0).abs() < 1e-12);
    let st = unsafe { s2ldm_metrics(a.as_ptr(), b.as_ptr(), 32, 32, &mut out) };
    assert_eq!(st, S2Status::Ok);
    assert_eq!(out.psnr_exact, 0);
    assert!(out.nmae > 0.0 && out.ssim < 1.0);
}

#[test]
fn error_codes_and_messages() {
    let mut out = S2Metrics::default();
    let x = [0.0; 4];
    let st = unsafe { s2ldm_metrics(ptr::null(), x.as_ptr(), 2, 2, &mut out) };
    assert_eq!(st, S2Status::NullPointer);
    assert!(last_error().contains("pred"));
    let st = unsafe { s2ldm_metrics(x.as_ptr(), x.as_ptr(), 0, 2, &mut out) };
    assert_eq!(st, S2Status::InvalidArgument);
    let st = unsafe { s2ldm_phantom_pair(1, 8, [0.0; 64].as_mut_ptr(), [0.0; 64].as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, S2Status::InvalidArgument);
    assert!(last_error().contains("size"));

    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("missing.s2t1"));
    let mut model = ptr::null_mut();
    let st = unsafe { s2ldm_model_load(missing.as_ptr(), missing.as_ptr(), &mut model) };
    assert_eq!(st, S2Status::Io);
    assert!(model.is_null());

    let junk = dir.path().join("junk.s2t1");
    std::fs::write(&junk, b"S2T1\x02\x00\x00\x00").unwrap();
    let junk = cpath(&junk);
    let st = unsafe { s2ldm_model_load(junk.as_ptr(), junk.as_ptr(), &mut model) };
    assert_eq!(st, S2Status::UnsupportedVersion);
    unsafe { s2ldm_model_free(ptr::null_mut()) };
}

#[test]
fn translate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (ae, bundle) = write_models(dir.path());
    let (pa, pd) = (cpath(&dir.path().join("ae.s2t1")), cpath(&dir.path().join("diff.s2t1")));
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { s2ldm_model_load(pa.as_ptr(), pd.as_ptr(), &mut model) }, S2Status::Ok);
    assert!(last_error().is_empty());
    let mut t0 = 0usize;
    assert_eq!(unsafe { s2ldm_model_default_t_start(model, &mut t0) }, S2Status::Ok);
    assert_eq!(t0, 10);

    let mut r = RngStream::new(1, 2);
    let x: Vec<f64> = (0..256).map(|_| r.uniform_range(-1.0, 1.0)).collect();
    let mut y1 = vec![0.0; 256];
    let mut y2 = vec![0.0; 256];
    assert_eq!(unsafe { s2ldm_translate(model, x.as_ptr(), 16, 16, -1, 4, y1.as_mut_ptr()) }, S2Status::Ok);
    assert_eq!(unsafe { s2ldm_translate(model, x.as_ptr(), 16, 16, -1, 4, y2.as_mut_ptr()) }, S2Status::Ok);
    assert_eq!(y1, y2);

    let img = NormalizedImage::new(16, 16, x.clone()).unwrap();
    let want = translate_all(&[&img], &ae, &bundle, 10, 4).unwrap();
    assert_eq!(want[0].pixels(), &y1[..]);

    let bad = vec![2.0; 256];
    assert_eq!(
        unsafe { s2ldm_translate(model, bad.as_ptr(), 16, 16, -1, 4, y1.as_mut_ptr()) },
        S2Status::InvalidArgument
    );
    assert_eq!(
        unsafe { s2ldm_translate(model, x.as_ptr(), 16, 16, 50, 4, y1.as_mut_ptr()) },
        S2Status::InvalidArgument
    );
    unsafe { s2ldm_model_free(model) };
}

#[test]
fn stage_mismatch_is_invalid_argument() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path());
    let (pa, pd) = (cpath(&dir.path().join("ae.s2t1")), cpath(&dir.path().join("diff.s2t1")));
    let mut model = ptr::null_mut();
    let st = unsafe { s2ldm_model_load(pd.as_ptr(), pa.as_ptr(), &mut model) };
    assert_eq!(st, S2Status::InvalidArgument);
    assert!(last_error().contains("ae"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/s2ldm.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "s2ldm_last_error",
        "s2ldm_version",
        "s2ldm_model_load",
        "s2ldm_model_free",
        "s2ldm_model_default_t_start",
        "s2ldm_translate",
        "s2ldm_metrics",
        "s2ldm_phantom_pair",
        "typedef struct S2Model S2Model",
        "S2_STATUS_CORRUPT_CHECKPOINT = 3",
    ] {
        assert!(text.contains(sym), "missing {sym}");
    }
    // a syntax-only C compile, skipped when no compiler is installed
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
