//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use s2ldm::autoencoder::{auto_loss_frozen, auto_loss_grad, AeArch, AeLossConfig, AeLossWeights, AeModel};
use s2ldm::diffnet::{grad_check, grad_check_coords, layer_grad_error, random_layer_cases};
use s2ldm::diffusion::{diff_loss, make_schedule, q_sample, Denoiser, DenoiserConfig};
use s2ldm::metrics::{nmae, nmse, psnr, ssim, SsimParams};
use s2ldm::phantom::{NormalizedImage, NormalizedPair, PhantomSpec};
use s2ldm::pipeline::dataset::{generate, image_container};
use s2ldm::pipeline::{
    ae_checkpoint, ae_from_checkpoint, diff_checkpoint, diff_from_checkpoint, evaluate_images, mean_latent_cosine,
    prepare_pairs, save_checkpoint, similarity_inside_outside, train_stage1, train_stage2, translate_all, Checkpoint,
    DiffBundle, RunConfig,
};
use s2ldm::rng::RngStream;
use s2ldm::similarity::{adaptive_sim_loss, dynamic_mask, SimilarityMap};
use s2ldm::tensor::Tensor;

type Outcome = (bool, String);

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.conf");
    let cfg = RunConfig::load(&path).expect("desk config");
    cfg.validate().expect("desk config is valid");
    cfg
}

fn random_image(seed: u64, size: usize) -> NormalizedImage {
    let t = RngStream::new(seed, 5).gaussian(&[1, size, size]).map(|v| (0.4 * v).tanh());
    NormalizedImage::from_tensor(&t).unwrap()
}

fn random_pair(seed: u64, size: usize) -> NormalizedPair {
    let ncct = random_image(seed, size);
    let bump = RngStream::new(seed, 6).gaussian(&[1, size, size]).map(|v| 0.3 * v);
    let cect = ncct.to_tensor().add(&bump).unwrap().map(|v| v.clamp(-1.0, 1.0));
    NormalizedPair {
        ncct,
        cect: NormalizedImage::from_tensor(&cect).unwrap(),
        contrast_mask: vec![false; size * size],
    }
}

fn sample_coords(n_total: usize, n: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n.min(n_total)).map(|_| rng.int_range(0, n_total as u64 - 1) as usize).collect()
}

/// Gradient checks of every layer kind, the similarity loss, the stage-1
/// loss and the masked denoising loss.
fn gradient_suite() -> Outcome {
    let mut worst_layer = 0.0f64;
    let cases = random_layer_cases(11);
    for (i, (kind, dims)) in cases.iter().enumerate() {
        let e = layer_grad_error(*kind, dims, 1000 + i as u64, FD_STEP).unwrap();
        worst_layer = worst_layer.max(e);
    }

    let mut worst_sim = 0.0f64;
    let mut rng = RngStream::new(21, 0);
    for k in 0..12u64 {
        // one channel makes the cosine a constant sign, with no gradient to check
        let c = rng.int_range(2, 6) as usize;
        let (h, w) = (rng.int_range(1, 5) as usize, rng.int_range(1, 5) as usize);
        let gamma = [0.0, 0.5, 1.0, 2.0][k as usize % 4];
        let a = rng.gaussian(&[c, h, w]);
        let b = rng.gaussian(&[c, h, w]);
        let ga = adaptive_sim_loss(&a, &b, gamma, 1e-7).unwrap().grad_a;
        let gb = adaptive_sim_loss(&a, &b, gamma, 1e-7).unwrap().grad_b;
        let ea = grad_check(|x| Ok((adaptive_sim_loss(x, &b, gamma, 1e-7)?.loss, ga.clone())), &a, FD_STEP).unwrap();
        let eb = grad_check(|x| Ok((adaptive_sim_loss(&a, x, gamma, 1e-7)?.loss, gb.clone())), &b, FD_STEP).unwrap();
        worst_sim = worst_sim.max(ea).max(eb);
    }

    let mut worst_auto = 0.0f64;
    for k in 0..10u64 {
        let arch = AeArch {
            latent_channels: [2, 4][k as usize % 2],
            codebook_size: 16,
            normalize_latent: k % 3 != 2,
        };
        let size = [8, 12, 16][k as usize % 3];
        let mut cfg = AeLossConfig {
            gamma: [1.0, 0.0, 2.0][k as usize % 3],
            hf_beta: [1.0, 0.0][k as usize % 2],
            ..AeLossConfig::default()
        };
        cfg.weights = AeLossWeights {
            lambda_r: 1.0,
            lambda_q: 1.0,
            lambda_s: [0.1, 1.0, 0.0][k as usize % 3],
            lambda_adv: if k >= 8 { 0.1 } else { 0.0 },
        };
        let mut m = AeModel::new(&arch, 40 + k, k >= 8).unwrap();
        let p = random_pair(60 + k, size);
        m.zero_grad();
        let (_, stop) = auto_loss_grad(&mut m, &p, &cfg, None).unwrap();
        let flat: Vec<(usize, usize)> = m
            .params()
            .iter()
            .enumerate()
            .flat_map(|(pi, q)| (0..q.value.len()).map(move |j| (pi, j)))
            .collect();
        let mut r = RngStream::new(80 + k, 0);
        let coords: Vec<(usize, usize)> = sample_coords(flat.len(), 120, &mut r).into_iter().map(|i| flat[i]).collect();
        let x0 = Tensor::new(&[coords.len()], coords.iter().map(|&(pi, j)| m.params()[pi].value.data()[j]).collect()).unwrap();
        let an = Tensor::new(&[coords.len()], coords.iter().map(|&(pi, j)| m.params()[pi].grad.data()[j]).collect()).unwrap();
        let base = m.clone();
        let e = grad_check(
            |x| {
                let mut probe = base.clone();
                for (i, &(pi, j)) in coords.iter().enumerate() {
                    probe.params_mut()[pi].value.data_mut()[j] = x.data()[i];
                }
                Ok((auto_loss_frozen(&p, &probe, &cfg, &stop)?.total, an.clone()))
            },
            &x0,
            FD_STEP,
        )
        .unwrap();
        worst_auto = worst_auto.max(e);
    }

    let mut worst_diff = 0.0f64;
    for k in 0..10u64 {
        let c = [1, 2, 3][k as usize % 3];
        let hw = [4, 8][k as usize % 2];
        let den = Denoiser::new(
            DenoiserConfig {
                latent_channels: c,
                base_width: 4,
                groups: 2,
            },
            &mut RngStream::new(200 + k, 0),
        )
        .unwrap();
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let e_n = RngStream::new(300 + k, 0).gaussian(&[c, hw, hw]);
        let e_c = RngStream::new(400 + k, 0).gaussian(&[c, hw, hw]);
        let tau = k % 10;
        let stream = RngStream::new(500 + k, 3);
        let base = diff_loss(&e_n, &e_c, tau, 10, 2.0, &den, &sched, &mut stream.clone()).unwrap();
        let mut r = RngStream::new(600 + k, 0);
        for pi in 0..den.params().len() {
            let x0 = den.params()[pi].value.clone();
            let g = base.grads[pi].clone();
            let coords = sample_coords(x0.len(), 8, &mut r);
            let e = grad_check_coords(
                |x| {
                    let mut probe = den.clone();
                    probe.params_mut()[pi].value = x.clone();
                    Ok((diff_loss(&e_n, &e_c, tau, 10, 2.0, &probe, &sched, &mut stream.clone())?.loss, g.clone()))
                },
                &x0,
                FD_STEP,
                &coords,
            )
            .unwrap();
            worst_diff = worst_diff.max(e);
        }
    }

    let worst = worst_layer.max(worst_sim).max(worst_auto).max(worst_diff);
    (
        worst < GRAD_TOL,
        format!(
            "max rel err: layers {worst_layer:.2e} ({} cases), similarity {worst_sim:.2e}, autoencoder {worst_auto:.2e}, denoiser {worst_diff:.2e}",
            cases.len()
        ),
    )
}

fn constant_sim_loss(s: f64, gamma: f64, floor: f64) -> f64 {
    // unit vectors at angle acos(s) at every location of a 2 x 3 x 4 latent
    let theta = s.clamp(-1.0, 1.0).acos();
    let hw = 12;
    let mut a = vec![0.0; 2 * hw];
    let mut b = vec![0.0; 2 * hw];
    for p in 0..hw {
        a[p] = 1.0;
        b[p] = theta.cos();
        b[hw + p] = theta.sin();
    }
    let a = Tensor::new(&[2, 3, 4], a).unwrap();
    let b = Tensor::new(&[2, 3, 4], b).unwrap();
    adaptive_sim_loss(&a, &b, gamma, floor).unwrap().loss
}

fn boundary_values() -> Outcome {
    let one = constant_sim_loss(1.0, 1.0, 1e-7);
    let zero = constant_sim_loss(0.0, 1.0, 1e-7);
    let minus = constant_sim_loss(-1.0, 1.0, 1e-7);
    let want_zero = 0.5 * 2f64.ln();
    let want_minus = -(1e-7f64).ln();
    let ok = one == 0.0 && (zero - want_zero).abs() < 1e-9 && (minus - 16.1181).abs() < 1e-3 && (minus - want_minus).abs() < 1e-9;
    (ok, format!("s=1: {one:e}, s=0: {zero:.12} (want {want_zero:.12}), s=-1: {minus:.6} (want 16.1181)"))
}

fn mask_saturation() -> Outcome {
    let mut rng = RngStream::new(31, 0);
    let mut saturated = true;
    let mut checked = 0;
    for total in [1u64, 2, 3, 7, 10, 25, 100] {
        let vals: Vec<f64> = (0..64)
            .map(|i| match i {
                0 => -1.0,
                1 => 1.0,
                2 => 0.0,
                _ => rng.uniform_range(-1.0, 1.0),
            })
            .collect();
        let sim = SimilarityMap::new(8, 8, vals).unwrap();
        for tau in 0..=total {
            if 2 * tau >= total {
                let m = dynamic_mask(&sim, tau, total, 2.0).unwrap();
                saturated &= m.values().iter().all(|v| v.to_bits() == 1f64.to_bits());
                checked += 1;
            }
        }
    }
    let s_grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let total = 10u64;
    let mut monotone = true;
    for &s in &s_grid {
        let sim = SimilarityMap::new(1, 1, vec![s]).unwrap();
        let vals: Vec<f64> = (0..total)
            .map(|tau| dynamic_mask(&sim, tau, total, 2.0).unwrap().values()[0])
            .collect();
        monotone &= vals.windows(2).all(|w| w[1] >= w[0]);
    }
    (
        saturated && monotone,
        format!(
            "all-ones on {checked} (tau, T) settings with tau/T >= 1/2; monotone over {} grid points",
            s_grid.len() * total as usize
        ),
    )
}

fn forward_statistics() -> Outcome {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut prod = 1.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    let ab = sched.alpha_bar(1000).unwrap();
    let product_ok = (ab - prod).abs() < 1e-12;

    let n = 10_000;
    let mut within = true;
    let mut worst = 0.0f64;
    let z0 = Tensor::new(&[1, 1, 2], vec![0.8, -1.3]).unwrap();
    for t in [1usize, 10, 250, 500, 1000] {
        let a = sched.alpha_bar(t).unwrap();
        let mut rng = RngStream::new(41, t as u64);
        for (j, &z) in z0.data().iter().enumerate() {
            let mut xs = Vec::with_capacity(n);
            for _ in 0..n {
                let eps = rng.gaussian(&[1, 1, 2]);
                xs.push(q_sample(&z0, t, &eps, &sched).unwrap().data()[j]);
            }
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (mu, v) = (a.sqrt() * z, 1.0 - a);
            let se_mean = (v / n as f64).sqrt();
            let se_var = v * (2.0 / (n - 1) as f64).sqrt();
            let zm = (mean - mu).abs() / se_mean;
            let zv = (var - v).abs() / se_var;
            worst = worst.max(zm).max(zv);
            within &= zm < 3.0 && zv < 3.0;
        }
    }
    (
        product_ok && within,
        format!("alpha_bar_1000 {ab:.15e} vs product {prod:.15e}; worst Monte Carlo deviation {worst:.2} SE"),
    )
}

/// Mean SSIM by explicit summation over every window with 2-D Gaussian weights.
fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let c = 5.0;
    let mut wts = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            wts[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = wts.iter().sum();
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let q = wts[i * k + j] / z;
                    mx += q * x[(oy + i) * w + ox + j];
                    my += q * y[(oy + i) * w + ox + j];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let q = wts[i * k + j] / z;
                    let dx = x[(oy + i) * w + ox + j] - mx;
                    let dy = y[(oy + i) * w + ox + j] - my;
                    vx += q * dx * dx;
                    vy += q * dy * dy;
                    cov += q * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn metric_oracles() -> Outcome {
    let n = 32 * 32;
    let mut rng = RngStream::new(51, 0);
    let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| (0.7 * v + 0.2 * rng.normal()).clamp(-1.0, 1.0)).collect();
    let got = ssim(&x, &y, 32, 32, &SsimParams::default()).unwrap();
    let want = ssim_direct(&x, &y, 32, 32);
    let ssim_ok = (got - want).abs() < 1e-6;

    // every pixel off by 0.2: MSE 0.04, range 2, 10 log10(4 / 0.04) = 20 dB
    let t: Vec<f64> = (0..n).map(|i| -0.5 + (i % 7) as f64 * 0.1).collect();
    let p: Vec<f64> = t.iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 0.2 } else { v - 0.2 }).collect();
    let db = psnr(&p, &t, 2.0).unwrap().db;
    let zeros = vec![0.0; n];
    let (ma, ms) = (nmae(&zeros, &t).unwrap(), nmse(&zeros, &t).unwrap());
    // |1-1|+|2-2|+|3-3|+|5-4| over 1+2+3+4, and 1 over 1+4+9+16
    let (fa, fs) = (
        nmae(&[1.0, 2.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
        nmse(&[1.0, 2.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let fixtures_ok = (db - 20.0).abs() < 1e-9
        && (ma - 1.0).abs() < 1e-9
        && (ms - 1.0).abs() < 1e-9
        && (fa - 0.1).abs() < 1e-9
        && (fs - 1.0 / 30.0).abs() < 1e-9;
    (
        ssim_ok && fixtures_ok,
        format!(
            "ssim {got:.12} vs direct {want:.12}; psnr {db:.12} dB; pred=0 nmae {ma} nmse {ms}; nmae {fa} nmse {fs:.12}"
        ),
    )
}

struct DeskRun {
    cfg: RunConfig,
    val: Vec<NormalizedPair>,
    ae: AeModel,
    bundle: DiffBundle,
}

fn desk_run() -> (DeskRun, Outcome) {
    let start = Instant::now();
    let cfg = desk_config();
    let samples = generate(cfg.n_pairs, cfg.image_size, cfg.seed, &PhantomSpec::default()).unwrap();
    let (train, val) = prepare_pairs(&samples, &cfg).unwrap();
    let s1 = train_stage1(&cfg, &train).unwrap();
    assert!(s1.diverged.is_none(), "stage 1 diverged: {:?}", s1.diverged);
    let s2 = train_stage2(&cfg, &train, &s1.model).unwrap();
    assert!(s2.diverged.is_none(), "stage 2 diverged: {:?}", s2.diverged);
    let inputs: Vec<&NormalizedImage> = val.iter().map(|p| &p.ncct).collect();
    let targets: Vec<&NormalizedImage> = val.iter().map(|p| &p.cect).collect();
    let preds = translate_all(&inputs, &s1.model, &s2.bundle, cfg.t_start, cfg.seed).unwrap();
    let model = evaluate_images(&preds, &targets).unwrap();
    let copies: Vec<NormalizedImage> = inputs.iter().map(|x| (*x).clone()).collect();
    let base = evaluate_images(&copies, &targets).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let psnr_ok = model.psnr_db > base.psnr_db;
    let ssim_ok = model.ssim > base.ssim;
    let detail = format!(
        "{} held-out pairs, t_start {}: PSNR {:.3} vs identity {:.3} ({}); SSIM {:.4} vs identity {:.4} ({}); {:.0} s",
        val.len(),
        cfg.t_start,
        model.psnr_db,
        base.psnr_db,
        if psnr_ok { "beats" } else { "does not beat" },
        model.ssim,
        base.ssim,
        if ssim_ok { "beats" } else { "does not beat" },
        secs
    );
    let run = DeskRun {
        val,
        ae: s1.model,
        bundle: s2.bundle,
        cfg,
    };
    let shape_ok = val_len_ok(&run);
    (run, (psnr_ok && ssim_ok && shape_ok, detail))
}

fn val_len_ok(run: &DeskRun) -> bool {
    run.cfg.n_pairs == 40 && run.cfg.image_size == 64 && run.val.len() == 8 && run.cfg.t_max == 100
}

fn ablation() -> Outcome {
    let base = RunConfig {
        s1_steps: 600,
        ..desk_config()
    };
    let samples = generate(base.n_pairs, base.image_size, base.seed, &PhantomSpec::default()).unwrap();
    let (train, val) = prepare_pairs(&samples, &base).unwrap();
    let without = RunConfig {
        lambda_s: 0.0,
        ..base.clone()
    };
    let a0 = train_stage1(&without, &train).unwrap().model;
    let a1 = train_stage1(&base, &train).unwrap().model;
    let c0 = mean_latent_cosine(&a0, &val).unwrap();
    let c1 = mean_latent_cosine(&a1, &val).unwrap();
    let (inside, outside) = similarity_inside_outside(&a1, &val).unwrap();
    (
        c1 > c0 && inside < outside,
        format!(
            "{} steps: held-out cosine {c1:.6} (lambda_s {}) vs {c0:.6} (lambda_s 0); inside mask {inside:.6} vs outside {outside:.6}",
            base.s1_steps, base.lambda_s
        ),
    )
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_s2ldm"))
}

fn inference_independence(run: &DeskRun) -> Outcome {
    let help = Command::new(bin()).args(["translate", "--help"]).output().unwrap();
    let help = String::from_utf8_lossy(&help.stdout).to_lowercase();
    let no_cect_arg = !help.contains("cect") && help.contains("--in");

    let inputs: Vec<&NormalizedImage> = run.val.iter().map(|p| &p.ncct).collect();
    let a = translate_all(&inputs, &run.ae, &run.bundle, run.cfg.t_start, 5).unwrap();
    let b = translate_all(&inputs, &run.ae, &run.bundle, run.cfg.t_start, 5).unwrap();
    let bits = |v: &[NormalizedImage]| -> Vec<u64> { v.iter().flat_map(|x| x.pixels().iter().map(|p| p.to_bits())).collect() };
    let lib_same = bits(&a) == bits(&b);

    // the CLI on a container that holds only the non-contrast image
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_checkpoint(&d.join("ae.s2t1"), &ae_checkpoint(&run.ae)).unwrap();
    save_checkpoint(&d.join("diff.s2t1"), &diff_checkpoint(&run.bundle)).unwrap();
    image_container(&run.val[0].ncct).unwrap().save(&d.join("x.s2t1")).unwrap();
    let mut outs = Vec::new();
    for name in ["y1.s2t1", "y2.s2t1"] {
        let st = Command::new(bin())
            .arg("translate")
            .arg("--in")
            .arg(d.join("x.s2t1"))
            .arg("--ae")
            .arg(d.join("ae.s2t1"))
            .arg("--diff")
            .arg(d.join("diff.s2t1"))
            .args(["--seed", "9", "--out"])
            .arg(d.join(name))
            .env("RUST_LOG", "error")
            .status()
            .unwrap();
        assert!(st.success());
        outs.push(std::fs::read(d.join(name)).unwrap());
    }
    let cli_same = outs[0] == outs[1];
    let want = translate_all(&[&run.val[0].ncct], &run.ae, &run.bundle, run.cfg.t_start, 9).unwrap();
    let cli_matches = outs[0] == image_container(&want[0]).unwrap().to_bytes();
    (
        no_cect_arg && lib_same && cli_same && cli_matches,
        format!(
            "translate help has no contrast-image argument: {no_cect_arg}; repeated library runs bit-identical: {lib_same}; CLI runs byte-identical: {cli_same}, equal to library: {cli_matches}"
        ),
    )
}

fn small_config() -> RunConfig {
    RunConfig {
        seed: 13,
        image_size: 32,
        n_pairs: 10,
        latent_channels: 4,
        codebook_size: 16,
        s1_steps: 20,
        s1_batch_size: 2,
        s1_lr: 1e-3,
        s2_epochs: 4,
        s2_steps_per_epoch: 5,
        s2_batch_size: 2,
        s2_lr: 1e-3,
        t_max: 20,
        t_start: 8,
        denoiser_width: 4,
        denoiser_groups: 2,
        ..RunConfig::default()
    }
}

fn pipeline_report(cfg: &RunConfig) -> (String, Checkpoint, Checkpoint) {
    let samples = generate(cfg.n_pairs, cfg.image_size, cfg.seed, &PhantomSpec::default()).unwrap();
    let (train, val) = prepare_pairs(&samples, cfg).unwrap();
    let ae = train_stage1(cfg, &train).unwrap().model;
    let bundle = train_stage2(cfg, &train, &ae).unwrap().bundle;
    let report = report_for(&val, &ae, &bundle, cfg);
    (report, ae_checkpoint(&ae), diff_checkpoint(&bundle))
}

fn report_for(val: &[NormalizedPair], ae: &AeModel, bundle: &DiffBundle, cfg: &RunConfig) -> String {
    let inputs: Vec<&NormalizedImage> = val.iter().map(|p| &p.ncct).collect();
    let targets: Vec<&NormalizedImage> = val.iter().map(|p| &p.cect).collect();
    let preds = translate_all(&inputs, ae, bundle, cfg.t_start, cfg.seed).unwrap();
    evaluate_images(&preds, &targets).unwrap().to_json().unwrap()
}

fn determinism_and_persistence() -> Outcome {
    let cfg = small_config();
    let (r1, ae1, diff1) = pipeline_report(&cfg);
    let (r2, ae2, diff2) = pipeline_report(&cfg);
    let repeat_same = r1 == r2 && ae1.to_bytes().unwrap() == ae2.to_bytes().unwrap();
    let diff_same = diff1.to_bytes().unwrap() == diff2.to_bytes().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (pa, pd) = (dir.path().join("ae.s2t1"), dir.path().join("diff.s2t1"));
    save_checkpoint(&pa, &ae1).unwrap();
    save_checkpoint(&pd, &diff1).unwrap();
    let ae = ae_from_checkpoint(&s2ldm::pipeline::load_checkpoint(&pa).unwrap()).unwrap();
    let bundle = diff_from_checkpoint(&s2ldm::pipeline::load_checkpoint(&pd).unwrap()).unwrap();
    let samples = generate(cfg.n_pairs, cfg.image_size, cfg.seed, &PhantomSpec::default()).unwrap();
    let (_, val) = prepare_pairs(&samples, &cfg).unwrap();
    let r3 = report_for(&val, &ae, &bundle, &cfg);
    let persisted = r3 == r1;
    (
        repeat_same && diff_same && persisted,
        format!("repeated runs give identical reports and checkpoints: {}; report after checkpoint round-trip identical: {persisted}", repeat_same && diff_same),
    )
}

fn main() -> ExitCode {
    // ACCEPTANCE_ONLY=1,2,5 restricts the run while iterating locally
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} criterion {n} ({name}): {} [{secs:.1} s]", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((n, name, o, secs));
    };
    timed(1, "gradient suite", &mut gradient_suite);
    timed(2, "similarity loss boundary values", &mut boundary_values);
    timed(3, "dynamic mask saturation", &mut mask_saturation);
    timed(4, "forward diffusion statistics", &mut forward_statistics);
    timed(5, "metric oracles", &mut metric_oracles);
    let mut desk = None;
    timed(6, "desk-scale translation", &mut || {
        let (run, o) = desk_run();
        desk = Some(run);
        o
    });
    timed(7, "similarity loss ablation", &mut ablation);
    if let Some(run) = desk {
        timed(8, "inference independence", &mut || inference_independence(&run));
    }
    timed(9, "determinism and persistence", &mut determinism_and_persistence);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!("{} of {} criteria pass", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
