use s2ldm::autoencoder::{auto_loss, AeModel};
use s2ldm::phantom::{normalize_pair, NormalizedPair, PhantomSpec};
use s2ldm::pipeline::dataset::generate;
use s2ldm::pipeline::{ae_digest, epoch_mask_mean, latent_pairs, train_stage1, train_stage2, RunConfig};

fn pairs(cfg: &RunConfig, n: usize) -> Vec<NormalizedPair> {
    generate(n, cfg.image_size, cfg.seed, &PhantomSpec::default())
        .unwrap()
        .iter()
        .map(|s| normalize_pair(s, cfg.window_width, cfg.window_level).unwrap())
        .collect()
}

fn mean_total(model: &AeModel, data: &[NormalizedPair], cfg: &RunConfig) -> f64 {
    let lc = cfg.loss_config();
    data.iter().map(|p| auto_loss(p, model, &lc).unwrap().total).sum::<f64>() / data.len() as f64
}

#[test]
fn stage1_reduces_the_loss() {
    let cfg = RunConfig {
        seed: 7,
        image_size: 32,
        n_pairs: 16,
        s1_steps: 500,
        ..RunConfig::default()
    };
    let data = pairs(&cfg, 16);
    let init = AeModel::new(&cfg.arch(), cfg.seed, false).unwrap();
    let out = train_stage1(&cfg, &data).unwrap();
    assert!(out.diverged.is_none());
    assert_eq!(out.log.len(), 500);
    let (before, after) = (mean_total(&init, &data, &cfg), mean_total(&out.model, &data, &cfg));
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn similarity_weight_does_not_touch_step_zero_reconstruction() {
    let base = RunConfig {
        seed: 7,
        image_size: 32,
        n_pairs: 10,
        s1_steps: 1,
        ..RunConfig::default()
    };
    let data = pairs(&base, 10);
    let with = train_stage1(&RunConfig { lambda_s: 0.1, ..base.clone() }, &data).unwrap();
    let without = train_stage1(&RunConfig { lambda_s: 0.0, ..base }, &data).unwrap();
    assert_eq!(with.log[0].rec.to_bits(), without.log[0].rec.to_bits());
    assert_eq!(with.log[0].quan.to_bits(), without.log[0].quan.to_bits());
    assert!(with.log[0].total > without.log[0].total);
}

#[test]
fn stage2_mask_log_saturates_in_second_half() {
    let cfg = RunConfig {
        seed: 3,
        image_size: 32,
        n_pairs: 10,
        latent_channels: 4,
        codebook_size: 16,
        s1_steps: 5,
        s2_epochs: 10,
        s2_steps_per_epoch: 1,
        s2_batch_size: 1,
        t_max: 20,
        t_start: 5,
        alpha: 2.0,
        denoiser_width: 4,
        denoiser_groups: 2,
        ..RunConfig::default()
    };
    let data = pairs(&cfg, 10);
    let ae = train_stage1(&cfg, &data).unwrap().model;
    let digest = ae_digest(&ae);
    let a = train_stage2(&cfg, &data, &ae).unwrap();
    let b = train_stage2(&cfg, &data, &ae).unwrap();
    assert_eq!(ae_digest(&ae), digest);
    let losses = |o: &s2ldm::pipeline::Stage2Outcome| o.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));

    let latents = latent_pairs(&ae, &data).unwrap();
    assert_eq!(a.epochs.len(), 10);
    for w in a.epochs.windows(2) {
        assert!(w[1].mask_mean >= w[0].mask_mean);
    }
    for e in &a.epochs {
        let again = epoch_mask_mean(&latents, e.epoch, 10, 2.0).unwrap();
        assert!((again - e.mask_mean).abs() < 1e-6);
        if e.epoch >= 5 {
            assert_eq!(e.mask_mean, 1.0, "epoch {}", e.epoch);
        }
    }
    assert!(a.epochs[0].mask_mean < 1.0);
}
