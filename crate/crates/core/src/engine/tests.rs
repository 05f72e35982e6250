use super::*;
use crate::branches::{fidelity_step, prior_step, FidelityConfig};
use crate::controller::ControllerConfig;
use crate::metrics::{psnr, Psnr};
use crate::ops::{make_phantom, make_sampling_mask, ForwardOperator, MaskKind, PhantomKind};
use approx::assert_abs_diff_eq;

fn phantom(n: usize) -> Tensor2D {
    make_phantom(PhantomKind::SheppLogan, n).unwrap()
}

fn masked_obs(n: usize, seed: u64) -> Observation {
    let mask = make_sampling_mask(MaskKind::RandomUniform, 0.5, n, seed).unwrap();
    ForwardOperator::pixel_mask(mask, 0.02, seed).unwrap().degrade(&phantom(n)).unwrap()
}

fn short(steps: usize) -> RunConfig {
    RunConfig { steps, ..RunConfig::default() }
}

#[test]
fn noiseless_identity_without_prior_is_exact() {
    let x = phantom(32);
    let obs = ForwardOperator::identity(32, 32, 0.0, 0).unwrap().degrade(&x).unwrap();
    for preset in Preset::ALL {
        let mut cfg = short(10).with_preset(preset);
        cfg.prior.strength = 0.0;
        let rec = run(&obs, &cfg, None).unwrap();
        assert_eq!(rec.final_image, x, "{preset}");
        assert_eq!(rec.final_metrics.unwrap().psnr, Psnr::Infinite);
    }
}

#[test]
fn noiseless_identity_with_prior_degrades_with_lambda() {
    // The smoothing prior moves an exact input, so more prior means further away.
    let x = phantom(32);
    let obs = ForwardOperator::identity(32, 32, 0.0, 0).unwrap().degrade(&x).unwrap();
    let psnrs: Vec<f64> = Preset::ALL
        .iter()
        .map(|&p| run(&obs, &short(20).with_preset(p), None).unwrap().final_metrics.unwrap().psnr.to_f64())
        .collect();
    assert!(psnrs[0] > 30.0, "{psnrs:?}");
    assert!(psnrs[0] >= psnrs[1] && psnrs[1] >= psnrs[2], "{psnrs:?}");
}

#[test]
fn saturated_alpha_matches_fidelity_only_iteration() {
    let obs = masked_obs(32, 3);
    let mut cfg = short(15);
    cfg.controller = ControllerConfig {
        beta1: 0.0,
        beta2: 0.0,
        beta3: 50.0,
        lambda: 1.0,
        ..ControllerConfig::default()
    };
    cfg.fidelity = FidelityConfig { eta: 0.6, inner_iters: 2 };
    let rec = run(&obs, &cfg, None).unwrap();

    // z*₁ is the backprojection, then one fidelity update per further step
    let mut z = obs.backprojection().unwrap();
    for _ in 1..cfg.steps {
        z = fidelity_step(&z, &obs, &cfg.fidelity).unwrap();
    }
    let want = decode(&z);
    for (a, b) in rec.final_image.data().iter().zip(want.data()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
    }
}

#[test]
fn fixed_alpha_endpoints_reduce_to_single_branch_iterations() {
    let obs = masked_obs(32, 4);
    let mut cfg = short(8);
    cfg.controller.alpha_fixed = Some(1.0);
    let rec = run(&obs, &cfg, None).unwrap();
    let mut z = obs.backprojection().unwrap();
    for _ in 1..cfg.steps {
        z = fidelity_step(&z, &obs, &cfg.fidelity).unwrap();
    }
    assert_eq!(rec.final_image, decode(&z));

    cfg.controller.alpha_fixed = Some(0.0);
    let rec = run(&obs, &cfg, None).unwrap();
    let prior = member_prior(&cfg, 0);
    let mut z = prior_step(&obs.backprojection().unwrap(), &prior, 0).unwrap();
    for t in 2..=cfg.steps {
        z = prior_step(&z, &prior, t).unwrap();
    }
    assert_eq!(rec.final_image, decode(&z));
}

#[test]
fn fused_latent_matches_recorded_alpha() {
    let obs = masked_obs(32, 5);
    let rec = run(&obs, &short(6), None).unwrap();
    for s in rec.steps.iter().skip(1) {
        let m = s.maps.as_ref().unwrap();
        let want = fuse(&s.state.z_f, &s.state.z_p, &m.alpha).unwrap();
        assert_eq!(want, s.state.z_star);
        assert!(m.alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

#[test]
fn first_step_uses_initial_uncertainty() {
    let obs = masked_obs(32, 6);
    let rec = run(&obs, &short(3), None).unwrap();
    let u1 = &rec.step(1).unwrap().maps.as_ref().unwrap().uncertainty;
    assert!(u1.data().iter().all(|&u| u == 1.0));
    let u2 = &rec.step(2).unwrap().maps.as_ref().unwrap().uncertainty;
    assert!(u2.data().iter().any(|&u| u < 1.0));
}

#[test]
fn conservative_alpha_exceeds_enhancement_at_every_step() {
    let obs = masked_obs(32, 7);
    let cons = run(&obs, &short(20).with_preset(Preset::Conservative), None).unwrap();
    let enh = run(&obs, &short(20).with_preset(Preset::Enhancement), None).unwrap();
    for (a, b) in cons.steps.iter().zip(&enh.steps).skip(1) {
        assert_eq!(a.step, b.step);
        assert!(a.mean_alpha().unwrap() > b.mean_alpha().unwrap(), "step {}", a.step);
    }
}

#[test]
fn runs_are_bitwise_deterministic() {
    let obs = masked_obs(32, 8);
    let cfg = short(12).with_preset(Preset::Balanced);
    let a = run(&obs, &cfg, None).unwrap();
    let b = run(&obs, &cfg, None).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    a.write_dir(dir.path().join("a")).unwrap();
    b.write_dir(dir.path().join("b")).unwrap();
    assert_dirs_identical(&dir.path().join("a"), &dir.path().join("b"));
}

pub(crate) fn assert_dirs_identical(a: &std::path::Path, b: &std::path::Path) {
    let mut left: Vec<_> = walk(a).into_iter().map(|p| p.strip_prefix(a).unwrap().to_path_buf()).collect();
    let mut right: Vec<_> = walk(b).into_iter().map(|p| p.strip_prefix(b).unwrap().to_path_buf()).collect();
    left.sort();
    right.sort();
    assert_eq!(left, right);
    for rel in left {
        assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap(), "{rel:?}");
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn run_directory_layout() {
    let obs = masked_obs(32, 9);
    let rec = run(&obs, &short(4), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rec.write_dir(dir.path()).unwrap();
    for f in ["config.echo", "final.ct2", "final.pgm", "metrics.csv", "steering.trace", "input.ct2"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    for t in 1..=4 {
        for f in ["zstar", "alpha", "r", "u"] {
            assert!(dir.path().join(format!("steps/{t}/{f}.ct2")).is_file());
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,psnr,ssim,rmse,residual");
    assert_eq!(lines.len(), 6);
    let echo = std::fs::read_to_string(dir.path().join("config.echo")).unwrap();
    assert_eq!(RunConfig::parse(&echo).unwrap(), rec.config);
    let last = crate::io::read_ct2(dir.path().join("steps/4/zstar.ct2")).unwrap();
    assert_eq!(decode(&last), crate::io::read_ct2(dir.path().join("final.ct2")).unwrap());
}

#[test]
fn sparse_recording_keeps_last_step() {
    let obs = masked_obs(32, 10);
    let cfg = RunConfig { record_every: Some(4), ..short(10) };
    let rec = run(&obs, &cfg, None).unwrap();
    let steps: Vec<usize> = rec.steps.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![0, 4, 8, 10]);
}

#[test]
fn steering_leaves_the_past_untouched() {
    let obs = masked_obs(32, 11);
    let cfg = short(12).with_preset(Preset::Enhancement);
    let plain = run(&obs, &cfg, None).unwrap();
    let trace = SteeringTrace {
        commands: vec![SteeringCommand { new_lambda: 0.0, effective_from_step: 6 }],
        finalized_at: None,
    };
    let steered = run(&obs, &cfg, Some(&trace)).unwrap();
    for (a, b) in plain.steps.iter().zip(&steered.steps) {
        if a.step < 6 {
            assert_eq!(a, b);
        } else {
            assert!(b.mean_alpha().unwrap() > a.mean_alpha().unwrap(), "step {}", a.step);
            assert_eq!(b.lambda, 0.0);
        }
    }
    assert_eq!(steered.steering, trace);
}

#[test]
fn live_session_replays_offline() {
    let obs = masked_obs(32, 12);
    let cfg = short(10).with_preset(Preset::Balanced);
    let mut live = Session::new(obs.clone(), &cfg).unwrap();
    for _ in 0..3 {
        live.step().unwrap();
    }
    live.steer(SteeringCommand { new_lambda: 0.9, effective_from_step: 4 }).unwrap();
    live.step().unwrap();
    live.step().unwrap();
    live.steer(SteeringCommand { new_lambda: 0.2, effective_from_step: 6 }).unwrap();
    live.step().unwrap();
    live.step().unwrap();
    let live = live.finish().unwrap();
    assert_eq!(live.steering.finalized_at, Some(7));
    assert_eq!(live.last_step(), 7);

    let replay = run(&obs, &cfg, Some(&live.steering)).unwrap();
    assert_eq!(replay, live);
}

#[test]
fn steering_validation() {
    let obs = masked_obs(32, 13);
    let mut s = Session::new(obs, &short(5)).unwrap();
    s.step().unwrap();
    let err = s.steer(SteeringCommand { new_lambda: 1.5, effective_from_step: 2 }).unwrap_err();
    assert_eq!(err.config_key(), Some("controller.lambda"));
    assert!(matches!(
        s.steer(SteeringCommand { new_lambda: 0.5, effective_from_step: 1 }),
        Err(Error::State(_))
    ));
    while !s.is_done() {
        s.step().unwrap();
    }
    assert!(matches!(s.step(), Err(Error::State(_))));
}

#[test]
fn ensemble_without_noise_has_zero_spread() {
    let obs = masked_obs(32, 14);
    let (rec, std) = run_ensemble(&obs, &short(5), 3).unwrap();
    assert!(std.data().iter().all(|&v| v == 0.0));
    assert_eq!(rec.ensemble_std.as_ref(), Some(&std));
}

#[test]
fn two_member_spread_matches_hand_computation() {
    let obs = masked_obs(32, 15);
    let mut cfg = short(6);
    cfg.prior.noise_inject = 0.02;
    cfg.seed = 40;
    let (rec, std) = run_ensemble(&obs, &cfg, 2).unwrap();
    let a = run(&obs, &cfg, None).unwrap();
    let b = run(&obs, &RunConfig { seed: 41, ..cfg.clone() }, None).unwrap();
    assert_eq!(rec.final_image, a.final_image);
    for k in 0..std.len() {
        let d = (a.final_image.data()[k] - b.final_image.data()[k]).abs();
        assert_abs_diff_eq!(std.data()[k], d / 2f64.sqrt(), epsilon = 1e-15);
        assert!(std.data()[k] >= 0.0);
    }
    assert!(std.max() > 0.0);
}

#[test]
fn ensemble_uncertainty_mode_runs_in_lockstep() {
    let obs = masked_obs(32, 16);
    let mut cfg = short(6);
    cfg.prior.noise_inject = 0.02;
    cfg.controller.uncertainty_mode = UncertaintyMode::Ensemble;
    cfg.controller.ensemble_size = 3;
    let a = run(&obs, &cfg, None).unwrap();
    assert_eq!(a, run(&obs, &cfg, None).unwrap());
    let std = a.ensemble_std.as_ref().unwrap();
    assert!(std.max() > 0.0);
    let u2 = &a.step(2).unwrap().maps.as_ref().unwrap().uncertainty;
    assert!(u2.data().iter().all(|&u| (0.0..=1.0).contains(&u)));
    assert!(u2.max() > 0.0);
    assert!(matches!(run_ensemble(&obs, &cfg, 1), Err(Error::Parameter(_))));
}

#[test]
fn balanced_run_improves_noisy_observation() {
    let x = phantom(32);
    let obs = ForwardOperator::identity(32, 32, 0.1, 3).unwrap().degrade(&x).unwrap();
    let input = psnr(&x, obs.measured.as_real().unwrap(), 1.0).unwrap().to_f64();
    let rec = run(&obs, &short(30).with_preset(Preset::Balanced), None).unwrap();
    let out = rec.final_metrics.unwrap().psnr.to_f64();
    assert!(out > input + 3.0, "{input} -> {out}");
}

#[test]
fn final_image_is_clamped() {
    let obs = masked_obs(32, 17);
    let rec = run(&obs, &short(5), None).unwrap();
    assert!(rec.final_image.min() >= 0.0 && rec.final_image.max() <= 1.0);
    let idx: Vec<usize> = rec.steps.iter().map(|s| s.step).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
}
