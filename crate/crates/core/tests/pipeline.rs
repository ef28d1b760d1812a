use nsmgp::infer::{derive_corr_sd_grid, hmc_sample, map_fit, HmcConfig, MapConfig};
use nsmgp::predict::{lpd, predict, rmse};
use nsmgp::synth::{generate, score_recovery, unit_grid, SynthConfig};
use nsmgp::{ModelKind, PriorSpec};

fn small(seed: u64) -> SynthConfig {
    SynthConfig { seed, n_points: 30, ..SynthConfig::default() }
}

#[test]
fn map_traces_never_decrease() {
    let (ep, _) = generate(&small(1)).unwrap();
    let cfg = MapConfig { max_iters: 25, ..MapConfig::default() };
    for kind in ModelKind::ALL {
        let fit = map_fit(&ep, kind, &PriorSpec::default(), &cfg).unwrap();
        assert_eq!(fit.params.kind(), kind);
        assert!(fit.trace.windows(2).all(|w| w[1].log_post >= w[0].log_post), "{kind}");
        assert_eq!(fit.trace.last().unwrap().log_post, fit.log_post);
    }
}

#[test]
fn holdout_prediction_scores_are_finite() {
    let (ep, _) = generate(&small(2)).unwrap();
    let (train, hold) = ep.split_holdout(5).unwrap();
    let cfg = MapConfig { max_iters: 25, ..MapConfig::default() };
    for kind in ModelKind::ALL {
        let fit = map_fit(&train, kind, &PriorSpec::default(), &cfg).unwrap();
        let pred = predict(&fit.params, &train, hold.times()).unwrap();
        assert_eq!(pred.q(), 5);
        assert!(rmse(&pred, &hold).unwrap().is_finite());
        assert!(lpd(&pred, &hold).unwrap().is_finite());
        for q in 0..5 {
            for m in 0..2 {
                assert!(pred.obs_sd_at(q, m) >= pred.sd_at(q, m));
            }
        }
    }
}

#[test]
fn posterior_draws_give_valid_correlation_curves() {
    let (ep, _) = generate(&small(3)).unwrap();
    let fit = map_fit(&ep, ModelKind::Gnmgp, &PriorSpec::default(), &MapConfig { max_iters: 10, ..MapConfig::default() })
        .unwrap();
    let cfg = HmcConfig { step_size: 0.02, n_leapfrog: 5, n_samples: 10, n_burnin: 5, seed: 9 };
    let (draws, run) = hmc_sample(&ep, ModelKind::Gnmgp, &PriorSpec::default(), &cfg, &fit.params).unwrap();
    assert_eq!(draws.len(), 10);
    assert!((0.0..=1.0).contains(&run.acceptance_rate));
    let grid = unit_grid(20);
    for d in &draws {
        assert_eq!(d.params.times, ep.times());
        for cs in derive_corr_sd_grid(&d.params, &grid).unwrap() {
            assert!(cs.corr[(1, 0)].abs() <= 1.0 + 1e-12);
            assert!((cs.corr[(0, 0)] - 1.0).abs() < 1e-12);
            assert!(cs.sd.iter().all(|s| *s > 0.0));
        }
    }
}

#[test]
fn generating_parameters_recover_themselves() {
    let (_, truth) = generate(&small(4)).unwrap();
    let params = truth.to_params(PriorSpec::default().coreg_prior).unwrap();
    let r = score_recovery(&truth, &params, &truth.times).unwrap();
    assert!(r.corr_rmse.unwrap() < 1e-12);
    assert!(r.sd_rmse.iter().all(|v| *v < 1e-12));
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate(&small(5)).unwrap();
    let b = generate(&small(5)).unwrap();
    let c = generate(&small(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}
