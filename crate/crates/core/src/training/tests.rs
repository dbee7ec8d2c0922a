use super::*;
use crate::config::ModelKind;
use crate::datagen::{generate_glyphs, split, SplitSpec, Subset};
use crate::error::Error;
use crate::lowrank_gp::gp_log_density;
use crate::ndtensor::Tensor;
use crate::nnet::ArchKind;
use crate::taylor_grad::{full_gradient_step_with_eps, StepConfig, Trainable};

fn toy_cfg(model: ModelKind) -> RunConfig {
    RunConfig {
        model,
        latent_dim: 3,
        object_dim: 2,
        arch: ArchKind::Mlp,
        widths: Some(vec![16]),
        lambda: Some(0.05),
        batch_size: 8,
        vae_epochs: 3,
        gp_epochs: 4,
        joint_epochs: 6,
        patience: 2,
        seed: 5,
        ..RunConfig::default()
    }
}

fn toy_data(with_cond: bool) -> TrainData<f64> {
    let ds = generate_glyphs(8, 4, 16, 3).unwrap();
    let sp = split(&ds, &SplitSpec { val_fraction: 0.25, ..SplitSpec::default() }).unwrap();
    TrainData {
        train: ds.subset(&sp.train, with_cond).unwrap(),
        val: ds.subset(&sp.val, with_cond).unwrap(),
        num_objects: ds.num_objects,
        angles: ds.angles.clone(),
    }
}

fn toy_state(cfg: &RunConfig, data: &TrainData<f64>) -> TrainState<f64> {
    let model = Model::new(cfg, cfg.architecture(16), data.num_objects, &data.angles).unwrap();
    TrainState::new(model, schedule(cfg, false), cfg.lambda.unwrap())
}

#[test]
fn adam_three_step_trace() {
    let mut adam = AdamState::new(0.1);
    let mut x = [1.0f64];
    let want = [0.9000000019999999, 0.8654394181165107, 0.8275002408356955];
    for (g, w) in [0.5, -0.2, 0.1].into_iter().zip(want) {
        adam.tick();
        adam.update("x", &mut x, &[g]).unwrap();
        assert!((x[0] - w).abs() < 1e-15, "{} vs {}", x[0], w);
    }
    assert_eq!(adam.t, 3);
}

#[test]
fn adam_rejects_misuse() {
    let mut adam = AdamState::new(0.1);
    let mut x = [1.0f32, 2.0];
    assert!(adam.update("x", &mut x, &[0.1, 0.1]).is_err());
    adam.tick();
    assert!(adam.update("x", &mut x, &[0.1]).is_err());
    adam.update("x", &mut x, &[0.1, 0.1]).unwrap();
    let mut y = [0.0f32; 3];
    assert!(adam.update("x", &mut y, &[0.0; 3]).is_err());
}

#[test]
fn zero_latents_loss() {
    let (n, l, alpha) = (12, 3, 0.7f64);
    let z = Tensor::zeros(&[n, l]);
    let v = Tensor::zeros(&[n, 2]);
    let gp_term = -gp_log_density(&z, &v, alpha).unwrap();
    let want = 0.5 * l as f64 * (n as f64 * alpha.ln() + n as f64 * (2.0 * PI).ln());
    assert!((gp_term - want).abs() < 1e-9);
    let terms = StepTerms {
        sq_err: 0.0,
        prior_nll: gp_term,
        reg: 0.0,
    };
    let w = term_weights(LossMode::SiLambda, 0.3, l, 64, 1.0, 1.0);
    let b = LossBreakdown::assemble(&terms, &w, LossMode::SiLambda, n, 64, 0.01, 0.3);
    assert_eq!((b.recon, b.reg_term), (0.0, 0.0));
    assert!((b.total - 0.1 * want).abs() < 1e-9);
}

#[test]
fn loss_terms_add_up() {
    let terms = StepTerms {
        sq_err: 13.5,
        prior_nll: 40.25,
        reg: -7.0,
    };
    let (n, k, l) = (10usize, 49usize, 4usize);
    let (lambda, s2) = (0.02, 0.04);
    let w = term_weights(LossMode::SiLambda, lambda, l, k, s2, 2.0);
    let b = LossBreakdown::assemble(&terms, &w, LossMode::SiLambda, n, k, s2, lambda);
    let want = 13.5 / 49.0 + (lambda / 4.0) * (2.0 * 40.25 - 7.0);
    assert!((b.total - want).abs() < 1e-12);
    assert_eq!((b.sigma_y2, b.lambda), (s2, lambda));

    let w = term_weights(LossMode::Eq8, lambda, l, k, s2, 1.0);
    let b = LossBreakdown::assemble(&terms, &w, LossMode::Eq8, n, k, s2, lambda);
    let recon = 0.5 * 490.0 * s2.ln() + 13.5 / (2.0 * s2);
    assert!((b.recon - recon).abs() < 1e-9);
    assert!((b.total - (recon + 40.25 - 7.0)).abs() < 1e-9);
    assert!(b.is_finite());
}

#[test]
fn vanishing_lambda_leaves_reconstruction_gradient() {
    let cfg = toy_cfg(ModelKind::GppvaeJoint);
    let data = toy_data(false);
    let model: Model<f64> = Model::new(&cfg, cfg.architecture(16), data.num_objects, &data.angles).unwrap();
    let gp = model.gp.as_ref().unwrap();
    let eps = Tensor::from_fn(&[data.train.len(), 3], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
    let step = |weights| {
        let sc = StepConfig {
            batch_size: 8,
            weights,
            trainable: Trainable::ALL,
        };
        full_gradient_step_with_eps(&model.encoder, &model.decoder, gp, data.train.samples(), &sc, &eps).unwrap()
    };
    let tiny = step(term_weights(LossMode::SiLambda, 1e-14, 3, 256, 1.0, 1.0));
    let pure = step(TermWeights {
        recon: 1.0 / 256.0,
        gp: 0.0,
        reg: 0.0,
    });
    for (a, b) in tiny.grads.encoder.iter().zip(&pure.grads.encoder).chain(tiny.grads.decoder.iter().zip(&pure.grads.decoder)) {
        assert!(a.zip_map(b, |x, y| x - y).unwrap().max_abs() <= 1e-10 * b.max_abs().max(1e-300));
    }
}

fn constant_subset(value: f64, n: usize) -> Subset<f64> {
    Subset {
        indices: (0..n).collect(),
        images: Tensor::from_fn(&[n, 1, 16, 16], |_| value),
        objects: vec![0; n],
        views: vec![0; n],
        cond: None,
    }
}

#[test]
fn sigma_estimate_examples() {
    let arch = Architecture::mlp(1, 16, 3);
    let enc: Encoder<f64> = Encoder::zeros(arch.clone()).unwrap();
    let dec: Decoder<f64> = Decoder::zeros(arch).unwrap();
    // A zero decoder outputs 0.5 everywhere.
    assert_eq!(estimate_sigma_y(&enc, &dec, &constant_subset(0.5, 4)).unwrap(), 0.0);
    let s = estimate_sigma_y(&enc, &dec, &constant_subset(0.8, 3)).unwrap();
    assert!((s - 0.09).abs() < 1e-12);
    assert!(matches!(
        estimate_sigma_y(&enc, &dec, &constant_subset(0.5, 0)),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn sigma_estimate_matches_sample_loop() {
    let data = toy_data(false);
    let cfg = toy_cfg(ModelKind::Vae);
    let model: Model<f64> = Model::new(&cfg, cfg.architecture(16), data.num_objects, &data.angles).unwrap();
    let val = &data.val;
    let mut total = 0.0;
    for i in 0..val.len() {
        let img = val.images.slice_rows(i, i + 1).unwrap();
        let (mu, _) = model.encoder.encode(&img, None).unwrap();
        let rec = model.decoder.decode(&mu, None).unwrap();
        for (a, b) in rec.data().iter().zip(img.data()) {
            total += (a - b) * (a - b);
        }
    }
    let want = total / (val.len() * 256) as f64;
    let got = estimate_sigma_y(&model.encoder, &model.decoder, val).unwrap();
    assert!((got - want).abs() < 1e-12 * want);
}

#[test]
fn lambda_selection_examples() {
    let one = select_lambda(&[0.3], |_| Ok(-2.0)).unwrap();
    assert_eq!(one.best, 0.3);

    let mut calls = 0;
    let dup = select_lambda(&[0.5, 0.5], |_| {
        calls += 1;
        Ok(1.0)
    })
    .unwrap();
    assert_eq!((dup.best, dup.results.len(), calls), (0.5, 2, 2));

    let scores = |l: f64| -(l.log10() - 0.2).powi(2);
    let sel = select_lambda(&[0.1, 1.0, 10.0], |l| Ok(scores(l))).unwrap();
    let best = sel
        .results
        .iter()
        .max_by(|a, b| a.score.unwrap().total_cmp(&b.score.unwrap()))
        .unwrap();
    assert_eq!(sel.best, best.lambda);
    assert_eq!(sel.best, 1.0);

    let tie = select_lambda(&[2.0, 1.0], |_| Ok(0.0)).unwrap();
    assert_eq!(tie.best, 1.0);

    let failed = select_lambda(&[0.1, 1.0], |l| {
        if l < 0.5 {
            Err(Error::NonFinite("diverged".into()))
        } else {
            Ok(-5.0)
        }
    })
    .unwrap();
    assert_eq!(failed.best, 1.0);
    assert_eq!(failed.results[0].score, None);
    assert!(select_lambda(&[0.1], |_| Ok(f64::NAN)).is_err());
    assert!(select_lambda(&[], |_| Ok(0.0)).is_err());
    assert!(select_lambda(&[0.0], |_| Ok(0.0)).is_err());
}

#[test]
fn phase_schedules() {
    let cfg = RunConfig::default();
    let joint = schedule(&cfg, false);
    let got: Vec<(Phase, f64)> = joint.iter().map(|p| (p.phase, p.lr)).collect();
    assert_eq!(got, vec![(Phase::Vae, 1e-3), (Phase::Gp, 1e-2), (Phase::Joint, 1e-3)]);
    assert_eq!(joint[1].epochs, 100);
    let dis = schedule(&RunConfig { model: ModelKind::GppvaeDis, ..cfg.clone() }, false);
    assert_eq!(dis.iter().map(|p| p.phase).collect::<Vec<_>>(), vec![Phase::Vae, Phase::Gp]);
    let pre = schedule(&RunConfig { model: ModelKind::GppvaeDis, ..cfg.clone() }, true);
    assert_eq!(pre.iter().map(|p| p.phase).collect::<Vec<_>>(), vec![Phase::Gp]);
    for m in [ModelKind::Vae, ModelKind::Cvae] {
        let s = schedule(&RunConfig { model: m, ..cfg.clone() }, true);
        assert_eq!(s.iter().map(|p| p.phase).collect::<Vec<_>>(), vec![Phase::Vae]);
    }
}

#[test]
fn gp_phase_freezes_networks() {
    let cfg = toy_cfg(ModelKind::GppvaeDis);
    let data = toy_data(false);
    let mut state = toy_state(&cfg, &data);
    let mut after_vae = None;
    let mut lrs = Vec::new();
    let mut records = Vec::new();
    train(&cfg, &data, &mut state, |s, r| {
        if r.phase == Phase::Vae && s.epoch == cfg.vae_epochs {
            after_vae = Some(s.model.clone());
        }
        lrs.push((r.phase, s.adam.lr));
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    let before = after_vae.unwrap();
    assert_eq!(before.encoder, state.model.encoder);
    assert_eq!(before.decoder, state.model.decoder);
    assert_ne!(before.gp, state.model.gp);
    assert!(lrs.iter().all(|&(p, lr)| lr == if p == Phase::Gp { 1e-2 } else { 1e-3 }));
    assert_eq!(records.len(), cfg.vae_epochs + cfg.gp_epochs);
    assert_eq!(records.last().unwrap().epoch, cfg.vae_epochs + cfg.gp_epochs);
    assert!(records.iter().all(|r| r.loss.is_finite()));
    assert!(state.done());
}

#[test]
fn joint_run_restores_best_validation_model() {
    let cfg = toy_cfg(ModelKind::GppvaeJoint);
    let data = toy_data(false);
    let mut state = toy_state(&cfg, &data);
    let mut phases = Vec::new();
    let mut val = Vec::new();
    let mut baseline = None;
    train(&cfg, &data, &mut state, |s, r| {
        if !phases.contains(&r.phase) {
            phases.push(r.phase);
        }
        if r.phase == Phase::Joint {
            baseline.get_or_insert(s.early.best_mse);
            val.push(r.val_mse.unwrap());
        } else {
            assert!(r.val_mse.is_none());
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(phases, vec![Phase::Vae, Phase::Gp, Phase::Joint]);
    assert!(!val.is_empty() && val.len() <= cfg.joint_epochs);
    let queries: Vec<_> = data.val.objects.iter().copied().zip(data.val.views.iter().copied()).collect();
    let pred = gp_predict_images(&state.model, &data.train, &queries, 0, 0).unwrap();
    let per = prediction_mse(&pred, &data.val.images).unwrap();
    let final_mse = per.iter().sum::<f64>() / per.len() as f64;
    let best = val.iter().copied().fold(baseline.unwrap(), f64::min);
    assert!((final_mse - best).abs() <= 1e-12 * best, "{final_mse} vs {best}");
}

#[test]
fn interrupted_run_resumes_identically() {
    let cfg = toy_cfg(ModelKind::GppvaeJoint);
    let data = toy_data(false);
    let mut full = toy_state(&cfg, &data);
    train(&cfg, &data, &mut full, |_, _| Ok(())).unwrap();

    for stop_at in [2, 3, 5, 8] {
        let mut part = toy_state(&cfg, &data);
        let err = train(&cfg, &data, &mut part, |s, _| {
            if s.global_epoch == stop_at {
                Err(Error::Invalid("stop".into()))
            } else {
                Ok(())
            }
        });
        assert!(err.is_err());
        let mut resumed = part.clone();
        train(&cfg, &data, &mut resumed, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.model, full.model, "stopped at {stop_at}");
        assert_eq!(resumed.global_epoch, full.global_epoch);
    }
}

#[test]
fn conditional_vae_trains() {
    let cfg = toy_cfg(ModelKind::Cvae);
    let data = toy_data(true);
    let mut state = toy_state(&cfg, &data);
    assert!(state.model.gp.is_none());
    let mut first = None;
    let mut last = 0.0;
    train(&cfg, &data, &mut state, |_, r| {
        first.get_or_insert(r.loss.total);
        last = r.loss.total;
        Ok(())
    })
    .unwrap();
    assert!(last < first.unwrap());
}

#[test]
fn eq8_mode_learns_observation_variance() {
    let cfg = RunConfig {
        loss_mode: LossMode::Eq8,
        sigma_y2: 0.5,
        ..toy_cfg(ModelKind::Vae)
    };
    let data = toy_data(false);
    let mut state = toy_state(&cfg, &data);
    train(&cfg, &data, &mut state, |_, r| {
        assert!(r.loss.is_finite());
        Ok(())
    })
    .unwrap();
    assert!(state.model.log_sigma_y2 < 0.5f64.ln());
    assert_eq!(state.sigma_y2, state.model.log_sigma_y2.exp());
}

#[test]
fn gp_phase_requires_gp() {
    let cfg = toy_cfg(ModelKind::Vae);
    let data = toy_data(false);
    let model = Model::new(&cfg, cfg.architecture(16), data.num_objects, &data.angles).unwrap();
    let plan = schedule(&RunConfig { model: ModelKind::GppvaeDis, ..cfg.clone() }, true);
    let mut state = TrainState::new(model, plan, 0.1);
    assert!(train(&cfg, &data, &mut state, |_, _| Ok(())).is_err());
}

#[test]
fn cast_roundtrip() {
    let cfg = toy_cfg(ModelKind::GppvaeJoint);
    let m: Model<f64> = Model::new(&cfg, cfg.architecture(16), 8, &[0.0, 1.0, 2.0, 3.0]).unwrap();
    let m32: Model<f32> = m.cast();
    let back: Model<f64> = m32.cast();
    assert_eq!(back.gp, m.gp);
    assert_eq!(back.encoder.params.names, m.encoder.params.names);
    assert!(back.encoder.params.tensors[0].rel_diff(&m.encoder.params.tensors[0]) < 1e-6);
}
