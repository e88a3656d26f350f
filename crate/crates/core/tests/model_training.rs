//! Whole-stack gradients, routing, optimization and checkpoints.

mod common;

use common::{tiny_data, tiny_model, tiny_model_config};
use physdiff::config::{Ablation, TrainConfig};
use physdiff::error::Error;
use physdiff::model::{Batch, Noise, RoutingProbe};
use physdiff::rng::{seeded, stream};
use physdiff::training::{
    epoch_batches, load_checkpoint_for, read_checkpoint, total_loss, total_loss_grad, train, write_checkpoint, Trainer,
};

#[test]
fn full_stack_gradients_match_central_differences() {
    let data = tiny_data(3, 2, 1);
    for ablation in Ablation::ALL {
        let mut cfg = tiny_model_config();
        cfg.apply(ablation);
        let mut model = tiny_model(&cfg, 3, 2, 5);
        // move the uncertainty terms off zero so their weights are exercised
        model.ps.value_mut(model.s_diff).data_mut()[0] = 0.3;
        model.ps.value_mut(model.s_recon).data_mut()[0] = -0.2;
        let batch = Batch::new(data.train.iter().take(3).collect()).unwrap();
        let mut rng = seeded(9);
        let noise = Noise::draw(&mut rng, 3, 2, cfg.d_embedding, model.sched.t_max);
        let rep = model.check_gradients(&batch, &noise, 200, &mut rng).unwrap();
        assert_eq!(rep.checked, 200);
        assert!(rep.max_rel_err < 1e-4, "{}: {rep:?}", ablation.tag());
    }
}

#[test]
fn routing_masks_foreign_projection_parameters_only() {
    let data = tiny_data(3, 2, 2);
    let mut model = tiny_model(&tiny_model_config(), 3, 2, 3);
    let batch = Batch::new(data.train.iter().take(4).collect()).unwrap();
    let noise = Noise::draw(&mut seeded(4), 4, 2, 4, model.sched.t_max);

    let mut probe = RoutingProbe::default();
    model.loss_and_grad(&batch, &noise, true, Some(&mut probe)).unwrap();
    assert_eq!(probe.max_foreign(), 0.0, "{probe:?}");
    assert!(probe.min_own() > 0.0, "{probe:?}");
    let routed: Vec<_> = model.ps.leaves().iter().map(|l| l.grad.clone()).collect();

    model.loss_and_grad(&batch, &noise, false, None).unwrap();
    let free: Vec<_> = model.ps.leaves().iter().map(|l| l.grad.clone()).collect();
    let ids = model.piga_projection_ids();
    let proj: Vec<usize> = ids.iter().flatten().map(|id| id.index()).collect();
    let mut differs = false;
    for (i, (a, b)) in routed.iter().zip(&free).enumerate() {
        let name = &model.ps.leaves()[i].name;
        if proj.contains(&i) {
            differs |= a.max_abs_diff(b) > 1e-12;
        } else {
            // routing only masks projection parameters; activations carry every loss
            let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(a.max_abs_diff(b) < 1e-12 * scale, "{name}");
        }
    }
    assert!(differs, "routing should change projection gradients");
}

#[test]
fn routing_probe_is_empty_without_piga() {
    let data = tiny_data(3, 2, 2);
    let mut cfg = tiny_model_config();
    cfg.apply(Ablation::NoPiga);
    let mut model = tiny_model(&cfg, 3, 2, 3);
    assert!(model.piga_projection_ids().iter().all(|v| v.is_empty()));
    assert!(model.ps.leaves().iter().all(|l| !l.name.contains("piga")));
    let batch = Batch::new(data.train.iter().take(2).collect()).unwrap();
    let noise = Noise::draw(&mut seeded(1), 2, 2, 4, model.sched.t_max);
    assert!(model.loss_and_grad(&batch, &noise, true, None).unwrap().total.is_finite());
}

#[test]
fn uncertainty_terms_settle_at_the_loss_values() {
    let (ld, lr) = (4.0, 1.0);
    let (mut sd, mut sr) = (0.0f64, 0.0f64);
    for _ in 0..5000 {
        let (gd, gr) = total_loss_grad(ld, lr, sd, sr);
        sd -= 0.05 * gd;
        sr -= 0.05 * gr;
    }
    assert!(((2.0 * sd).exp() / ld - 1.0).abs() < 0.01);
    assert!(((2.0 * sr).exp() / lr - 1.0).abs() < 0.01);
    let at = total_loss(ld, lr, sd, sr);
    // at σ² = L each weighted term is ½, leaving 1 + log σ_diff σ_recon
    assert!((at - (1.0 + ld.sqrt().ln() + lr.sqrt().ln())).abs() < 1e-4);
}

#[test]
fn overfitting_one_batch_halves_the_loss() {
    let data = tiny_data(3, 2, 3);
    let mut model = tiny_model(&tiny_model_config(), 3, 2, 11);
    let batch = Batch::new(data.train.iter().take(8).collect()).unwrap();
    let cfg = TrainConfig { lr: 3e-3, epochs: 1, batch_size: 8, max_steps: None, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&model, &cfg, 8).unwrap();
    trainer.total = 200;
    let mut losses = Vec::new();
    for _ in 0..200 {
        // same noise every step so the target is fixed
        trainer.step = 0;
        let rec = trainer.train_step(&mut model, &batch, 0, None).unwrap();
        assert!(rec.grad_norm.is_finite());
        losses.push(rec.loss_total);
    }
    let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let late: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(late <= 0.5 * early, "early {early} late {late}");
}

#[test]
fn training_is_deterministic_and_batches_are_shared() {
    let data = tiny_data(3, 2, 4);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, max_steps: Some(6), ..TrainConfig::default() };
    let run = || {
        let mut model = tiny_model(&tiny_model_config(), 3, 2, 2);
        let mut log = Vec::new();
        let out = train(&mut model, &data.train, &data.val, &cfg, Some(&mut log)).unwrap();
        (model.ps, log, out.records)
    };
    let (a, la, ra) = run();
    let (b, lb, rb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 6);
    assert_eq!(String::from_utf8(la).unwrap().lines().count(), 6);
    assert_eq!(epoch_batches(&cfg, 10, 1), epoch_batches(&cfg, 10, 1));
    assert_ne!(epoch_batches(&cfg, 10, 0), epoch_batches(&cfg, 10, 1));
}

#[test]
fn non_finite_loss_names_the_batch() {
    let data = tiny_data(3, 2, 4);
    let mut model = tiny_model(&tiny_model_config(), 3, 2, 2);
    let id = model.ps.id("decoder.head.W").unwrap();
    model.ps.value_mut(id).data_mut()[0] = f64::NAN;
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    match train(&mut model, &data.train, &[], &cfg, None) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("batch index 0"), "{msg}"),
        other => panic!("expected non-finite error, got {:?}", other.map(|o| o.records.len())),
    }
}

#[test]
fn checkpoints_round_trip_and_reject_bad_input() {
    let data = tiny_data(3, 2, 5);
    let cfg = tiny_model_config();
    let mut model = tiny_model(&cfg, 3, 2, 8);
    let tc = TrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, max_steps: Some(2), ..TrainConfig::default() };
    train(&mut model, &data.train, &[], &tc, None).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &data.stats, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"PDCK");

    let (back, stats) = read_checkpoint(&bytes[..]).unwrap().into_model().unwrap();
    for (a, b) in back.ps.leaves().iter().zip(model.ps.leaves()) {
        assert_eq!((&a.name, &a.value), (&b.name, &b.value));
    }
    assert_eq!(stats, data.stats);
    let windows: Vec<_> = data.test.iter().take(3).collect();
    let mk = || (0..3).map(|i| stream(1, 2, i)).collect::<Vec<_>>();
    assert_eq!(model.sample_windows(&windows, 1, &mut mk()).unwrap(), back.sample_windows(&windows, 1, &mut mk()).unwrap());

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(read_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(read_checkpoint(&wrong_version[..]), Err(Error::Checkpoint(m)) if m.contains("version")));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.pdck");
    std::fs::write(&path, &bytes).unwrap();
    let diff = model.diffusion.clone();
    assert!(load_checkpoint_for(&path, &cfg, &diff, (3, 2)).is_ok());
    let mut no_piga = cfg.clone();
    no_piga.apply(Ablation::NoPiga);
    assert!(matches!(load_checkpoint_for(&path, &no_piga, &diff, (3, 2)), Err(Error::Checkpoint(_))));
}

#[test]
fn samples_are_reproducible_per_member_stream() {
    let data = tiny_data(3, 2, 6);
    let model = tiny_model(&tiny_model_config(), 3, 2, 1);
    let windows: Vec<_> = data.test.iter().take(2).collect();
    let rngs = |k: u64| (0..4).map(|i| stream(k, 7, i)).collect::<Vec<_>>();
    let a = model.sample_windows(&windows, 2, &mut rngs(1)).unwrap();
    let b = model.sample_windows(&windows, 2, &mut rngs(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a[0].max_abs_diff(&a[1]) > 0.0);
    // a window's forecast does not depend on what else is in the batch
    let alone = model.sample_windows(&windows[1..], 2, &mut rngs(1)[2..].to_vec()).unwrap();
    assert_eq!(alone[0], a[2]);
}

#[test]
fn single_member_ensemble_is_its_sample_and_members_are_count_free() {
    use physdiff::evaluation::ensemble_forecast;
    let data = tiny_data(3, 2, 6);
    let model = tiny_model(&tiny_model_config(), 3, 2, 1);
    let windows = &data.test[..3];
    let one = ensemble_forecast(&model, &data.stats, windows, 1, 9).unwrap();
    for f in &one {
        assert_eq!(f.mean, f.members[0]);
    }
    let three = ensemble_forecast(&model, &data.stats, windows, 3, 9).unwrap();
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(a.members[0], b.members[0]);
    }
}

#[test]
fn latent_autoencoder_learns_to_reconstruct() {
    use physdiff::diffusion::{LatentDecoder, LatentEncoder};
    use physdiff::nn::{Builder, ParamStore};
    use physdiff::tensor::Tensor;
    use physdiff::training::Adam;

    let data = common::prepare_default(4, 4, 2);
    let n = 4;
    let stack = |ws: &[physdiff::data::NormWindow]| Tensor::concat_rows(&ws.iter().map(|w| &w.fut).collect::<Vec<_>>());
    let (train_x, test_x) = (stack(&data.train), stack(&data.test));
    let mut ps = ParamStore::new();
    let mut rng = seeded(0);
    let mut b = Builder::new(&mut ps, &mut rng);
    let enc = LatentEncoder::new(&mut b, 32, 16);
    let dec = LatentDecoder::new(&mut b, 32, 16);
    let mut adam = Adam::new(&ps);
    let mse = |ps: &ParamStore, x: &Tensor| {
        let z = enc.encode(ps, x, n).unwrap();
        let y = dec.decode(ps, &z, n).unwrap();
        y.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64
    };
    let before = mse(&ps, &test_x);
    let windows = train_x.rows() / n;
    for step in 0..500 {
        let lo = (step * 64) % windows;
        let hi = (lo + 64).min(windows);
        let x = train_x.slice_rows(lo * n, hi * n);
        ps.zero_grad();
        let (z, ec) = enc.forward(&ps, &x, n).unwrap();
        let (y, dc) = dec.forward(&ps, &z, n).unwrap();
        let mut dy = y.clone();
        dy.add_scaled(&x, -1.0);
        dy.scale(2.0 / x.len() as f64);
        let dz = dec.backward(&mut ps, &dc, &dy);
        enc.backward(&mut ps, &ec, &dz);
        adam.step(&mut ps, 3e-3);
    }
    let after = mse(&ps, &test_x);
    assert!(after < 0.05, "test reconstruction MSE {after} (was {before})");
}
