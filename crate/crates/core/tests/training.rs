mod common;

use std::fs;

use alden_core::backbone::Backbone;
use alden_core::checkpoint::{self, Checkpoint};
use alden_core::objectives::{l1_loss, LossReport};
use alden_core::training::{
    interim_checkpoint_name, prepare_pairs, train, AblationPreset, TrainConfig, TrainOptions, TrainState,
    FINAL_CHECKPOINT, LOSS_LOG,
};
use alden_core::Error;
use candle_core::Tensor;

fn config(preset: AblationPreset, iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    preset.apply(&mut cfg.objective);
    cfg.total_iterations = iterations;
    cfg.checkpoint_every = 0;
    cfg.seed = 5;
    cfg
}

fn small_dataset(n: u64) -> Vec<alden_core::data::PairedSample> {
    (0..n).map(|i| common::phantom_pair(i, 0.25)).collect()
}

fn batch(n: u64) -> (Tensor, Tensor) {
    let pairs = prepare_pairs(&small_dataset(n), TrainConfig::toy().window).unwrap();
    let xs: Vec<&Tensor> = pairs.iter().map(|p| &p.0).collect();
    let ys: Vec<&Tensor> = pairs.iter().map(|p| &p.1).collect();
    (Tensor::cat(&xs, 0).unwrap(), Tensor::cat(&ys, 0).unwrap())
}

fn bits(r: &LossReport) -> [u64; 5] {
    [r.l1, r.adv_g, r.adv_d, r.scl, r.total].map(f64::to_bits)
}

#[test]
fn one_step_is_bitwise_deterministic() {
    let cfg = config(AblationPreset::Full, 1);
    let (x, y) = batch(2);
    let run = || {
        let mut st = TrainState::new(cfg.clone()).unwrap();
        let bb = st.load_backbone().unwrap();
        let r = st.train_step(bb.as_ref(), &x, &y).unwrap();
        (r, st.generator.params().checksum().unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ga, gb);
    assert!(a.adv_d > 0.0 && a.scl > 0.0);
}

#[test]
fn ablated_objective_gradient_is_pure_l1() {
    let cfg = config(AblationPreset::Baseline, 1);
    let (x, y) = batch(2);
    let st = TrainState::new(cfg).unwrap();
    let frozen = st.deep_clone().unwrap();
    let features = st.extract_features(None, &x, &y).unwrap();
    let yhat = st.generator.forward(&x).unwrap();
    let obj = st.generator_objective(None, &features, &yhat, &y, 0).unwrap();
    assert!(obj.adv_g.is_none() && obj.scl.is_none());
    let g_total = obj.total.backward().unwrap();

    let yhat_ref = frozen.generator.forward(&x).unwrap();
    let g_l1 = l1_loss(&yhat_ref, &y).unwrap().backward().unwrap();
    let mut compared = 0;
    for ((name, a), (_, b)) in st.generator.params().iter().zip(frozen.generator.params().iter()) {
        match (g_total.get(a.as_tensor()), g_l1.get(b.as_tensor())) {
            (Some(ga), Some(gb)) => {
                assert_eq!(common::values(ga), common::values(gb), "{name}");
                compared += 1;
            }
            (None, None) => {}
            _ => panic!("gradient presence differs for {name}"),
        }
    }
    assert_eq!(compared, st.generator.params().len());
}

#[test]
fn each_half_step_touches_only_its_player() {
    let mut st = TrainState::new(config(AblationPreset::Full, 1)).unwrap();
    let bb = st.load_backbone().unwrap();
    let (x, y) = batch(2);
    let features = st.extract_features(bb.as_ref(), &x, &y).unwrap();
    let yhat = st.generator.forward(&x).unwrap();
    let g0 = st.generator.params().checksum().unwrap();
    let d0 = st.discriminator.as_ref().unwrap().params().checksum().unwrap();

    st.discriminator_step(&features, &yhat, &y).unwrap();
    let d1 = st.discriminator.as_ref().unwrap().params().checksum().unwrap();
    assert_eq!(st.generator.params().checksum().unwrap(), g0);
    assert_ne!(d1, d0);

    st.generator_step(bb.as_ref(), &features, &yhat, &y).unwrap();
    assert_eq!(st.discriminator.as_ref().unwrap().params().checksum().unwrap(), d1);
    assert_ne!(st.generator.params().checksum().unwrap(), g0);
}

#[test]
fn checkpoint_cadence_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(AblationPreset::Baseline, 10);
    cfg.checkpoint_every = 5;
    let out = train(
        &cfg,
        &small_dataset(4),
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume_from: None,
        },
    )
    .unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, [interim_checkpoint_name(5), interim_checkpoint_name(10), FINAL_CHECKPOINT.to_string()]);
    let mut on_disk: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    on_disk.sort();
    assert_eq!(on_disk.len(), 3);

    let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    let parsed: Vec<_> = log.lines().map(|l| LossReport::parse_log_line(l).unwrap()).collect();
    assert_eq!(parsed.len(), 10);
    for ((it, r), (hit, hr)) in parsed.iter().zip(&out.history) {
        assert_eq!(it, hit);
        assert_eq!(bits(r), bits(hr));
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    let mut cfg = config(AblationPreset::Full, 6);
    cfg.checkpoint_every = 3;
    let data = small_dataset(4);
    let full = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(full_dir.path().to_path_buf()),
            resume_from: None,
        },
    )
    .unwrap();
    let resumed = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(resumed_dir.path().to_path_buf()),
            resume_from: Some(full_dir.path().join(interim_checkpoint_name(3))),
        },
    )
    .unwrap();
    assert_eq!(resumed.history.len(), 3);
    for ((a_it, a), (b_it, b)) in full.history[3..].iter().zip(&resumed.history) {
        assert_eq!(a_it, b_it);
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(
        full.state.generator.params().checksum().unwrap(),
        resumed.state.generator.params().checksum().unwrap()
    );
}

#[test]
fn backbone_is_untouched_by_training() {
    let cfg = config(AblationPreset::Full, 2);
    let before = Backbone::load(&cfg.backbone).unwrap().checksum().unwrap();
    let out = train(&cfg, &small_dataset(2), &TrainOptions::default()).unwrap();
    assert_eq!(out.backbone_checksum, Some(before));
}

#[test]
fn dataset_smaller_than_batch_is_config_error() {
    let cfg = config(AblationPreset::Baseline, 1);
    match train(&cfg, &small_dataset(1), &TrainOptions::default()) {
        Err(Error::Config(_)) => {}
        Err(e) => panic!("unexpected error: {e}"),
        Ok(_) => panic!("training accepted a dataset smaller than the batch"),
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut st = TrainState::new(config(AblationPreset::Baseline, 1)).unwrap();
    let (x, y) = batch(2);
    let y = (y + f64::NAN).unwrap();
    match st.train_step(None, &x, &y) {
        Err(Error::NonFiniteLoss { term, iteration }) => {
            assert_eq!((term, iteration), ("l1", 0));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_file_round_trip_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(AblationPreset::Full, 2);
    let out = train(&cfg, &small_dataset(2), &TrainOptions::default()).unwrap();
    let path = dir.path().join("state.ckpt");
    checkpoint::save(&out.state, &path).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    let orig = Checkpoint::from_state(&out.state).unwrap();
    assert_eq!(ck.iteration, 2);
    assert_eq!(ck.opt_g.step, 2);
    for (a, b) in [
        (&ck.generator, &orig.generator),
        (ck.discriminator.as_ref().unwrap(), orig.discriminator.as_ref().unwrap()),
        (&ck.opt_g.first, &orig.opt_g.first),
        (&ck.opt_g.second, &orig.opt_g.second),
        (&ck.opt_d.first, &orig.opt_d.first),
        (&ck.opt_d.second, &orig.opt_d.second),
    ] {
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        for (k, t) in a {
            let u: Vec<u64> = common::values(t).iter().map(|v| v.to_bits()).collect();
            let v: Vec<u64> = common::values(&b[k]).iter().map(|v| v.to_bits()).collect();
            assert_eq!(u, v, "{k}");
        }
    }
    // No temp file is left behind by the atomic write.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    let bytes = fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(checkpoint::load(&cut), Err(Error::CorruptCheckpoint { .. })));
}

#[test]
fn single_pair_overfits() {
    let mut cfg = config(AblationPreset::Baseline, 300);
    cfg.batch_size = 1;
    cfg.learning_rate = 1e-3;
    let out = train(&cfg, &small_dataset(1), &TrainOptions::default()).unwrap();
    let first = out.history[0].1.l1;
    let last = out.history.last().unwrap().1.l1;
    assert!(last < 0.25 * first, "L1 {first} -> {last}");
}
