//! End-to-end training runs: convergence, mode reduction, trace shape and
//! failure handling.

use anchorml::attention::AaMode;
use anchorml::checkpoint::Checkpoint;
use anchorml::data::{synth_generate, Dataset, SynthConfig};
use anchorml::losses::LossKind;
use anchorml::optim::OptimizerConfig;
use anchorml::trainer::{sweep_point, train, TrainConfig, Trainer};
use anchorml::Error;

fn synth(classes: usize, per_class: usize, noise: f64, seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        classes,
        per_class,
        audio_dim: 6,
        visual_dim: 8,
        class_separation: 10.0,
        noise_sigma: noise,
        seed,
    })
    .unwrap()
}

fn split(d: &Dataset) -> (Dataset, Dataset) {
    let assignment = d.stratified_split(0.7, 1).unwrap();
    d.apply_split(&assignment).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        hidden: 16,
        eval_every: 0,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn single_class_training_regresses_onto_labels() {
    let d = synth(1, 50, 0.0, 4);
    let cfg = TrainConfig {
        epochs: 100,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let t = train(&d, None, cfg).unwrap();
    assert!(t.trace.iter().all(|r| r.metric == 0.0));
    let last = t.trace.last().unwrap();
    assert!(last.label < 0.05, "final label loss {}", last.label);
    assert_eq!(last.total, last.label);
}

#[test]
fn single_anchor_neighborhoods_make_the_modes_agree() {
    let (tr, te) = split(&synth(3, 12, 1.0, 8));
    for kind in [LossKind::Triplet, LossKind::HardTriplet, LossKind::Contrastive] {
        let mut base = config(15);
        base.k = 1;
        base.loss.kind = kind;
        base.loss.aa_mode = AaMode::Joint;
        let joint = sweep_point(&tr, &te, &base, kind, 1).unwrap();
        base.loss.aa_mode = AaMode::Literal;
        let literal = sweep_point(&tr, &te, &base, kind, 1).unwrap();
        assert_eq!(joint.map_av.to_bits(), literal.map_av.to_bits(), "{}", kind.as_str());
        assert_eq!(joint.map_va.to_bits(), literal.map_va.to_bits(), "{}", kind.as_str());
    }
}

/// Counts epochs `e > 10` whose label loss is exceeded 20 epochs later.
fn window_violations(label: &[f64]) -> usize {
    (10..label.len().saturating_sub(20))
        .filter(|&s| label[s + 20] > label[s])
        .count()
}

#[test]
#[ignore = "soft check: the label loss climbs while the metric loss dominates early training, then jitters on its plateau"]
fn label_loss_mostly_decreases_across_twenty_epoch_windows() {
    let d = synth_generate(&SynthConfig {
        classes: 3,
        noise_sigma: 0.0,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 130,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let t = train(&d, None, cfg).unwrap();
    let label: Vec<f64> = t.trace.iter().map(|r| r.label).collect();
    let violations = window_violations(&label);
    assert!(violations <= 3, "{violations} windows where the label loss rose");
}

#[test]
fn window_violations_count_rises_only() {
    let mut falling: Vec<f64> = (0..60).map(|e| 1.0 / (1.0 + e as f64)).collect();
    assert_eq!(window_violations(&falling), 0);
    falling[45] = 10.0;
    assert_eq!(window_violations(&falling), 1);
}

#[test]
fn trace_rows_fill_map_columns_only_on_eval_epochs() {
    let (tr, te) = split(&synth(2, 10, 1.0, 2));
    let cfg = TrainConfig {
        eval_every: 3,
        ..config(7)
    };
    let t = train(&tr, Some(&te), cfg).unwrap();
    let evaluated: Vec<usize> = t.trace.iter().filter(|r| r.map_av.is_some()).map(|r| r.epoch).collect();
    assert_eq!(evaluated, vec![3, 6, 7]);
    assert!(t.trace.iter().all(|r| r.map_av.is_some() == r.map_va.is_some()));
}

#[test]
fn split_training_matches_uninterrupted_training() {
    let d = synth(2, 10, 1.0, 6);
    let full = train(&d, None, config(6)).unwrap();
    let first = train(&d, None, config(2)).unwrap();
    let bytes = first.checkpoint().encode().unwrap();
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Trainer::resume(config(6), &d, &ckpt).unwrap();
    resumed.fit(&d, None).unwrap();
    assert_eq!(
        resumed.checkpoint().encode().unwrap(),
        full.checkpoint().encode().unwrap()
    );
    assert_eq!(&full.trace[2..], &resumed.trace[..]);
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.aadm");
    let d = synth(2, 10, 1.0, 9);
    // One batch per epoch. Adam moves every parameter by roughly `lr` per step, so an enormous
    // rate leaves finite but overflowing weights after the first epoch.
    let cfg = TrainConfig {
        checkpoint_every: 1,
        checkpoint_path: Some(path.clone()),
        optimizer: OptimizerConfig {
            lr: 1e120,
            ..OptimizerConfig::default()
        },
        batch_size: 20,
        ..config(5)
    };
    let mut t = Trainer::new(cfg, &d).unwrap();
    let err = t.fit(&d, None).unwrap_err();
    let Error::TrainingAborted { epoch, .. } = err else {
        panic!("unexpected error {err}");
    };
    let saved = Checkpoint::load(&path).unwrap();
    assert_eq!(saved.epoch().unwrap(), epoch - 1);
    assert_eq!(t.epoch, epoch - 1);
    assert!(saved
        .tensors
        .iter()
        .all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
}
