use agcn_core::synth::{synth_config, synth_dataset};
use agcn_core::train::{evaluate, train};
use agcn_core::{Agcn, Modality};

fn small_run(seed: u64) -> agcn_core::train::TrainOutcome {
    let data = synth_dataset(Modality::Visual, 2, 16, 3).unwrap();
    let mut cfg = synth_config(Modality::Visual, 2);
    cfg.epochs = 12;
    cfg.seed = seed;
    train(&cfg, &data, &data).unwrap()
}

#[test]
fn memorizes_a_small_set_and_loss_falls() {
    let out = small_run(0);
    let losses = out.report.losses();
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
    assert_eq!(out.report.final_test_accuracy, 1.0);
}

#[test]
fn same_seed_same_bits_and_reload_reproduces_accuracy() {
    let a = small_run(5);
    let b = small_run(5);
    let bits = |o: &agcn_core::train::TrainOutcome| o.report.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.report.metrics_csv(), b.report.metrics_csv());

    let dir = tempfile::tempdir().unwrap();
    a.model.save_checkpoint(&a.params, dir.path()).unwrap();
    let (model, params) = Agcn::load_checkpoint(dir.path()).unwrap();
    let data = synth_dataset(Modality::Visual, 2, 16, 3).unwrap();
    let eval = evaluate(&model, &params, &data).unwrap();
    assert_eq!(eval.accuracy, a.report.final_test_accuracy);
    assert_eq!(eval.confusion, a.report.confusion);
}

#[test]
fn different_seed_changes_the_trajectory() {
    assert_ne!(small_run(1).report.losses(), small_run(2).report.losses());
}
