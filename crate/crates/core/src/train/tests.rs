use super::*;
use crate::sits::{generate_synthetic, object_split, SyntheticSpec, DEFAULT_FRACTIONS};

fn scene() -> (PatchSet, SplitAssignment) {
    let spec = SyntheticSpec {
        num_classes: 2,
        height: 20,
        width: 20,
        timestamps: 3,
        objects_per_class: 4,
        object_size: (2, 3),
        seed: 3,
        ..SyntheticSpec::default()
    };
    let (cube, labels) = generate_synthetic(&spec).unwrap();
    let split = object_split(&labels, DEFAULT_FRACTIONS, 3).unwrap();
    (PatchSet::from_cube(&cube, &labels).unwrap(), split)
}

fn tiny(data: &PatchSet, variant: Variant) -> DuploModel<f32> {
    let cfg = ModelConfig::tiny(data.num_classes, data.timestamps, data.bands).with_seed(1);
    DuploModel::new(cfg, variant).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 1e-2,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size, c.learning_rate), (300, 128, 2e-4));
    assert_eq!((c.alpha1, c.alpha2), (0.3, 0.3));
    let s = TrainConfig::small();
    assert_eq!((s.epochs, s.model_config(3, 8, 5).hidden), (30, 64));
    assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
}

#[test]
fn best_epoch_prefers_highest_then_earliest() {
    assert_eq!(best_epoch(&[0.5, 0.9, 0.7]), Some(2));
    assert_eq!(best_epoch(&[0.8, 0.8, 0.6]), Some(1));
    assert_eq!(best_epoch(&[]), None);
}

#[test]
fn batches_have_model_layout() {
    let (data, split) = scene();
    let idx = data.indices(&split, SplitPart::Train);
    let (x, y) = data.batch(&idx[..3]).unwrap();
    assert_eq!(x.shape(), &[3, 3, 4, 5, 5]);
    assert_eq!(y, data.labels(&idx[..3]));
    let total: usize = SplitPart::ALL.iter().map(|&p| data.indices(&split, p).len()).sum();
    assert_eq!(total, data.len());
}

#[test]
fn training_is_reproducible_and_keeps_best_snapshot() {
    let (data, split) = scene();
    let run = || {
        let mut m = tiny(&data, Variant::Full);
        let out = train(&mut m, &data, &split, &quick()).unwrap();
        (m, out)
    };
    let (mut a, oa) = run();
    let (mut b, ob) = run();
    assert_eq!(oa, ob);
    assert_eq!(oa.history.len(), 3);
    assert!(oa.history.iter().all(|r| r.train_loss.is_finite()));
    let accs: Vec<f64> = oa.history.iter().map(|r| r.val_accuracy).collect();
    assert_eq!(Some(oa.best_epoch), best_epoch(&accs));

    // The kept parameters reproduce the recorded validation accuracy.
    let val = data.indices(&split, SplitPart::Val);
    assert_eq!(evaluate(&mut a, &data, &val).unwrap().accuracy, oa.best_val_accuracy);
    let ra = evaluate(&mut a, &data, &val).unwrap();
    let rb = evaluate(&mut b, &data, &val).unwrap();
    assert_eq!(ra, rb);
    assert!(oa.history_csv().starts_with("epoch,train_loss,val_accuracy\n1,"));
}

#[test]
fn empty_splits_are_rejected() {
    let (data, split) = scene();
    let mut m = tiny(&data, Variant::Full);
    let train_idx = data.indices(&split, SplitPart::Train);
    assert!(matches!(
        train_on(&mut m, &data, &[], &train_idx, &quick()),
        Err(Error::EmptySplit("train"))
    ));
    assert!(matches!(
        train_on(&mut m, &data, &train_idx, &[], &quick()),
        Err(Error::EmptySplit("val"))
    ));
    assert!(evaluate(&mut m, &data, &[]).is_err());
}

#[test]
fn nan_loss_reports_position() {
    let (data, split) = scene();
    let mut m = tiny(&data, Variant::Full);
    let id = m.store.find("head_fused.out.bias").unwrap();
    m.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = train(&mut m, &data, &split, &quick()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 1 }), "{err}");
}

#[test]
fn parameters_stay_finite_and_move() {
    let (data, split) = scene();
    let mut m = tiny(&data, Variant::Full);
    let before = m.store.clone();
    let idx = data.indices(&split, SplitPart::Train);
    let (x, y) = data.batch(&idx).unwrap();
    let mut adam = AdamState::new(&m.store, 1e-2);
    let mut rng = SeededRng::new(0);
    for _ in 0..5 {
        train_step(&mut m, &mut adam, &x, &y, &quick(), &mut rng).unwrap();
        assert!(m.store.all_finite());
    }
    assert_eq!(adam.t, 5);
    let id = m.store.find("gru.w_zx").unwrap();
    assert_ne!(m.store.get(id), before.get(id));
}

#[test]
fn overfit_probe_stops_at_target() {
    let (data, split) = scene();
    let mut m = tiny(&data, Variant::Full);
    let idx = data.indices(&split, SplitPart::Train);
    let (x, y) = data.batch(&idx[..16.min(idx.len())]).unwrap();
    let losses = overfit_probe(&mut m, &x, &y, &quick(), 400, 0.05).unwrap();
    assert!(*losses.last().unwrap() < 0.05, "{:?}", &losses[losses.len().saturating_sub(5)..]);
    assert!(losses.len() < 400);
}

#[test]
fn evaluation_rejects_class_mismatch() {
    let (data, split) = scene();
    let cfg = ModelConfig::tiny(3, data.timestamps, data.bands);
    let mut m = DuploModel::new(cfg, Variant::Full).unwrap();
    assert!(evaluate(&mut m, &data, &data.indices(&split, SplitPart::Test)).is_err());
}

#[test]
fn ablation_table_has_four_labelled_rows() {
    let (data, split) = scene();
    let rows: Vec<AblationRow> = Variant::ALL
        .into_iter()
        .map(|variant| {
            let mut m = tiny(&data, variant);
            let cfg = TrainConfig { variant, epochs: 1, ..quick() };
            let outcome = train(&mut m, &data, &split, &cfg).unwrap();
            let report = evaluate(&mut m, &data, &data.indices(&split, SplitPart::Test)).unwrap();
            AblationRow { variant, outcome, report }
        })
        .collect();
    let table = ablation_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,accuracy,fmeasure,kappa");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["DuPLO", "DuPLO_noAux", "Cbranch", "Rbranch"]);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
}
