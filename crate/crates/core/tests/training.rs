mod common;

use m2dan_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use m2dan_core::data::source_only;
use m2dan_core::layers::ParamGroup;
use m2dan_core::losses::HyperParams;
use m2dan_core::model::{DomainHead, ModelBundle, ScaleVariant};
use m2dan_core::training::{build_objective, train, train_source_only, train_step, ClassLoss, Objective};
use m2dan_core::Error;
use m2dan_tensor::Tape;

fn hp(epochs: usize) -> HyperParams {
    HyperParams {
        epochs,
        batch_size: 6,
        lr: 0.01,
        ..HyperParams::default()
    }
}

#[test]
fn zero_alpha_step_isolates_the_discriminator() {
    let data = common::tiny_benchmark(1, 16);
    let batch = common::four_sample_batch(&data);
    let model = common::reduced_model(2);
    let hp = HyperParams {
        alpha: 0.0,
        lr: 0.05,
        ..HyperParams::default()
    };

    let mut adversarial = model.clone();
    train_step(&mut adversarial, &batch, &hp, &Objective::full(), 0).unwrap();
    let mut detached = model.clone();
    let no_domain = Objective {
        domain: false,
        ..Objective::full()
    };
    train_step(&mut detached, &batch, &hp, &no_domain, 0).unwrap();

    // Discriminator gradient of L_d alone.
    let mut t = Tape::new();
    let bound = model.params.bind(&mut t, true);
    let l = build_objective(&model, &mut t, &bound, &batch, &hp, &Objective::full(), DomainHead::Direct).unwrap();
    t.backward(l.domain.unwrap()).unwrap();

    let mut moved = false;
    for (path, before) in model.params.iter() {
        let after = adversarial.params.get(path).unwrap().data();
        if ParamGroup::of_path(path) == Some(ParamGroup::Gd) {
            let g = t.grad(bound.get(path).unwrap()).unwrap();
            for ((a, b), g) in after.iter().zip(before.data()).zip(g) {
                assert!((a - (b - hp.lr * g)).abs() <= 1e-12, "{path}");
                moved |= a != b;
            }
            assert_eq!(detached.params.get(path).unwrap().data(), before.data());
        } else {
            let reference = detached.params.get(path).unwrap().data();
            for (a, r) in after.iter().zip(reference) {
                assert!((a - r).abs() <= 1e-12, "{path}");
            }
        }
    }
    assert!(moved, "the discriminator must keep learning");
}

#[test]
fn decoupled_objective_replays_source_only_training() {
    let data = source_only(&common::tiny_benchmark(4, 16));
    let mut spec = common::reduced_spec();
    spec.num_domains = 1;
    let hp = HyperParams {
        alpha: 0.0,
        eta: 0.0,
        batch_size: 4,
        ..hp(2)
    };
    let a = train(ModelBundle::build(spec.clone(), 8).unwrap(), &data, &hp, Objective::full(), |_| {}).unwrap();
    let b = train_source_only(ModelBundle::build(spec, 8).unwrap(), &data, &hp, ClassLoss::Focal, |_| {}).unwrap();
    for ((pa, ta), (pb, tb)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(pa, pb);
        let same = ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{pa} diverged");
    }
    for (ra, rb) in a.history.iter().zip(&b.history) {
        assert_eq!(ra.l_fo.to_bits(), rb.l_fo.to_bits());
        assert_eq!(ra.domains, rb.domains);
    }
}

#[test]
fn training_is_bit_reproducible_and_finite() {
    let data = common::tiny_benchmark(5, 16);
    let run = || {
        train(common::reduced_model(3), &data, &hp(2), Objective::full(), |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(encode(&a).unwrap(), encode(&b).unwrap());
    assert_eq!(a.history_csv(), b.history_csv());
    assert_eq!(a.history.len(), 2);
    for r in &a.history {
        assert!(r.l_fo.is_finite() && r.l_en.is_finite() && r.l_d.is_finite());
        assert_eq!(r.domains.len(), 3);
    }
    let header = a.history_csv().lines().next().unwrap().to_string();
    assert_eq!(
        header,
        "epoch,l_fo,l_en,l_d,acc_source,auc_source,acc_target1,auc_target1,acc_target2,auc_target2"
    );
}

#[test]
fn trained_checkpoint_round_trips() {
    let data = common::tiny_benchmark(6, 16);
    let state = train(common::reduced_model(1), &data, &hp(1), Objective::full(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.m2dn");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path, &common::reduced_spec()).unwrap();
    assert_eq!(back, state);
    assert_eq!(encode(&back).unwrap(), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode(&bytes[..10], &common::reduced_spec()), Err(Error::CorruptFile(_))));
    let mut other = common::reduced_spec();
    other.scale = ScaleVariant::S5.spec(other.scale.branch_channels);
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::SpecMismatch(_))));
}

#[test]
fn source_only_needs_divisible_batches() {
    let data = common::tiny_benchmark(1, 16);
    let hp = HyperParams {
        batch_size: 7,
        ..hp(1)
    };
    assert!(matches!(
        train_source_only(common::reduced_model(0), &data, &hp, ClassLoss::Focal, |_| {}),
        Err(Error::IndivisibleBatch { .. })
    ));
}
