use danas::data::{gaussian, Dataset, SyntheticImages};
use danas::distill::{distill, evaluate, train_supervised, KDConfig};
use danas::nn::{argmax_rows, Role, StagedNetwork};
use danas::search_space::{largest, ArchConfig, SearchSpaceSpec};
use ndarray::Array4;

/// Two classes separated by the sign of channel 0.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut images: Array4<f32> = gaussian((n, 3, 8, 8), seed) * 0.3;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for (i, &l) in labels.iter().enumerate() {
        let sign = if l == 0 { 1.0 } else { -1.0 };
        images.slice_mut(ndarray::s![i, 0, .., ..]).mapv_inplace(|v| v + sign);
    }
    Dataset { images, labels, num_classes: 2 }
}

fn tiny() -> ArchConfig {
    "depths=1,1 ratios=1/1".parse().unwrap()
}

fn teacher(train: &Dataset, val: &Dataset) -> StagedNetwork {
    let spec = SearchSpaceSpec::mini();
    let net = StagedNetwork::build(&spec, &largest(&spec), 2, 0).unwrap();
    train_supervised(net, train, val, 3, 5e-2, 32, 0).unwrap().net
}

#[test]
fn separable_toy_is_learned() {
    let (train, val) = (separable(128, 1), separable(64, 2));
    let t = teacher(&train, &val);
    let cfg = KDConfig { epochs: 5, batch_size: 32, ..KDConfig::default() };
    let out = distill(&t, &tiny(), &train, &val, &cfg).unwrap();
    assert!(out.best_val_acc >= 0.95, "{:?}", out.history);
    assert_eq!(out.history.len(), 6);
    assert_eq!(evaluate(&out.net, &val).unwrap(), out.best_val_acc);
}

#[test]
fn zero_epochs_reports_initial_accuracy() {
    let ds = SyntheticImages { num_classes: 4, per_class: 25, ..Default::default() }.generate().unwrap();
    let t = StagedNetwork::build(&SearchSpaceSpec::mini(), &tiny(), 4, 3).unwrap();
    let cfg = KDConfig { epochs: 0, ..KDConfig::default() };
    let out = distill(&t, &tiny(), &ds, &ds, &cfg).unwrap();
    assert_eq!(out.history, vec![out.best_val_acc]);
    assert_eq!(out.best_val_acc, evaluate(&out.net, &ds).unwrap());
    assert!(out.best_val_acc < 0.6);
}

#[test]
fn distillation_is_deterministic_and_leaves_teacher_untouched() {
    let (train, val) = (separable(64, 3), separable(32, 4));
    let t = teacher(&train, &val);
    let before = t.clone();
    let cfg = KDConfig { epochs: 2, batch_size: 16, seed: 9, ..KDConfig::default() };
    let a = distill(&t, &tiny(), &train, &val, &cfg).unwrap();
    let b = distill(&t, &tiny(), &train, &val, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net, b.net);
    assert_eq!(t, before);
}

#[test]
fn class_count_mismatch_is_an_error() {
    let (train, val) = (separable(16, 3), separable(16, 4));
    let t = StagedNetwork::build(&SearchSpaceSpec::mini(), &tiny(), 3, 0).unwrap();
    assert!(distill(&t, &tiny(), &train, &val, &KDConfig::default()).is_err());
    let empty = Dataset { images: Array4::zeros((0, 3, 8, 8)), labels: vec![], num_classes: 2 };
    assert!(evaluate(&t, &empty).is_err());
}

#[test]
fn evaluate_oracles() {
    let spec = SearchSpaceSpec::mini();
    let ds = SyntheticImages { num_classes: 5, per_class: 20, ..Default::default() }.generate().unwrap();
    let net = StagedNetwork::build(&spec, &tiny(), 5, 1).unwrap();
    let own = Dataset { labels: argmax_rows(&net.forward(&ds.images).unwrap()), ..ds.clone() };
    assert_eq!(evaluate(&net, &own).unwrap(), 1.0);

    let mut constant = net.clone();
    for (k, t) in constant.params.0.iter_mut() {
        match k.role {
            Role::LinearWeight => t.fill(0.0),
            Role::LinearBias => t.iter_mut().enumerate().for_each(|(i, v)| *v = if i == 3 { 1.0 } else { 0.0 }),
            _ => {}
        }
    }
    assert_eq!(evaluate(&constant, &ds).unwrap(), 0.2);
    assert_eq!(evaluate(&net, &ds).unwrap(), evaluate(&net, &ds).unwrap());
}
