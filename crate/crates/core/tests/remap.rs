use ndarray::Dimension;
use danas::data::gaussian;
use danas::nn::StagedNetwork;
use danas::remap::{remap, remap_network, validate_remap_feasibility};
use danas::search_space::{largest, sample, SearchSpaceSpec};
use proptest::prelude::*;

fn teacher(spec: &SearchSpaceSpec) -> StagedNetwork {
    StagedNetwork::build(spec, &largest(spec), 7, 42).unwrap()
}

#[test]
fn remap_is_idempotent_and_contained() {
    let spec = SearchSpaceSpec::standard();
    let t = teacher(&spec);
    for seed in 0..20 {
        let cfg = sample(&spec, seed).unwrap();
        let once = remap_network(&t, &cfg).unwrap();
        assert_eq!(remap(&once, &cfg).unwrap(), once.params);
        for (key, s) in once.params.iter() {
            let src = t.params.get(key).unwrap();
            for (idx, v) in s.indexed_iter() {
                let idx = idx.slice().to_vec();
                assert_eq!(*v, src[idx.as_slice()], "{key}{idx:?}");
            }
        }
    }
}

#[test]
fn identity_remap_preserves_outputs() {
    let spec = SearchSpaceSpec::mini();
    let t = teacher(&spec);
    let s = remap_network(&t, &t.config).unwrap();
    let x = gaussian((3, 3, 8, 8), 0);
    assert_eq!(s.forward(&x).unwrap(), t.forward(&x).unwrap());
}

#[test]
fn students_of_the_largest_network_are_always_feasible() {
    let spec = SearchSpaceSpec::standard();
    let big = largest(&spec);
    for seed in 0..200 {
        let f = validate_remap_feasibility(&spec, &big, &sample(&spec, seed).unwrap());
        assert!(f.feasible, "{:?}", f.violations);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn remapped_student_runs(a in 0u64..1000, b in 0u64..1000) {
        let spec = SearchSpaceSpec::mini();
        let small = sample(&spec, a).unwrap();
        let mid = sample(&spec, b).unwrap();
        let t = StagedNetwork::build(&spec, &mid, 3, b).unwrap();
        let ok = validate_remap_feasibility(&spec, &mid, &small).feasible;
        match remap_network(&t, &small) {
            Ok(s) => {
                prop_assert!(ok);
                prop_assert_eq!(s.forward(&gaussian((1, 3, 8, 8), a)).unwrap().dim(), (1, 3));
            }
            Err(_) => prop_assert!(!ok),
        }
    }
}
