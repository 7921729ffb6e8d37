use danas::archive::Archive;
use danas::encoding::*;
use danas::nn::{Role, StagedNetwork};
use danas::search_space::{encode_onehot, largest, sample, SearchSpaceSpec};

fn teacher(spec: &SearchSpaceSpec, seed: u64, gain: f32) -> StagedNetwork {
    let mut net = StagedNetwork::build(spec, &largest(spec), 10, seed).unwrap();
    for (k, t) in net.params.0.iter_mut() {
        if matches!(k.role, Role::ConvWeight(_)) {
            t.mapv_inplace(|v| v * gain);
        }
    }
    net
}

#[test]
fn embeddings_depend_on_the_teacher() {
    let spec = SearchSpaceSpec::mini();
    let d = PredictorDims::for_spec(&spec, 8, 16);
    let phi = d.init(0);
    let probe = NoiseProbe::new(&spec, 4, 0);
    let student = sample(&spec, 5).unwrap();
    let a = encode_task(&student, &teacher(&spec, 1, 1.0), &probe, &d, &phi).unwrap();
    let b = encode_task(&student, &teacher(&spec, 2, 1.2), &probe, &d, &phi).unwrap();
    assert_eq!(a.h_a, b.h_a);
    assert_ne!(a.h_zs, b.h_zs);
    assert_ne!(a.h_zt, b.h_zt);
    assert_ne!(a.fused, b.fused);
}

#[test]
fn teacher_as_student_has_matching_functional_embeddings() {
    let spec = SearchSpaceSpec::mini();
    let d = PredictorDims::for_spec(&spec, 8, 16);
    let phi = d.init(1);
    let probe = NoiseProbe::new(&spec, 4, 0);
    let t = teacher(&spec, 3, 1.0);
    let e = encode_task(&t.config, &t, &probe, &d, &phi).unwrap();
    assert_eq!(e.h_zs, e.h_zt);
    assert_eq!(functional_embedding(&t, &probe, &d, &phi).unwrap(), e.h_zt);
}

#[test]
fn fifty_students_encode_with_the_expected_shapes() {
    let spec = SearchSpaceSpec::standard();
    let d = PredictorDims::for_spec(&spec, 32, 128);
    let phi = d.init(2);
    let probe = NoiseProbe::new(&spec, 1, 0);
    let t = teacher(&spec, 0, 1.0);
    let tf = probe_features(&t, &probe).unwrap();
    assert_eq!(tf.len(), 256);
    for seed in 0..50 {
        let s = sample(&spec, seed).unwrap();
        let x = EncodedInput::new(&s, &t, &tf, &probe).unwrap();
        assert_eq!(x.active.len(), encode_onehot(&spec, &s).unwrap().iter().filter(|&&b| b == 1).count());
        let e = TaskEmbedding::from_input(&d, &phi, &x).unwrap();
        assert_eq!((e.h_a.len(), e.h_zs.len(), e.h_zt.len(), e.fused.len()), (32, 32, 32, 128));
        assert!(e.fused.iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn zero_head_weights_leave_only_the_head_bias() {
    let d = PredictorDims { onehot: 6, features: 3, embed: 4, hidden: 5 };
    let mut phi = d.init(4);
    let (w, b) = d.head_range();
    phi[w].iter_mut().for_each(|v| *v = 0.0);
    phi[b] = 0.37;
    let x = EncodedInput::from_parts(&[1, 0, 1, 0, 0, 1], vec![0.2, 0.5, 0.1], vec![1.0, 0.0, 0.3]);
    assert_eq!(forward(&d, &phi, &x).out, 0.37);
}

#[test]
fn infeasible_students_are_rejected() {
    let spec = SearchSpaceSpec::mini();
    let d = PredictorDims::for_spec(&spec, 4, 4);
    let small = StagedNetwork::build(&spec, &"depths=1,1 ratios=1/1".parse().unwrap(), 10, 0).unwrap();
    let probe = NoiseProbe::new(&spec, 2, 0);
    let big = largest(&spec);
    assert!(encode_task(&big, &small, &probe, &d, &d.init(0)).is_err());
}

#[test]
fn probes_are_seeded() {
    let spec = SearchSpaceSpec::mini();
    assert_eq!(NoiseProbe::new(&spec, 3, 9), NoiseProbe::new(&spec, 3, 9));
    assert_ne!(NoiseProbe::new(&spec, 3, 9).z, NoiseProbe::new(&spec, 3, 10).z);
    assert_eq!(NoiseProbe::new(&spec, 3, 9).z.shape(), &[3, 3, 8, 8]);
}

#[test]
fn fused_path_matches_finite_differences() {
    // The smallest instance of the full architecture: one one-hot bit, one feature, width one.
    let d = PredictorDims { onehot: 1, features: 1, embed: 1, hidden: 1 };
    assert_eq!(d.num_params(), 12);
    let phi = d.init(5);
    let x = EncodedInput::from_parts(&[1], vec![0.8], vec![-0.6]);
    let mut g = vec![0.0; 12];
    backward(&d, &phi, &x, &forward(&d, &phi, &x), 1.0, &mut g);
    for i in 0..12 {
        let h = 1e-5;
        let (mut p, mut m) = (phi.clone(), phi.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (forward(&d, &p, &x).out - forward(&d, &m, &x).out) / (2.0 * h);
        assert!((g[i] - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "{i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn embedding_dump_round_trips() {
    let spec = SearchSpaceSpec::mini();
    let d = PredictorDims::for_spec(&spec, 4, 6);
    let phi = d.init(0);
    let probe = NoiseProbe::new(&spec, 2, 0);
    let t = teacher(&spec, 0, 1.0);
    let items: Vec<(String, TaskEmbedding)> = (0..3)
        .map(|s| {
            let c = sample(&spec, s).unwrap();
            (c.to_string(), encode_task(&c, &t, &probe, &d, &phi).unwrap())
        })
        .collect();
    let back = Archive::from_bytes(&dump_embeddings(&items, &d, 0).to_bytes()).unwrap();
    for (i, (_, e)) in items.iter().enumerate() {
        let fused: Vec<f64> = back.f64(&format!("{i:05}/fused")).unwrap().iter().copied().collect();
        assert_eq!(fused, e.fused);
    }
    assert_eq!(back.meta["labels"][1], items[1].0.as_str());
}
