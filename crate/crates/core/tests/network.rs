use danas::data::gaussian;
use danas::nn::{ParamKey, Role, Site, StagedNetwork, Unit};
use danas::search_space::{count_costs, largest, sample, ArchConfig, SearchSpaceSpec};
use ndarray::{Array2, Array4, Ix1, Ix2, Ix4};

fn naive_conv(x: &Array4<f32>, w: &Array4<f32>, stride: usize) -> Array4<f32> {
    let (n, c, h, wd) = x.dim();
    let (o, _, k, _) = w.dim();
    let pad = (k / 2) as i64;
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut y = Array4::zeros((n, o, ho, wo));
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0f32;
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let yi = (i * stride + di) as i64 - pad;
                                let xj = (j * stride + dj) as i64 - pad;
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < wd {
                                    acc += x[[b, ic, yi as usize, xj as usize]] * w[[oc, ic, di, dj]];
                                }
                            }
                        }
                    }
                    y[[b, oc, i, j]] = acc;
                }
            }
        }
    }
    y
}

fn conv_bn(net: &StagedNetwork, x: &Array4<f32>, site: Site, unit: Unit, stride: usize) -> Array4<f32> {
    let p = |r: Role| net.params.get(&ParamKey::new(site, r)).unwrap().clone();
    let w = p(Role::ConvWeight(unit)).into_dimensionality::<Ix4>().unwrap();
    let v1 = |r| p(r).into_dimensionality::<Ix1>().unwrap();
    let (g, b, m, v) = (v1(Role::NormScale(unit)), v1(Role::NormShift(unit)), v1(Role::NormMean(unit)), v1(Role::NormVar(unit)));
    let mut y = naive_conv(x, &w, stride);
    for ((_, c, _, _), e) in y.indexed_iter_mut() {
        *e = (*e - m[c]) / (v[c] + 1e-5).sqrt() * g[c] + b[c];
    }
    y
}

/// Straight-line forward written from the architecture description alone.
fn oracle_forward(net: &StagedNetwork, x: &Array4<f32>) -> Array2<f32> {
    let relu = |a: Array4<f32>| a.mapv(|v| v.max(0.0));
    let spec = &net.spec;
    let mut h = relu(conv_bn(net, x, Site::Stem, Unit::Conv1, 1));
    let mut in_base = spec.stem_width();
    for (stage, ws) in net.config.widths(spec).iter().enumerate() {
        for (layer, &k) in ws.iter().enumerate() {
            let site = Site::Block { stage, layer };
            let stride = if stage > 0 && layer == 0 { 2 } else { 1 };
            let mid = relu(conv_bn(net, &h, site, Unit::Conv1, stride));
            let main = conv_bn(net, &mid, site, Unit::Conv2, 1);
            let projected = layer == 0 && (stage > 0 || in_base != spec.base_widths[stage]);
            let short = if projected {
                conv_bn(net, &h, site, Unit::Shortcut, stride)
            } else {
                let (n, c, hh, ww) = h.dim();
                Array4::from_shape_fn((n, k, hh, ww), |(b, ch, i, j)| if ch < c { h[[b, ch, i, j]] } else { 0.0 })
            };
            h = relu(main + short);
        }
        in_base = spec.base_widths[stage];
    }
    let (n, c, hh, ww) = h.dim();
    let w = net.params.get(&ParamKey::new(Site::Head, Role::LinearWeight)).unwrap().clone().into_dimensionality::<Ix2>().unwrap();
    let b = net.params.get(&ParamKey::new(Site::Head, Role::LinearBias)).unwrap();
    Array2::from_shape_fn((n, w.nrows()), |(i, o)| {
        b[[o]] + (0..c).map(|ch| w[[o, ch]] * (0..hh * ww).map(|p| h[[i, ch, p / ww, p % ww]]).sum::<f32>() / (hh * ww) as f32).sum::<f32>()
    })
}

fn perturb_moments(net: &mut StagedNetwork) {
    for (i, (k, t)) in net.params.0.iter_mut().enumerate() {
        match k.role {
            Role::NormMean(_) => t.mapv_inplace(|_| 0.1 * ((i % 7) as f32 - 3.0)),
            Role::NormVar(_) => t.mapv_inplace(|_| 0.5 + (i % 5) as f32 * 0.3),
            Role::NormShift(_) => t.mapv_inplace(|_| 0.05 * ((i % 3) as f32 - 1.0)),
            _ => {}
        }
    }
}

#[test]
fn logits_have_batch_by_class_shape() {
    let spec = SearchSpaceSpec::mini();
    let net = StagedNetwork::build(&spec, &sample(&spec, 4).unwrap(), 5, 0).unwrap();
    let y = net.forward(&gaussian((3, 3, 8, 8), 1)).unwrap();
    assert_eq!(y.dim(), (3, 5));
    assert!(net.forward(&gaussian((3, 3, 9, 8), 1)).is_err());
}

#[test]
fn build_is_seed_deterministic() {
    let spec = SearchSpaceSpec::mini();
    let cfg = largest(&spec);
    let a = StagedNetwork::build(&spec, &cfg, 4, 9).unwrap();
    assert_eq!(a, StagedNetwork::build(&spec, &cfg, 4, 9).unwrap());
    assert_ne!(a, StagedNetwork::build(&spec, &cfg, 4, 10).unwrap());
}

#[test]
fn param_count_matches_cost_model() {
    for spec in [SearchSpaceSpec::mini(), SearchSpaceSpec::standard()] {
        for seed in 0..10 {
            let cfg = sample(&spec, seed).unwrap();
            let net = StagedNetwork::build(&spec, &cfg, 20, seed).unwrap();
            let cost = count_costs(&spec, &cfg, spec.input_shape).with_head(&spec, 20);
            assert_eq!(net.param_count(), cost.params, "{cfg}");
        }
    }
}

#[test]
fn final_stage_shape_is_config_independent() {
    let spec = SearchSpaceSpec::standard();
    let x = gaussian((1, 3, 64, 64), 2);
    let mut shapes = std::collections::BTreeSet::new();
    for seed in 0..50 {
        let net = StagedNetwork::build(&spec, &sample(&spec, seed).unwrap(), 10, seed).unwrap();
        shapes.insert(net.forward_features(&x).unwrap().last().unwrap().dim());
    }
    assert_eq!(shapes.into_iter().collect::<Vec<_>>(), vec![(1, 256, 8, 8)]);
}

#[test]
fn stage_chain_reproduces_forward() {
    let spec = SearchSpaceSpec::mini();
    let net = StagedNetwork::build(&spec, &sample(&spec, 1).unwrap(), 3, 1).unwrap();
    let x = gaussian((2, 3, 8, 8), 3);
    let mut h = net.stem(&x).unwrap();
    for s in 0..spec.num_stages {
        h = net.stage(s, &h).unwrap();
    }
    assert_eq!(net.head(&h), net.forward(&x).unwrap());
}

#[test]
fn forward_matches_direct_oracle() {
    let spec = SearchSpaceSpec { base_widths: vec![6, 12], ..SearchSpaceSpec::mini() };
    for seed in 0..6 {
        let mut net = StagedNetwork::build(&spec, &sample(&spec, seed).unwrap(), 4, seed).unwrap();
        perturb_moments(&mut net);
        let x = gaussian((2, 3, 8, 8), seed + 100);
        let (got, want) = (net.forward(&x).unwrap(), oracle_forward(&net, &x));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let spec = SearchSpaceSpec::mini();
    let cfg: ArchConfig = "depths=2,2 ratios=0.5,1/0.75,1".parse().unwrap();
    let net = StagedNetwork::build(&spec, &cfg, 3, 5).unwrap();
    let x = gaussian((4, 3, 8, 8), 6);
    let r = gaussian((1, 1, 4, 3), 7).into_shape_with_order((4, 3)).unwrap();
    let loss = |n: &StagedNetwork| -> f64 {
        let (y, _) = n.forward_train(&x).unwrap();
        y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    };
    let (_, trace) = net.forward_train(&x).unwrap();
    let grads = net.backward(&trace, &r);
    assert_eq!(grads.len(), net.params.iter().filter(|(k, _)| k.role.is_trainable()).count());
    // ReLU kinks bias large steps and f32 rounding biases small ones, so take the best of a ladder.
    let mut checked = 0;
    for (key, g) in grads.iter() {
        for idx in [0, g.len() / 2, g.len() - 1] {
            let an = g.as_slice().unwrap()[idx] as f64;
            let fd_at = |eps: f32| {
                let mut plus = net.clone();
                plus.params.0.get_mut(key).unwrap().as_slice_mut().unwrap()[idx] += eps;
                let mut minus = net.clone();
                minus.params.0.get_mut(key).unwrap().as_slice_mut().unwrap()[idx] -= eps;
                (loss(&plus) - loss(&minus)) / (2.0 * eps as f64)
            };
            let err = [1e-2f32, 3e-3, 1e-3, 3e-4, 1e-4]
                .into_iter()
                .map(|e| (fd_at(e) - an).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(err < 1e-2 * (1.0 + an.abs()), "{key}[{idx}]: analytic {an}, best fd error {err}");
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn training_pass_updates_running_moments() {
    let spec = SearchSpaceSpec::mini();
    let mut net = StagedNetwork::build(&spec, &largest(&spec), 3, 0).unwrap();
    let before = net.params.clone();
    let (_, trace) = net.forward_train(&gaussian((4, 3, 8, 8), 1)).unwrap();
    net.fold_running_stats(&trace);
    for (k, t) in net.params.iter() {
        let changed = t != before.get(k).unwrap();
        assert_eq!(changed, !k.role.is_trainable(), "{k}");
    }
}

