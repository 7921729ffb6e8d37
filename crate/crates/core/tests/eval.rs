use danas::data::SyntheticImages;
use danas::encoding::EncodedInput;
use danas::eval::*;
use danas::nn::StagedNetwork;
use danas::predictor::PreparedTask;
use danas::rng;
use danas::search_space::{count_costs, sample, within_budget, ArchConfig, Budget, SearchSpaceSpec};
use danas::task_db::{make_synthetic_db, SyntheticDbConfig};
use danas::{Error, Result};
use rand::Rng;

/// Average ranks by counting, quadratic in n.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (oracle_ranks(a), oracle_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn spearman_matches_quadratic_oracle_with_ties() {
    let mut r = rng::seeded(17);
    let a: Vec<f64> = (0..1000).map(|_| r.random_range(0..60) as f64).collect();
    let b: Vec<f64> = a.iter().map(|x| (x + r.random_range(0..40) as f64).floor()).collect();
    let got = spearman(&a, &b).unwrap();
    assert!((got - oracle_spearman(&a, &b)).abs() < 1e-12);
}

#[test]
fn spearman_without_ties_matches_difference_formula() {
    let mut r = rng::seeded(3);
    let a: Vec<f64> = (0..200).map(|_| r.random()).collect();
    let b: Vec<f64> = (0..200).map(|_| r.random()).collect();
    let (ra, rb) = (oracle_ranks(&a), oracle_ranks(&b));
    let n = 200.0;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    let formula = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    assert!((spearman(&a, &b).unwrap() - formula).abs() < 1e-12);
}

#[test]
fn spearman_ignores_monotone_transforms() {
    let mut r = rng::seeded(5);
    let a: Vec<f64> = (0..100).map(|_| r.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = a.iter().map(|x| x + r.random_range(-2.0..2.0)).collect();
    let base = spearman(&a, &b).unwrap();
    let ta: Vec<f64> = a.iter().map(|x| x.exp()).collect();
    let tb: Vec<f64> = b.iter().map(|y| 3.0 * y.powi(3) - 7.0).collect();
    assert!((spearman(&ta, &tb).unwrap() - base).abs() < 1e-12);
}

fn stub_task(values: &[f64]) -> PreparedTask {
    let x = |v: f64| EncodedInput::from_parts(&[1, 0], vec![v], vec![0.0]);
    PreparedTask {
        id: "stub".into(),
        teacher_accuracy: 0.9,
        support: x(0.0),
        queries: values.iter().map(|&v| (x(v), v)).collect(),
    }
}

struct Stub<F: Fn(f64) -> f64>(F);

impl<F: Fn(f64) -> f64> Ranker for Stub<F> {
    fn rank_scores(&self, task: &PreparedTask, n: usize) -> Result<Vec<f64>> {
        Ok(task.queries[..n].iter().map(|(x, _)| (self.0)(x.student_features[0])).collect())
    }
}

#[test]
fn oracle_and_anti_oracle_stubs() {
    let mut r = rng::seeded(8);
    let task = stub_task(&(0..60).map(|_| r.random()).collect::<Vec<f64>>());
    assert_eq!(evaluate_predictor(&Stub(|v| v), &task, 50).unwrap(), 1.0);
    assert_eq!(evaluate_predictor(&Stub(|v| -v), &task, 50).unwrap(), -1.0);
    assert!(evaluate_predictor(&Stub(|v| v), &task, 61).is_err());
}

#[test]
fn random_stub_has_near_zero_mean_src() {
    let mut r = rng::seeded(9);
    let task = stub_task(&(0..50).map(|_| r.random()).collect::<Vec<f64>>());
    let mut total = 0.0;
    for seed in 0..100u64 {
        let scores: Vec<f64> = {
            let mut s = rng::seeded(seed);
            (0..50).map(|_| s.random()).collect()
        };
        struct Fixed(Vec<f64>);
        impl Ranker for Fixed {
            fn rank_scores(&self, _: &PreparedTask, n: usize) -> Result<Vec<f64>> {
                Ok(self.0[..n].to_vec())
            }
        }
        total += evaluate_predictor(&Fixed(scores), &task, 50).unwrap();
    }
    assert!((total / 100.0).abs() < 0.15, "{}", total / 100.0);
}

fn macs(spec: &SearchSpaceSpec, c: &ArchConfig) -> f64 {
    count_costs(spec, c, spec.input_shape).macs as f64
}

#[test]
fn single_candidate_is_top_one() {
    let spec = SearchSpaceSpec::standard();
    let res = search(&|c: &ArchConfig| Ok(macs(&spec, c)), "macs", &spec, 1, None, 4).unwrap();
    assert_eq!(res.ranked.len(), 1);
    assert_eq!(res.top().config, sample_candidates(&spec, 1, 4)[0]);
}

#[test]
fn impossible_budget_is_an_explicit_error() {
    let spec = SearchSpaceSpec::standard();
    let budget = Budget { max_macs: Some(1), max_params: None };
    let err = search(&|_: &ArchConfig| Ok(0.0), "const", &spec, 50, Some(budget), 0).unwrap_err();
    assert!(matches!(err, Error::Search(_)));
}

#[test]
fn ranking_respects_budget_order_and_ties() {
    let spec = SearchSpaceSpec::standard();
    let cands = sample_candidates(&spec, 300, 2);
    let mut sorted: Vec<f64> = cands.iter().map(|c| macs(&spec, c)).collect();
    sorted.sort_by(f64::total_cmp);
    let budget = Budget { max_macs: Some(sorted[150] as u64), max_params: None };
    // Scores collide in groups of ten so the tie-break decides most of the order.
    let score = |c: &ArchConfig| Ok((macs(&spec, c) / 1e7).floor());
    let a = rank_candidates(&score, "bucketed", &spec, &cands, Some(budget)).unwrap();
    let mut reversed = cands.clone();
    reversed.reverse();
    let b = rank_candidates(&score, "bucketed", &spec, &reversed, Some(budget)).unwrap();
    assert_eq!(a.ranked, b.ranked);
    assert!(a.ranked.iter().all(|r| within_budget(&r.cost, &budget)));
    for w in a.ranked.windows(2) {
        assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].config.to_string() < w[1].config.to_string()));
    }
    assert!(a.scoring_seconds > 0.0);
    let per = a.scoring_seconds / a.ranked.len() as f64;
    assert!((a.seconds_per_architecture - per).abs() <= 0.2 * per);
}

#[test]
fn search_deduplicates_candidates() {
    let spec = SearchSpaceSpec::mini();
    let res = search(&|_: &ArchConfig| Ok(1.0), "const", &spec, 100, None, 0).unwrap();
    assert_eq!(res.sampled, 100);
    assert!(res.ranked.len() <= 16);
    let names: std::collections::BTreeSet<String> = res.ranked.iter().map(|r| r.config.to_string()).collect();
    assert_eq!(names.len(), res.ranked.len());
}

#[test]
fn oracle_selection_beats_random_selection() {
    let spec = SearchSpaceSpec::standard();
    let db = make_synthetic_db(&spec, &SyntheticDbConfig { meta_train: 1, meta_val: 0, meta_test: 0, ..Default::default() }).unwrap();
    let oracle = db.header.oracle.clone().unwrap();
    let task = db.records[0].oracle.clone().unwrap();
    let value = |c: &ArchConfig| oracle.value(&spec, &task, c, 0.0).0;
    let (mut by_oracle, mut by_random) = (0.0, 0.0);
    for seed in 0..20u64 {
        let cands = sample_candidates(&spec, 200, seed);
        let best = rank_candidates(&|c: &ArchConfig| Ok(value(c)), "oracle", &spec, &cands, None).unwrap();
        let r = std::cell::RefCell::new(rng::seeded(seed));
        let rand = rank_candidates(&|_: &ArchConfig| Ok(r.borrow_mut().random::<f64>()), "random", &spec, &cands, None);
        let picked = rand.unwrap().top().config.clone();
        let mut all: Vec<f64> = cands.iter().map(value).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(value(&best.top().config), all[0]);
        by_oracle += value(&best.top().config);
        by_random += value(&picked);
    }
    assert!(by_oracle >= by_random);
}

fn toy_batch(n: usize) -> (ndarray::Array4<f32>, Vec<usize>) {
    let ds = SyntheticImages { num_classes: 4, per_class: n.div_ceil(4), ..Default::default() }.generate().unwrap();
    let idx: Vec<usize> = (0..n).collect();
    ds.select(&idx)
}

#[test]
fn zero_cost_scores_are_deterministic_and_finite() {
    let spec = SearchSpaceSpec::mini();
    let (x, y) = toy_batch(8);
    for seed in 0..50u64 {
        let c = sample(&spec, seed).unwrap();
        for m in [ZeroCostMethod::GradNorm, ZeroCostMethod::ActivationOverlap] {
            let a = zero_cost_score(m, &spec, &c, 4, &x, &y, seed).unwrap();
            assert_eq!(a, zero_cost_score(m, &spec, &c, 4, &x, &y, seed).unwrap());
            assert!(a.is_finite() || a == f64::NEG_INFINITY, "{m:?} {c}: {a}");
        }
    }
}

#[test]
fn degenerate_network_has_zero_grad_norm() {
    let spec = SearchSpaceSpec::mini();
    let c = sample(&spec, 1).unwrap();
    let mut net = StagedNetwork::build(&spec, &c, 4, 0).unwrap();
    for (k, t) in net.params.0.iter_mut() {
        if k.role.is_trainable() {
            t.fill(0.0);
        }
    }
    let (x, y) = toy_batch(8);
    assert_eq!(zero_cost_of(ZeroCostMethod::GradNorm, &net, &x, &y).unwrap(), 0.0);
}

#[test]
fn repeated_images_make_the_kernel_singular() {
    let spec = SearchSpaceSpec::mini();
    let c = sample(&spec, 2).unwrap();
    let (x, _) = toy_batch(4);
    let one = x.slice(ndarray::s![0..1, .., .., ..]).to_owned();
    let dup = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view(), one.view()]).unwrap();
    let s = zero_cost_score(ZeroCostMethod::ActivationOverlap, &spec, &c, 4, &dup, &[0, 0, 0], 0).unwrap();
    assert_eq!(s, f64::NEG_INFINITY);
}
