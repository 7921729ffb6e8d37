//! Rank-correlation evaluation, zero-cost baselines and budgeted search.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::TaskData;
use crate::distill::{distill, kd_loss, KDConfig, TrainOutcome};
use crate::encoding::{probe_features, EncodedInput, NoiseProbe};
use crate::error::{Error, Result};
use crate::nn::{Role, StagedNetwork};
use crate::predictor::{adapt_to_unseen, predict_task, PredictorState, PreparedTask};
use crate::rng;
use crate::search_space::{count_costs, sample_with, within_budget, ArchConfig, Budget, CostReport, SearchSpaceSpec};

pub use crate::stats::spearman;

/// Anything that scores the query configs of a prepared task.
pub trait Ranker {
    fn rank_scores(&self, task: &PreparedTask, n: usize) -> Result<Vec<f64>>;
}

impl Ranker for PredictorState {
    /// Adapts to the task's teacher pair, then predicts. Query accuracies are never used.
    fn rank_scores(&self, task: &PreparedTask, n: usize) -> Result<Vec<f64>> {
        predict_task(self, task, n)
    }
}

/// SRC of a ranker on the first `n_eval` stored pairs of a task.
pub fn evaluate_predictor<R: Ranker + ?Sized>(ranker: &R, task: &PreparedTask, n_eval: usize) -> Result<f64> {
    if n_eval < 2 || task.queries.len() < n_eval {
        return Err(Error::Usage(format!(
            "task {} has {} pairs, evaluation asks for {n_eval}",
            task.id,
            task.queries.len()
        )));
    }
    let pred = ranker.rank_scores(task, n_eval)?;
    let actual: Vec<f64> = task.queries[..n_eval].iter().map(|q| q.1).collect();
    spearman(&pred, &actual)
}

/// Scores candidate architectures; higher is better.
pub trait Scorer {
    fn score(&self, config: &ArchConfig) -> Result<f64>;
}

impl<F: Fn(&ArchConfig) -> Result<f64>> Scorer for F {
    fn score(&self, config: &ArchConfig) -> Result<f64> {
        self(config)
    }
}

/// Predictor already adapted to one teacher.
pub struct PredictorScorer<'a> {
    pub state: PredictorState,
    pub teacher: &'a StagedNetwork,
    pub probe: &'a NoiseProbe,
    teacher_features: Vec<f64>,
}

impl<'a> PredictorScorer<'a> {
    pub fn new(state: PredictorState, teacher: &'a StagedNetwork, probe: &'a NoiseProbe) -> Result<Self> {
        let teacher_features = probe_features(teacher, probe)?;
        Ok(Self { state, teacher, probe, teacher_features })
    }
}

impl Scorer for PredictorScorer<'_> {
    fn score(&self, config: &ArchConfig) -> Result<f64> {
        let x = EncodedInput::new(config, self.teacher, &self.teacher_features, self.probe)?;
        self.state.predict_input(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroCostMethod {
    GradNorm,
    ActivationOverlap,
}

impl std::str::FromStr for ZeroCostMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad-norm" => Ok(Self::GradNorm),
            "activation-overlap" => Ok(Self::ActivationOverlap),
            _ => Err(Error::Usage(format!("unknown zero-cost method {s:?} (grad-norm, activation-overlap)"))),
        }
    }
}

/// Score of `net` at its current weights on one labelled batch.
///
/// Grad-norm is the L2 norm of the cross-entropy gradient over every convolution and linear weight.
/// Activation-overlap builds `K[i][j] = N - hamming(c_i, c_j)` from the binary ReLU codes `c` of
/// the batch and returns `ln|det K|`, or negative infinity when `K` is singular.
pub fn zero_cost_of(method: ZeroCostMethod, net: &StagedNetwork, images: &Array4<f32>, labels: &[usize]) -> Result<f64> {
    if images.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} images, {} labels", images.shape()[0], labels.len())));
    }
    let (out, trace) = net.forward_train(images)?;
    match method {
        ZeroCostMethod::GradNorm => {
            let ce = KDConfig { temperature: 1.0, alpha: 1.0, ..KDConfig::default() };
            let (_, dlogits) = kd_loss(&out, &out, labels, &ce)?;
            let grads = net.backward(&trace, &dlogits);
            let sq: f64 = grads
                .iter()
                .filter(|(k, _)| matches!(k.role, Role::ConvWeight(_) | Role::LinearWeight))
                .flat_map(|(_, g)| g.iter())
                .map(|&v| f64::from(v) * f64::from(v))
                .sum();
            Ok(sq.sqrt())
        }
        ZeroCostMethod::ActivationOverlap => {
            let n = labels.len();
            let codes: Vec<Vec<bool>> = (0..n)
                .map(|i| trace.activations().flat_map(|a| a.index_axis(ndarray::Axis(0), i).iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect())
                .collect();
            let na = codes[0].len() as f64;
            let mut k = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let ham = codes[i].iter().zip(&codes[j]).filter(|(a, b)| a != b).count() as f64;
                    k[i][j] = na - ham;
                }
            }
            Ok(log_abs_det(k))
        }
    }
}

/// Builds a freshly initialized network for `config` and scores it on the batch.
pub fn zero_cost_score(
    method: ZeroCostMethod,
    spec: &SearchSpaceSpec,
    config: &ArchConfig,
    num_classes: usize,
    images: &Array4<f32>,
    labels: &[usize],
    seed: u64,
) -> Result<f64> {
    let net = StagedNetwork::build(spec, config, num_classes, rng::derive_seed(seed, "zero-cost-init"))?;
    zero_cost_of(method, &net, images, labels)
}

/// `ln|det A|` by partially pivoted elimination; negative infinity for singular matrices.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c].abs() <= 1e-12 * scale {
            return f64::NEG_INFINITY;
        }
        a.swap(c, p);
        acc += a[c][c].abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub config: ArchConfig,
    pub score: f64,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub method: String,
    pub budget: Option<Budget>,
    /// Configs drawn before deduplication and budget filtering.
    pub sampled: usize,
    /// Sorted by score descending, ties broken by the serialized config.
    pub ranked: Vec<RankedCandidate>,
    pub scoring_seconds: f64,
    pub seconds_per_architecture: f64,
}

impl SearchResult {
    pub fn top(&self) -> &RankedCandidate {
        &self.ranked[0]
    }
}

/// Distinct configs from `n_candidates` uniform draws, in first-seen order.
pub fn sample_candidates(spec: &SearchSpaceSpec, n_candidates: usize, seed: u64) -> Vec<ArchConfig> {
    let mut rng = rng::seeded(rng::derive_seed(seed, "search"));
    let mut seen = BTreeSet::new();
    (0..n_candidates)
        .map(|_| sample_with(spec, &mut rng))
        .filter(|c| seen.insert(c.to_string()))
        .collect()
}

/// Scores the budget-satisfying members of `candidates` and ranks them. Costs cover the backbone
/// at the space's input size.
pub fn rank_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    method: &str,
    spec: &SearchSpaceSpec,
    candidates: &[ArchConfig],
    budget: Option<Budget>,
) -> Result<SearchResult> {
    let kept: Vec<(ArchConfig, CostReport)> = candidates
        .iter()
        .map(|c| (c.clone(), count_costs(spec, c, spec.input_shape)))
        .filter(|(_, cost)| budget.is_none_or(|b| within_budget(cost, &b)))
        .collect();
    if kept.is_empty() {
        return Err(Error::Search(format!("none of {} candidates satisfies the budget", candidates.len())));
    }
    let start = Instant::now();
    let mut ranked = kept
        .into_iter()
        .map(|(config, cost)| Ok(RankedCandidate { score: scorer.score(&config)?, config, cost }))
        .collect::<Result<Vec<_>>>()?;
    let scoring_seconds = start.elapsed().as_secs_f64();
    if ranked.iter().any(|r| r.score.is_nan()) {
        return Err(Error::Search("scorer returned NaN".into()));
    }
    ranked.sort_by_cached_key(|r| r.config.to_string());
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(SearchResult {
        method: method.to_string(),
        budget,
        sampled: candidates.len(),
        seconds_per_architecture: scoring_seconds / ranked.len() as f64,
        ranked,
        scoring_seconds,
    })
}

/// Samples `n_candidates` configs, drops duplicates and over-budget configs, scores and ranks.
pub fn search<S: Scorer + ?Sized>(
    scorer: &S,
    method: &str,
    spec: &SearchSpaceSpec,
    n_candidates: usize,
    budget: Option<Budget>,
    seed: u64,
) -> Result<SearchResult> {
    spec.validate()?;
    let mut result = rank_candidates(scorer, method, spec, &sample_candidates(spec, n_candidates, seed), budget)?;
    result.sampled = n_candidates;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub search: SearchResult,
    /// Teacher validation accuracy used for adaptation.
    pub teacher_accuracy: f64,
    pub distilled: TrainOutcome,
}

/// Adapts to the task's teacher, searches, and distills the top-1 student with `kd`.
#[allow(clippy::too_many_arguments)]
pub fn end_to_end(
    state: &PredictorState,
    teacher: &StagedNetwork,
    task: &TaskData,
    probe: &NoiseProbe,
    kd: &KDConfig,
    n_candidates: usize,
    budget: Option<Budget>,
    seed: u64,
) -> Result<EndToEnd> {
    let (adapted, teacher_accuracy) = adapt_to_unseen(state, teacher, &task.val, probe)?;
    let scorer = PredictorScorer::new(adapted, teacher, probe)?;
    let search = search(&scorer, "danas", &teacher.spec, n_candidates, budget, seed)?;
    let distilled = distill(teacher, &search.top().config, &task.train, &task.val, kd)?;
    Ok(EndToEnd { search, teacher_accuracy, distilled })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_of_known_matrices() {
        let d = log_abs_det(vec![vec![2.0, 1.0], vec![1.0, 3.0]]);
        assert!((d - 5f64.ln()).abs() < 1e-12);
        assert_eq!(log_abs_det(vec![vec![1.0, 2.0], vec![2.0, 4.0]]), f64::NEG_INFINITY);
        assert_eq!(log_abs_det(vec![vec![0.0]]), f64::NEG_INFINITY);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("grad-norm".parse::<ZeroCostMethod>().unwrap(), ZeroCostMethod::GradNorm);
        assert!("synflow".parse::<ZeroCostMethod>().is_err());
    }
}
