//! Meta-learned accuracy predictor with teacher-guided inner adaptation.
//!
//! Each task contributes one support pair, the teacher encoded as its own student together with
//! the teacher's measured accuracy, and a set of query pairs. Adaptation takes `I` steps of
//! `phi <- phi - alpha * grad` on the support squared error; the outer loss is the query mean
//! squared error at the adapted parameters. Outer gradients reach both `phi` and the per-parameter
//! step sizes `alpha`, through the inner updates, using exact Hessian-vector products unless the
//! first-order switch is on.

use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Tensor};
use crate::autodiff::{Dual, Real};
use crate::data::Dataset;
use crate::distill::evaluate;
use crate::encoding::{backward, forward, probe_features, EncodedInput, NoiseProbe, PredictorDims};
use crate::error::{Error, Result};
use crate::nn::StagedNetwork;
use crate::rng;
use crate::search_space::{ArchConfig, SearchSpaceSpec};
use crate::stats::spearman;

/// A differentiable scalar model trained with squared error.
pub trait Regressor {
    type Input;

    fn num_params(&self) -> usize;

    fn predict<R: Real>(&self, phi: &[R], x: &Self::Input) -> R;

    /// Adds `scale * d/dphi (f(x) - y)^2` into `grad` and returns `f(x)`.
    fn accumulate<R: Real>(&self, phi: &[R], x: &Self::Input, y: f64, scale: f64, grad: &mut [R]) -> R;
}

impl Regressor for PredictorDims {
    type Input = EncodedInput;

    fn num_params(&self) -> usize {
        PredictorDims::num_params(self)
    }

    fn predict<R: Real>(&self, phi: &[R], x: &EncodedInput) -> R {
        forward(self, phi, x).out
    }

    fn accumulate<R: Real>(&self, phi: &[R], x: &EncodedInput, y: f64, scale: f64, grad: &mut [R]) -> R {
        let f = forward(self, phi, x);
        let dout = R::cst(2.0 * scale) * (f.out - R::cst(y));
        backward(self, phi, x, &f, dout, grad);
        f.out
    }
}

/// Mean squared error over `data` and its gradient.
pub fn mse_grad<M: Regressor>(m: &M, phi: &[f64], data: &[(&M::Input, f64)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; phi.len()];
    let scale = 1.0 / data.len() as f64;
    let mut loss = 0.0;
    for &(x, y) in data {
        let f = m.accumulate(phi, x, y, scale, &mut grad);
        loss += scale * (f - y) * (f - y);
    }
    (loss, grad)
}

/// Hessian of the single-pair squared error at `phi`, applied to `u`.
pub fn hvp<M: Regressor>(m: &M, phi: &[f64], x: &M::Input, y: f64, u: &[f64]) -> Vec<f64> {
    let dual: Vec<Dual> = phi.iter().zip(u).map(|(&p, &t)| Dual::new(p, t)).collect();
    let mut grad = vec![Dual::default(); phi.len()];
    m.accumulate(&dual, x, y, 1.0, &mut grad);
    grad.into_iter().map(|g| g.eps).collect()
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Inner adaptation on the support pair. Returns the adapted parameters and the inner gradients
/// `g_0 .. g_{I-1}` along with the iterates they were taken at.
pub fn adapt<M: Regressor>(
    m: &M,
    phi: &[f64],
    alpha: &[f64],
    support: &M::Input,
    target: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut cur = phi.to_vec();
    let mut trail = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, g) = mse_grad(m, &cur, &[(support, target)]);
        if !finite(&g) {
            return Err(Error::Adaptation("non-finite inner gradient".into()));
        }
        let next: Vec<f64> = cur.iter().zip(alpha).zip(&g).map(|((p, a), g)| p - a * g).collect();
        trail.push((cur, g));
        cur = next;
    }
    Ok((cur, trail))
}

/// One task's outer loss and its gradients with respect to `phi` and `alpha`.
pub fn meta_gradient<M: Regressor>(
    m: &M,
    phi: &[f64],
    alpha: &[f64],
    support: (&M::Input, f64),
    queries: &[(&M::Input, f64)],
    steps: usize,
    first_order: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if queries.is_empty() {
        return Err(Error::Usage("task has no query pairs".into()));
    }
    let (adapted, trail) = adapt(m, phi, alpha, support.0, support.1, steps)?;
    let (loss, mut v) = mse_grad(m, &adapted, queries);
    let mut dalpha = vec![0.0; phi.len()];
    for (phi_i, g_i) in trail.iter().rev() {
        for j in 0..v.len() {
            dalpha[j] -= v[j] * g_i[j];
        }
        if !first_order {
            let u: Vec<f64> = alpha.iter().zip(&v).map(|(a, v)| a * v).collect();
            let hu = hvp(m, phi_i, support.0, support.1, &u);
            for j in 0..v.len() {
                v[j] -= hu[j];
            }
        }
    }
    if !finite(&v) || !finite(&dalpha) || !loss.is_finite() {
        return Err(Error::Adaptation("non-finite outer gradient".into()));
    }
    Ok((loss, v, dalpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub embed: usize,
    pub hidden: usize,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub alpha_init: f64,
    pub first_order: bool,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { embed: 32, hidden: 128, inner_steps: 1, meta_lr: 1e-3, alpha_init: 1e-3, first_order: false, seed: 0 }
    }
}

/// Trainable state: parameters, inner step sizes and the outer optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub dims: PredictorDims,
    pub phi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub seed: u64,
    pub first_order: bool,
    pub opt_phi: Adam,
    pub opt_alpha: Adam,
}

impl PredictorState {
    pub fn new(dims: PredictorDims, cfg: &PredictorConfig) -> Self {
        let n = dims.num_params();
        Self {
            dims,
            phi: dims.init(rng::derive_seed(cfg.seed, "predictor-init")),
            alpha: vec![cfg.alpha_init; n],
            inner_steps: cfg.inner_steps,
            meta_lr: cfg.meta_lr,
            seed: cfg.seed,
            first_order: cfg.first_order,
            opt_phi: Adam::new(cfg.meta_lr, n),
            opt_alpha: Adam::new(cfg.meta_lr, n),
        }
    }

    pub fn predict_input(&self, x: &EncodedInput) -> Result<f64> {
        self.dims.check(self.phi.len(), x)?;
        Ok(forward(&self.dims, &self.phi, x).out)
    }

    /// Copy of this state with `phi` replaced by its adaptation to the task's support pair.
    pub fn adapted(&self, task: &PreparedTask) -> Result<Self> {
        self.dims.check(self.phi.len(), &task.support)?;
        let (phi, _) = adapt(&self.dims, &self.phi, &self.alpha, &task.support, task.teacher_accuracy, self.inner_steps)?;
        Ok(Self { phi, ..self.clone() })
    }
}

/// Task inputs with all network-dependent features precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedTask {
    pub id: String,
    pub teacher_accuracy: f64,
    pub support: EncodedInput,
    pub queries: Vec<(EncodedInput, f64)>,
}

impl PreparedTask {
    pub fn new(
        id: &str,
        teacher: &StagedNetwork,
        teacher_accuracy: f64,
        pairs: &[(ArchConfig, f64)],
        probe: &NoiseProbe,
    ) -> Result<Self> {
        let tf = probe_features(teacher, probe)?;
        let queries = pairs
            .iter()
            .map(|(c, y)| Ok((EncodedInput::new(c, teacher, &tf, probe)?, *y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.to_string(),
            teacher_accuracy,
            support: EncodedInput::teacher_as_student(teacher, &tf)?,
            queries,
        })
    }
}

/// A task together with the indices of the query pairs used in one step.
pub type TaskBatch<'a> = (&'a PreparedTask, Vec<usize>);

fn batch_gradient(state: &PredictorState, batch: &[TaskBatch], steps: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("meta step needs at least one task".into()));
    }
    let n = state.phi.len();
    let (mut loss, mut dphi, mut dalpha) = (0.0, vec![0.0; n], vec![0.0; n]);
    let w = 1.0 / batch.len() as f64;
    for (task, idx) in batch {
        state.dims.check(n, &task.support)?;
        let queries: Vec<(&EncodedInput, f64)> = idx.iter().map(|&i| (&task.queries[i].0, task.queries[i].1)).collect();
        if let Some((x, _)) = queries.first() {
            state.dims.check(n, x)?;
        }
        let (l, gp, ga) = meta_gradient(
            &state.dims,
            &state.phi,
            &state.alpha,
            (&task.support, task.teacher_accuracy),
            &queries,
            steps,
            state.first_order,
        )?;
        loss += w * l;
        for j in 0..n {
            dphi[j] += w * gp[j];
            dalpha[j] += w * ga[j];
        }
    }
    Ok((loss, dphi, dalpha))
}

/// One outer update of `phi` and `alpha`. Returns the mean outer loss before the update.
pub fn meta_step(state: &mut PredictorState, batch: &[TaskBatch]) -> Result<f64> {
    let (loss, dphi, dalpha) = batch_gradient(state, batch, state.inner_steps)?;
    state.opt_phi.step(&mut state.phi, &dphi);
    state.opt_alpha.step(&mut state.alpha, &dalpha);
    Ok(loss)
}

/// Plain amortized regression: fits the query pairs directly, without inner adaptation.
pub fn amortized_step(state: &mut PredictorState, batch: &[TaskBatch]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("regression step needs at least one task".into()));
    }
    let n = state.phi.len();
    let (mut loss, mut grad) = (0.0, vec![0.0; n]);
    let w = 1.0 / batch.len() as f64;
    for (task, idx) in batch {
        let data: Vec<(&EncodedInput, f64)> = idx.iter().map(|&i| (&task.queries[i].0, task.queries[i].1)).collect();
        let (l, g) = mse_grad(&state.dims, &state.phi, &data);
        loss += w * l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
    }
    state.opt_phi.step(&mut state.phi, &grad);
    Ok(loss)
}

/// Predicted scores for the first `n_eval` query configs of a task, after adaptation.
pub fn predict_task(state: &PredictorState, task: &PreparedTask, n_eval: usize) -> Result<Vec<f64>> {
    let adapted = state.adapted(task)?;
    task.queries
        .iter()
        .take(n_eval)
        .map(|(x, _)| adapted.predict_input(x))
        .collect()
}

/// Spearman correlation between adapted predictions and stored accuracies on the first `n_eval`
/// query pairs.
pub fn task_src(state: &PredictorState, task: &PreparedTask, n_eval: usize) -> Result<f64> {
    if task.queries.len() < n_eval.max(2) {
        return Err(Error::Usage(format!(
            "task {} has {} pairs, evaluation needs {}",
            task.id,
            task.queries.len(),
            n_eval.max(2)
        )));
    }
    let pred = predict_task(state, task, n_eval)?;
    let actual: Vec<f64> = task.queries.iter().take(n_eval).map(|q| q.1).collect();
    spearman(&pred, &actual)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSchedule {
    pub iterations: usize,
    pub meta_batch: usize,
    pub query_pairs: usize,
    pub eval_every: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for MetaSchedule {
    fn default() -> Self {
        Self { iterations: 500, meta_batch: 8, query_pairs: 50, eval_every: 25, n_eval: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainLog {
    /// Mean outer loss per iteration.
    pub losses: Vec<f64>,
    /// `(iteration, mean validation SRC)` at each evaluation point; iteration 0 is the initial state.
    pub val_src: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub seconds: f64,
}

fn mean_src(state: &PredictorState, tasks: &[PreparedTask], n_eval: usize) -> Result<f64> {
    let mut sum = 0.0;
    for t in tasks {
        sum += task_src(state, t, n_eval.min(t.queries.len()))?;
    }
    Ok(sum / tasks.len() as f64)
}

/// Episodic meta-training with model selection by mean meta-validation SRC.
pub fn meta_train(
    state: &PredictorState,
    train: &[PreparedTask],
    val: &[PreparedTask],
    schedule: &MetaSchedule,
) -> Result<(PredictorState, MetaTrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("meta-training needs at least one meta-train and one meta-validation task".into()));
    }
    if let Some(t) = train.iter().find(|t| t.queries.is_empty()) {
        return Err(Error::Usage(format!("meta-train task {} has no pairs", t.id)));
    }
    let start = Instant::now();
    let mut rng = rng::seeded(rng::derive_seed(schedule.seed, "episodes"));
    let mut cur = state.clone();
    let mut best = state.clone();
    let mut best_src = mean_src(state, val, schedule.n_eval)?;
    let mut log = MetaTrainLog { losses: Vec::new(), val_src: vec![(0, best_src)], best_iteration: 0, seconds: 0.0 };
    let every = schedule.eval_every.max(1);
    for it in 1..=schedule.iterations {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(schedule.meta_batch.clamp(1, train.len()));
        let batch: Vec<TaskBatch> = order
            .iter()
            .map(|&t| {
                let n = train[t].queries.len();
                (&train[t], index::sample(&mut rng, n, schedule.query_pairs.clamp(1, n)).into_vec())
            })
            .collect();
        log.losses.push(meta_step(&mut cur, &batch)?);
        if it % every == 0 || it == schedule.iterations {
            let src = mean_src(&cur, val, schedule.n_eval)?;
            log.val_src.push((it, src));
            if src > best_src {
                best_src = src;
                best = cur.clone();
                log.best_iteration = it;
            }
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok((best, log))
}

/// Measures the teacher on the validation split and adapts to that single pair.
pub fn adapt_to_unseen(
    state: &PredictorState,
    teacher: &StagedNetwork,
    val: &Dataset,
    probe: &NoiseProbe,
) -> Result<(PredictorState, f64)> {
    if val.is_empty() {
        return Err(Error::Adaptation("empty validation split".into()));
    }
    let acc = evaluate(teacher, val)?;
    let task = PreparedTask::new("unseen", teacher, acc, &[], probe)?;
    Ok((state.adapted(&task)?, acc))
}

/// Score of one student under a teacher, with the state's current parameters.
pub fn predict(state: &PredictorState, student: &ArchConfig, teacher: &StagedNetwork, probe: &NoiseProbe) -> Result<f64> {
    let tf = probe_features(teacher, probe)?;
    state.predict_input(&EncodedInput::new(student, teacher, &tf, probe)?)
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::F64(Array1::from(v.to_vec()).into_dyn())
}

fn tensor_vec(a: &Archive, name: &str) -> Result<Vec<f64>> {
    Ok(a.f64(name)?.iter().copied().collect())
}

/// A predictor together with the space and noise probe its features were computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorCheckpoint {
    pub state: PredictorState,
    pub spec: SearchSpaceSpec,
    pub probe_seed: u64,
    pub probe_batch: usize,
}

impl PredictorCheckpoint {
    pub fn probe(&self) -> NoiseProbe {
        NoiseProbe::new(&self.spec, self.probe_batch, self.probe_seed)
    }

    /// `phi`, `alpha` and both optimizers' moments as tensors; settings in the metadata.
    pub fn to_archive(&self) -> Archive {
        let state = &self.state;
        let mut a = Archive::new(serde_json::json!({
            "kind": "predictor",
            "dims": state.dims,
            "inner_steps": state.inner_steps,
            "meta_lr": state.meta_lr,
            "seed": state.seed,
            "first_order": state.first_order,
            "spec": self.spec.to_string(),
            "probe_seed": self.probe_seed,
            "probe_batch": self.probe_batch,
            "adam_t": [state.opt_phi.t, state.opt_alpha.t],
        }));
        a.tensors.insert("phi".into(), vec_tensor(&state.phi));
        a.tensors.insert("alpha".into(), vec_tensor(&state.alpha));
        for (name, opt) in [("opt_phi", &state.opt_phi), ("opt_alpha", &state.opt_alpha)] {
            a.tensors.insert(format!("{name}.m"), vec_tensor(&opt.m));
            a.tensors.insert(format!("{name}.v"), vec_tensor(&opt.v));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta_str("kind")? != "predictor" {
            return Err(Error::Archive("archive does not hold a predictor".into()));
        }
        let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| Error::Archive(format!("metadata lacks {k}")));
        let dims: PredictorDims = serde_json::from_value(field("dims")?)?;
        let inner_steps: usize = serde_json::from_value(field("inner_steps")?)?;
        let meta_lr: f64 = serde_json::from_value(field("meta_lr")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let first_order: bool = serde_json::from_value(field("first_order")?)?;
        let spec: SearchSpaceSpec = a.meta_str("spec")?.parse()?;
        let probe_seed: u64 = serde_json::from_value(field("probe_seed")?)?;
        let probe_batch: usize = serde_json::from_value(field("probe_batch")?)?;
        let [tp, ta]: [u64; 2] = serde_json::from_value(field("adam_t")?)?;
        if dims != PredictorDims::for_spec(&spec, dims.embed, dims.hidden) {
            return Err(Error::Archive("predictor dims do not match its search space".into()));
        }
        let n = dims.num_params();
        let load = |name: &str| -> Result<Vec<f64>> {
            let v = tensor_vec(a, name)?;
            if v.len() != n {
                return Err(Error::Archive(format!("{name} has {} entries, dims need {n}", v.len())));
            }
            Ok(v)
        };
        let mut opt_phi = Adam::new(meta_lr, n);
        (opt_phi.m, opt_phi.v, opt_phi.t) = (load("opt_phi.m")?, load("opt_phi.v")?, tp);
        let mut opt_alpha = Adam::new(meta_lr, n);
        (opt_alpha.m, opt_alpha.v, opt_alpha.t) = (load("opt_alpha.m")?, load("opt_alpha.v")?, ta);
        let state = PredictorState {
            dims,
            phi: load("phi")?,
            alpha: load("alpha")?,
            inner_steps,
            meta_lr,
            seed,
            first_order,
            opt_phi,
            opt_alpha,
        };
        Ok(Self { state, spec, probe_seed, probe_batch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
