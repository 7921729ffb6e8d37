//! Knowledge distillation and supervised training of staged networks.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ParamTable, StagedNetwork};
use crate::rng;
use crate::search_space::ArchConfig;

/// Argument order of the soft cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftOrder {
    /// `H(p_t, p_s)`: teacher probabilities are the targets.
    #[default]
    TeacherTargets,
    /// `H(p_s, p_t)`, the argument order as printed in the original formula.
    StudentFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub soft_order: SoftOrder,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            temperature: 6.0,
            alpha: 0.5,
            epochs: 50,
            lr: 5e-2,
            batch_size: 64,
            seed: 0,
            soft_order: SoftOrder::TeacherTargets,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Temperature softmax with max subtraction.
pub fn soften(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Distill(format!("temperature must be positive, got {temperature}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Distill("non-finite logits".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - m) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / sum).collect())
}

fn row(a: &Array2<f32>, i: usize) -> Vec<f64> {
    a.row(i).iter().map(|&v| v as f64).collect()
}

/// Batch-mean KD loss and its gradient with respect to the student logits.
///
/// `alpha * H(y, p_s) + (1 - alpha) * H_soft`, both terms on temperature-softened probabilities
/// and without a `T^2` factor.
pub fn kd_loss(
    student: &Array2<f32>,
    teacher: &Array2<f32>,
    labels: &[usize],
    cfg: &KDConfig,
) -> Result<(f64, Array2<f32>)> {
    let (n, k) = student.dim();
    if teacher.dim() != (n, k) || labels.len() != n {
        return Err(Error::Distill(format!(
            "student {:?}, teacher {:?}, {} labels",
            student.dim(),
            teacher.dim(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Distill("empty batch".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Distill(format!("label {l} out of range for {k} classes")));
    }
    let (t, a) = (cfg.temperature, cfg.alpha);
    let mut loss = 0.0;
    let mut grad = Array2::<f32>::zeros((n, k));
    for i in 0..n {
        let ps = soften(&row(student, i), t)?;
        let pt = soften(&row(teacher, i), t)?;
        let y = labels[i];
        loss += -a * ps[y].max(f64::MIN_POSITIVE).ln();
        let mut g: Vec<f64> = (0..k).map(|j| a * (ps[j] - f64::from(j == y)) / t).collect();
        match cfg.soft_order {
            SoftOrder::TeacherTargets => {
                loss += -(1.0 - a) * (0..k).map(|j| pt[j] * ps[j].max(f64::MIN_POSITIVE).ln()).sum::<f64>();
                for j in 0..k {
                    g[j] += (1.0 - a) * (ps[j] - pt[j]) / t;
                }
            }
            SoftOrder::StudentFirst => {
                let lpt: Vec<f64> = pt.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
                let mean: f64 = (0..k).map(|j| ps[j] * lpt[j]).sum();
                loss += -(1.0 - a) * mean;
                for j in 0..k {
                    g[j] += -(1.0 - a) * ps[j] * (lpt[j] - mean) / t;
                }
            }
        }
        for j in 0..k {
            grad[[i, j]] = (g[j] / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(net: &StagedNetwork, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Distill("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let x = data.images.slice(s![start..end, .., .., ..]).to_owned();
        let pred = argmax_rows(&net.forward(&x)?);
        correct += pred.iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode logits for every example, in dataset order.
pub fn logits(net: &StagedNetwork, data: &Dataset) -> Result<Array2<f32>> {
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        parts.push(net.forward(&data.images.slice(s![start..end, .., .., ..]).to_owned())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Momentum SGD with cosine-decayed step size.
struct Sgd {
    lr: f64,
    momentum: f32,
    total: usize,
    step: usize,
    velocity: ParamTable,
}

impl Sgd {
    fn new(lr: f64, total: usize) -> Self {
        Self { lr, momentum: 0.9, total: total.max(1), step: 0, velocity: ParamTable::default() }
    }

    fn apply(&mut self, net: &mut StagedNetwork, grads: ParamTable) {
        let lr = (self.lr * 0.5 * (1.0 + (std::f64::consts::PI * self.step as f64 / self.total as f64).cos())) as f32;
        for (key, g) in grads.0 {
            let v = self.velocity.0.entry(key).or_insert_with(|| g.mapv(|_| 0.0));
            v.zip_mut_with(&g, |v, &g| *v = self.momentum * *v + g);
            let p = net.params.0.get_mut(&key).expect("gradient for a known tensor");
            p.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
        self.step += 1;
    }
}

/// Outcome of a training run: the network at its best validation epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: StagedNetwork,
    pub best_val_acc: f64,
    /// Validation accuracy after every epoch; entry 0 is before training.
    pub history: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn fit<F>(
    mut net: StagedNetwork,
    train: &Dataset,
    val: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    mut loss: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Array2<f32>, &[usize]) -> Result<Array2<f32>>,
{
    if train.is_empty() || val.is_empty() {
        return Err(Error::Distill("training and validation splits must be nonempty".into()));
    }
    if train.num_classes != net.num_classes || val.num_classes != net.num_classes {
        return Err(Error::Distill(format!(
            "network has {} classes, dataset {}",
            net.num_classes, train.num_classes
        )));
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, "batches"));
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let mut opt = Sgd::new(lr, epochs * steps_per_epoch);
    let mut best = evaluate(&net, val)?;
    let mut best_net = net.clone();
    let mut history = vec![best];
    for _ in 0..epochs {
        for idx in train.batches(batch_size, &mut rng) {
            // Batch norm needs more than one example per channel statistic.
            if idx.len() < 2 {
                continue;
            }
            let (x, _) = train.select(&idx);
            let (out, trace) = net.forward_train(&x)?;
            let dlogits = loss(&out, &idx)?;
            let grads = net.backward(&trace, &dlogits);
            net.fold_running_stats(&trace);
            opt.apply(&mut net, grads);
        }
        let acc = evaluate(&net, val)?;
        history.push(acc);
        if acc > best {
            best = acc;
            best_net = net.clone();
        }
    }
    Ok(TrainOutcome { net: best_net, best_val_acc: best, history })
}

/// Label-only training at unit temperature, used for teachers.
pub fn train_supervised(
    net: StagedNetwork,
    train: &Dataset,
    val: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = KDConfig { temperature: 1.0, alpha: 1.0, ..KDConfig::default() };
    fit(net, train, val, epochs, lr, batch_size, seed, |out, idx| {
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        Ok(kd_loss(out, out, &labels, &cfg)?.1)
    })
}

/// Distills a frozen teacher into a freshly initialized student of `student_config`.
pub fn distill(
    teacher: &StagedNetwork,
    student_config: &ArchConfig,
    train: &Dataset,
    val: &Dataset,
    cfg: &KDConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if teacher.num_classes != train.num_classes {
        return Err(Error::Distill(format!(
            "teacher has {} classes, dataset {}",
            teacher.num_classes, train.num_classes
        )));
    }
    let student = StagedNetwork::build(
        &teacher.spec,
        student_config,
        teacher.num_classes,
        rng::derive_seed(cfg.seed, "student-init"),
    )?;
    let targets = logits(teacher, train)?;
    fit(student, train, val, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed, |out, idx| {
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let t = targets.select(Axis(0), idx);
        Ok(kd_loss(out, &t, &labels, cfg)?.1)
    })
}
