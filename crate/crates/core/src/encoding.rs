//! Distillation-aware task encoding.
//!
//! A student is described by three vectors: its one-hot config through `q_a`, the pooled last-stage
//! response of the teacher-remapped student to a fixed noise probe through `q_f`, and the teacher's
//! own response through the same `q_f`. The concatenation `[h_zs, h_a, h_zt]` passes through a
//! two-layer tanh perceptron `sigma`, and a linear head turns the fused vector into a score.
//!
//! All learnable weights live in one flat vector laid out by [`PredictorDims`]; the math is generic
//! over [`Real`] so the same backward pass yields gradients and Hessian-vector products.

use ndarray::{Array4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Tensor};
use crate::autodiff::Real;
use crate::data::gaussian;
use crate::error::{Error, Result};
use crate::nn::StagedNetwork;
use crate::remap::remap_network;
use crate::rng;
use crate::search_space::{encode_onehot, ArchConfig, SearchSpaceSpec};

/// Fixed Gaussian input fed to every network that gets a functional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProbe {
    pub seed: u64,
    pub z: Array4<f32>,
}

impl NoiseProbe {
    pub fn new(spec: &SearchSpaceSpec, probe_batch: usize, seed: u64) -> Self {
        let [c, h, w] = spec.input_shape;
        Self { seed, z: gaussian((probe_batch.max(1), c, h, w), rng::derive_seed(seed, "probe")) }
    }
}

/// Last-stage feature map of `net` on the probe, averaged over space and probe batch, then
/// compressed with `ln(1 + x)`. The map is post-ReLU so every entry is nonnegative; the log keeps
/// untrained residual stacks, whose activations compound with depth, in a usable range.
pub fn probe_features(net: &StagedNetwork, probe: &NoiseProbe) -> Result<Vec<f64>> {
    let feats = net.forward_features(&probe.z)?;
    let t = feats.last().expect("at least one stage");
    let pooled = t.mean_axis(Axis(3)).and_then(|a| a.mean_axis(Axis(2))).and_then(|a| a.mean_axis(Axis(0)));
    let v: Vec<f64> = pooled.expect("nonempty feature map").iter().map(|&x| (x as f64).ln_1p()).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Embedding("non-finite last-stage features".into()));
    }
    Ok(v)
}

/// Precomputed, parameter-independent inputs of one (student, teacher) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedInput {
    /// Indices of the set entries of the student's one-hot code.
    pub active: Vec<usize>,
    pub student_features: Vec<f64>,
    pub teacher_features: Vec<f64>,
}

impl EncodedInput {
    /// Remaps the student from the teacher and probes both.
    pub fn new(
        student: &ArchConfig,
        teacher: &StagedNetwork,
        teacher_features: &[f64],
        probe: &NoiseProbe,
    ) -> Result<Self> {
        let onehot = encode_onehot(&teacher.spec, student)?;
        let student_features = if *student == teacher.config {
            teacher_features.to_vec()
        } else {
            probe_features(&remap_network(teacher, student)?, probe)?
        };
        Ok(Self::from_parts(&onehot, student_features, teacher_features.to_vec()))
    }

    /// The teacher encoded as its own student (identity remap).
    pub fn teacher_as_student(teacher: &StagedNetwork, teacher_features: &[f64]) -> Result<Self> {
        let onehot = encode_onehot(&teacher.spec, &teacher.config)?;
        Ok(Self::from_parts(&onehot, teacher_features.to_vec(), teacher_features.to_vec()))
    }

    pub fn from_parts(onehot: &[u8], student_features: Vec<f64>, teacher_features: Vec<f64>) -> Self {
        let active = onehot.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
        Self { active, student_features, teacher_features }
    }
}

/// Sizes of the predictor's layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorDims {
    pub onehot: usize,
    pub features: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    qa_w: usize,
    qa_b: usize,
    qf_w: usize,
    qf_b: usize,
    s1_w: usize,
    s1_b: usize,
    s2_w: usize,
    s2_b: usize,
    head_w: usize,
    head_b: usize,
    len: usize,
}

impl PredictorDims {
    pub fn for_spec(spec: &SearchSpaceSpec, embed: usize, hidden: usize) -> Self {
        Self {
            onehot: spec.encoding_len(),
            features: *spec.base_widths.last().unwrap(),
            embed,
            hidden,
        }
    }

    fn layout(&self) -> Layout {
        let (e, h) = (self.embed, self.hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let qa_w = take(e * self.onehot);
        let qa_b = take(e);
        let qf_w = take(e * self.features);
        let qf_b = take(e);
        let s1_w = take(h * 3 * e);
        let s1_b = take(h);
        let s2_w = take(h * h);
        let s2_b = take(h);
        let head_w = take(h);
        let head_b = take(1);
        Layout { qa_w, qa_b, qf_w, qf_b, s1_w, s1_b, s2_w, s2_b, head_w, head_b, len: at }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len
    }

    /// Index range of the regression head weights and its bias index.
    pub fn head_range(&self) -> (std::ops::Range<usize>, usize) {
        let l = self.layout();
        (l.head_w..l.head_b, l.head_b)
    }

    /// Every affine map uniform in `±1/sqrt(fan_in)`, weights and biases alike.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let l = self.layout();
        let mut rng = rng::seeded(seed);
        let mut phi = vec![0.0; l.len];
        let (e, h) = (self.embed, self.hidden);
        let blocks = [
            (l.qa_w, l.qf_w, self.onehot),
            (l.qf_w, l.s1_w, self.features),
            (l.s1_w, l.s2_w, 3 * e),
            (l.s2_w, l.head_w, h),
            (l.head_w, l.len, h),
        ];
        for (start, end, fan_in) in blocks {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut phi[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        phi
    }

    pub fn check(&self, phi_len: usize, x: &EncodedInput) -> Result<()> {
        if phi_len != self.num_params() {
            return Err(Error::Embedding(format!(
                "parameter vector has {phi_len} entries, dims need {}",
                self.num_params()
            )));
        }
        if x.student_features.len() != self.features || x.teacher_features.len() != self.features {
            return Err(Error::Embedding(format!(
                "feature length {}/{} does not match q_f input {}",
                x.student_features.len(),
                x.teacher_features.len(),
                self.features
            )));
        }
        if let Some(&i) = x.active.iter().find(|&&i| i >= self.onehot) {
            return Err(Error::Embedding(format!("one-hot index {i} exceeds length {}", self.onehot)));
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<R> {
    pub h_a: Vec<R>,
    pub h_zs: Vec<R>,
    pub h_zt: Vec<R>,
    a1: Vec<R>,
    /// Output of `sigma`.
    pub fused: Vec<R>,
    pub out: R,
}

fn affine_dense<R: Real>(w: &[R], b: &[R], x: &[f64]) -> Vec<R> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(k, &bk)| {
            let mut acc = bk;
            for (j, &xj) in x.iter().enumerate() {
                acc += w[k * n + j] * R::cst(xj);
            }
            acc
        })
        .collect()
}

fn affine<R: Real>(w: &[R], b: &[R], x: &[R]) -> Vec<R> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(k, &bk)| {
            let mut acc = bk;
            for (j, &xj) in x.iter().enumerate() {
                acc += w[k * n + j] * xj;
            }
            acc
        })
        .collect()
}

/// Architecture embedding `q_a(a)` for a binary one-hot code given by its set indices.
pub fn arch_embedding_from<R: Real>(d: &PredictorDims, phi: &[R], active: &[usize]) -> Vec<R> {
    let l = d.layout();
    (0..d.embed)
        .map(|k| {
            let mut acc = phi[l.qa_b + k];
            for &i in active {
                acc += phi[l.qa_w + k * d.onehot + i];
            }
            acc
        })
        .collect()
}

/// Functional projection `q_f` of pooled features.
pub fn functional_projection<R: Real>(d: &PredictorDims, phi: &[R], features: &[f64]) -> Vec<R> {
    let l = d.layout();
    affine_dense(&phi[l.qf_w..l.qf_b], &phi[l.qf_b..l.qf_b + d.embed], features)
}

pub fn forward<R: Real>(d: &PredictorDims, phi: &[R], x: &EncodedInput) -> Forward<R> {
    let l = d.layout();
    let (e, h) = (d.embed, d.hidden);
    let h_a = arch_embedding_from(d, phi, &x.active);
    let h_zs = functional_projection(d, phi, &x.student_features);
    let h_zt = functional_projection(d, phi, &x.teacher_features);
    let cat: Vec<R> = h_zs.iter().chain(&h_a).chain(&h_zt).copied().collect();
    let a1: Vec<R> = affine(&phi[l.s1_w..l.s1_b], &phi[l.s1_b..l.s1_b + h], &cat)
        .into_iter()
        .map(R::tanh)
        .collect();
    let fused: Vec<R> = affine(&phi[l.s2_w..l.s2_b], &phi[l.s2_b..l.s2_b + h], &a1)
        .into_iter()
        .map(R::tanh)
        .collect();
    let mut out = phi[l.head_b];
    for k in 0..h {
        out += phi[l.head_w + k] * fused[k];
    }
    debug_assert_eq!(cat.len(), 3 * e);
    Forward { h_a, h_zs, h_zt, a1, fused, out }
}

/// Accumulates `dout * d(out)/d(phi)` into `grad`.
pub fn backward<R: Real>(d: &PredictorDims, phi: &[R], x: &EncodedInput, f: &Forward<R>, dout: R, grad: &mut [R]) {
    let l = d.layout();
    let (e, h) = (d.embed, d.hidden);
    let one = R::cst(1.0);
    grad[l.head_b] += dout;
    let mut dp2 = vec![R::cst(0.0); h];
    for k in 0..h {
        grad[l.head_w + k] += dout * f.fused[k];
        dp2[k] = dout * phi[l.head_w + k] * (one - f.fused[k] * f.fused[k]);
    }
    let mut da1 = vec![R::cst(0.0); h];
    for k in 0..h {
        grad[l.s2_b + k] += dp2[k];
        for j in 0..h {
            grad[l.s2_w + k * h + j] += dp2[k] * f.a1[j];
            da1[j] += phi[l.s2_w + k * h + j] * dp2[k];
        }
    }
    let cat: Vec<R> = f.h_zs.iter().chain(&f.h_a).chain(&f.h_zt).copied().collect();
    let mut dcat = vec![R::cst(0.0); 3 * e];
    for k in 0..h {
        let dp1 = da1[k] * (one - f.a1[k] * f.a1[k]);
        grad[l.s1_b + k] += dp1;
        for j in 0..3 * e {
            grad[l.s1_w + k * 3 * e + j] += dp1 * cat[j];
            dcat[j] += phi[l.s1_w + k * 3 * e + j] * dp1;
        }
    }
    let (dzs, rest) = dcat.split_at(e);
    let (da, dzt) = rest.split_at(e);
    for k in 0..e {
        grad[l.qa_b + k] += da[k];
        for &i in &x.active {
            grad[l.qa_w + k * d.onehot + i] += da[k];
        }
        grad[l.qf_b + k] += dzs[k] + dzt[k];
        for c in 0..d.features {
            grad[l.qf_w + k * d.features + c] +=
                dzs[k] * R::cst(x.student_features[c]) + dzt[k] * R::cst(x.teacher_features[c]);
        }
    }
}

/// Embedding vectors of one encoded student, in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub h_a: Vec<f64>,
    pub h_zs: Vec<f64>,
    pub h_zt: Vec<f64>,
    pub fused: Vec<f64>,
}

impl TaskEmbedding {
    pub fn from_input(d: &PredictorDims, phi: &[f64], x: &EncodedInput) -> Result<Self> {
        d.check(phi.len(), x)?;
        let f = forward(d, phi, x);
        let emb = Self { h_a: f.h_a, h_zs: f.h_zs, h_zt: f.h_zt, fused: f.fused };
        if emb.fused.iter().chain(&emb.h_a).chain(&emb.h_zs).chain(&emb.h_zt).any(|v| !v.is_finite()) {
            return Err(Error::Embedding("non-finite embedding".into()));
        }
        Ok(emb)
    }
}

/// `q_f` applied to the pooled last-stage response of `net` on the probe.
pub fn functional_embedding(net: &StagedNetwork, probe: &NoiseProbe, d: &PredictorDims, phi: &[f64]) -> Result<Vec<f64>> {
    let feats = probe_features(net, probe)?;
    if feats.len() != d.features {
        return Err(Error::Embedding(format!("{} features, q_f expects {}", feats.len(), d.features)));
    }
    Ok(functional_projection(d, phi, &feats))
}

/// `q_a` applied to a one-hot code.
pub fn arch_embedding(onehot: &[u8], d: &PredictorDims, phi: &[f64]) -> Result<Vec<f64>> {
    if onehot.len() != d.onehot {
        return Err(Error::Embedding(format!("one-hot has {} entries, q_a expects {}", onehot.len(), d.onehot)));
    }
    let active: Vec<usize> = onehot.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
    Ok(arch_embedding_from(d, phi, &active))
}

/// Full encoding of a student under a teacher: remap, probe both, project and fuse.
pub fn encode_task(
    student: &ArchConfig,
    teacher: &StagedNetwork,
    probe: &NoiseProbe,
    d: &PredictorDims,
    phi: &[f64],
) -> Result<TaskEmbedding> {
    let tf = probe_features(teacher, probe)?;
    TaskEmbedding::from_input(d, phi, &EncodedInput::new(student, teacher, &tf, probe)?)
}

/// Writes labelled embeddings as an archive of `f64` vectors.
pub fn dump_embeddings(items: &[(String, TaskEmbedding)], d: &PredictorDims, probe_seed: u64) -> Archive {
    let mut a = Archive::new(serde_json::json!({
        "kind": "embeddings",
        "dims": d,
        "probe_seed": probe_seed,
        "labels": items.iter().map(|(l, _)| l).collect::<Vec<_>>(),
    }));
    for (i, (_, e)) in items.iter().enumerate() {
        for (name, v) in [("h_a", &e.h_a), ("h_zs", &e.h_zs), ("h_zt", &e.h_zt), ("fused", &e.fused)] {
            let arr = ndarray::Array1::from(v.clone()).into_dyn();
            a.tensors.insert(format!("{i:05}/{name}"), Tensor::F64(arr));
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> PredictorDims {
        PredictorDims { onehot: 5, features: 3, embed: 2, hidden: 4 }
    }

    fn input() -> EncodedInput {
        EncodedInput::from_parts(&[1, 0, 0, 1, 0], vec![0.5, -1.0, 2.0], vec![0.1, 0.3, -0.7])
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d = dims();
        let phi = d.init(3);
        let x = input();
        let mut g = vec![0.0; phi.len()];
        backward(&d, &phi, &x, &forward(&d, &phi, &x), 1.0, &mut g);
        for i in 0..phi.len() {
            let h = 1e-6;
            let (mut p, mut m) = (phi.clone(), phi.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (forward(&d, &p, &x).out - forward(&d, &m, &x).out) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 + 1e-5 * fd.abs(), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_one_hot_gives_q_a_bias() {
        let d = dims();
        let phi = d.init(1);
        let l = d.layout();
        assert_eq!(arch_embedding(&[0; 5], &d, &phi).unwrap(), phi[l.qa_b..l.qa_b + 2].to_vec());
        assert!(arch_embedding(&[0; 4], &d, &phi).is_err());
    }

    #[test]
    fn dims_reject_mismatched_inputs() {
        let d = dims();
        let mut x = input();
        x.teacher_features.pop();
        assert!(d.check(d.num_params(), &x).is_err());
        assert!(d.check(d.num_params() + 1, &input()).is_err());
    }
}
