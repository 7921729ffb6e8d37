use ndarray::{Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::layers::{self, BatchStats, BnCache, ConvCache};
use super::{ParamKey, ParamTable, Role, Site, Unit};
use crate::error::{Error, Result};
use crate::rng;
use crate::search_space::{block_stride, has_projection, ArchConfig, SearchSpaceSpec};

/// A stem, `M` stages of two-convolution residual blocks and a linear classifier.
///
/// Every convolution is followed by batch norm. Stage-entry blocks that change resolution or base
/// width carry a 1x1 projection shortcut; other blocks use an identity shortcut that truncates or
/// zero-pads leading channels when the block input and output widths differ.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedNetwork {
    pub spec: SearchSpaceSpec,
    pub config: ArchConfig,
    pub num_classes: usize,
    pub params: ParamTable,
}

struct ConvBnTrace {
    conv: ConvCache,
    bn: BnCache,
    stats: BatchStats,
}

struct BlockTrace {
    site: Site,
    stride: usize,
    in_channels: usize,
    c1: ConvBnTrace,
    mid: Array4<f32>,
    c2: ConvBnTrace,
    shortcut: Option<ConvBnTrace>,
    out: Array4<f32>,
}

/// Intermediate values of a training-mode forward pass, consumed by [`StagedNetwork::backward`].
pub struct Trace {
    stem: ConvBnTrace,
    stem_out: Array4<f32>,
    blocks: Vec<BlockTrace>,
    pooled: Array2<f32>,
}

impl Trace {
    /// Post-activation outputs of every block and the stem, in forward order.
    pub fn activations(&self) -> impl Iterator<Item = &Array4<f32>> {
        std::iter::once(&self.stem_out).chain(self.blocks.iter().flat_map(|b| [&b.mid, &b.out]))
    }
}

fn conv_keys(site: Site, unit: Unit) -> [ParamKey; 5] {
    [
        ParamKey::new(site, Role::ConvWeight(unit)),
        ParamKey::new(site, Role::NormScale(unit)),
        ParamKey::new(site, Role::NormShift(unit)),
        ParamKey::new(site, Role::NormMean(unit)),
        ParamKey::new(site, Role::NormVar(unit)),
    ]
}

/// Tensor names and shapes of the network a config describes.
pub fn layout(
    spec: &SearchSpaceSpec,
    config: &ArchConfig,
    num_classes: usize,
) -> Vec<(ParamKey, Vec<usize>)> {
    let mut out = Vec::new();
    let mut conv = |site, unit, o: usize, i: usize, k: usize| {
        let [w, g, b, m, v] = conv_keys(site, unit);
        out.push((w, vec![o, i, k, k]));
        for key in [g, b, m, v] {
            out.push((key, vec![o]));
        }
    };
    let stem = spec.stem_width();
    conv(Site::Stem, Unit::Conv1, stem, spec.input_shape[0], 3);
    let mut prev = stem;
    for (stage, widths) in config.widths(spec).iter().enumerate() {
        for (layer, &k) in widths.iter().enumerate() {
            let site = Site::Block { stage, layer };
            conv(site, Unit::Conv1, k, prev, 3);
            conv(site, Unit::Conv2, k, k, 3);
            if has_projection(spec, stage, layer) {
                conv(site, Unit::Shortcut, k, prev, 1);
            }
            prev = k;
        }
    }
    out.push((ParamKey::new(Site::Head, Role::LinearWeight), vec![num_classes, prev]));
    out.push((ParamKey::new(Site::Head, Role::LinearBias), vec![num_classes]));
    out
}

impl StagedNetwork {
    /// Builds a freshly initialized network. Convolutions use He-normal weights, norms start at
    /// identity and the classifier is uniform in `±1/sqrt(fan_in)`.
    pub fn build(
        spec: &SearchSpaceSpec,
        config: &ArchConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate(spec)?;
        if num_classes == 0 {
            return Err(Error::Shape("num_classes must be positive".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut params = ParamTable::default();
        for (key, shape) in layout(spec, config, num_classes) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match key.role {
                Role::ConvWeight(_) => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Role::NormScale(_) | Role::NormVar(_) => vec![1.0; n],
                Role::NormShift(_) | Role::NormMean(_) | Role::LinearBias => vec![0.0; n],
                Role::LinearWeight => {
                    let bound = 1.0 / (shape[1] as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            params.insert(key, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok(Self { spec: spec.clone(), config: config.clone(), num_classes, params })
    }

    /// Wraps an existing parameter table after checking it covers the config's layout exactly.
    pub fn from_params(
        spec: &SearchSpaceSpec,
        config: &ArchConfig,
        num_classes: usize,
        params: ParamTable,
    ) -> Result<Self> {
        config.validate(spec)?;
        let expected = layout(spec, config, num_classes);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "parameter table has {} tensors, layout needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (key, shape) in &expected {
            let t = params.get(key)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{key}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { spec: spec.clone(), config: config.clone(), num_classes, params })
    }

    pub fn param_count(&self) -> u64 {
        self.params.trainable_count()
    }

    fn t4(&self, key: ParamKey) -> ArrayView4<'_, f32> {
        self.params.0[&key].view().into_dimensionality::<Ix4>().expect("conv weight is 4-d")
    }

    fn t2(&self, key: ParamKey) -> ArrayView2<'_, f32> {
        self.params.0[&key].view().into_dimensionality::<Ix2>().expect("linear weight is 2-d")
    }

    fn t1(&self, key: ParamKey) -> ArrayView1<'_, f32> {
        self.params.0[&key].view().into_dimensionality::<Ix1>().expect("vector parameter")
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "input {:?}, network expects {:?}",
                [c, h, w],
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    fn conv_bn_eval(&self, x: &Array4<f32>, site: Site, unit: Unit, stride: usize) -> Array4<f32> {
        let [w, g, b, m, v] = conv_keys(site, unit);
        let (y, _) = layers::conv2d(&x.view(), &self.t4(w), stride);
        layers::batch_norm_eval(&y, &self.t1(g), &self.t1(b), &self.t1(m), &self.t1(v))
    }

    fn conv_bn_train(
        &self,
        x: &Array4<f32>,
        site: Site,
        unit: Unit,
        stride: usize,
    ) -> (Array4<f32>, ConvBnTrace) {
        let [w, g, b, _, _] = conv_keys(site, unit);
        let (y, conv) = layers::conv2d(&x.view(), &self.t4(w), stride);
        let (y, bn, stats) = layers::batch_norm_train(&y, &self.t1(g), &self.t1(b));
        (y, ConvBnTrace { conv, bn, stats })
    }

    fn widths(&self) -> Vec<Vec<usize>> {
        self.config.widths(&self.spec)
    }

    /// Eval-mode stem.
    pub fn stem(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        Ok(layers::relu(self.conv_bn_eval(x, Site::Stem, Unit::Conv1, 1)))
    }

    /// Eval-mode pass of one stage.
    pub fn stage(&self, stage: usize, x: &Array4<f32>) -> Result<Array4<f32>> {
        let widths = self.widths();
        let ws = widths
            .get(stage)
            .ok_or_else(|| Error::Shape(format!("no stage {stage}")))?;
        let expected_in = if stage == 0 {
            self.spec.stem_width()
        } else {
            self.spec.base_widths[stage - 1]
        };
        if x.dim().1 != expected_in {
            return Err(Error::Shape(format!(
                "stage {stage} expects {expected_in} channels, got {}",
                x.dim().1
            )));
        }
        let mut h = x.clone();
        for (layer, &k) in ws.iter().enumerate() {
            let site = Site::Block { stage, layer };
            let stride = block_stride(stage, layer);
            let mid = layers::relu(self.conv_bn_eval(&h, site, Unit::Conv1, stride));
            let main = self.conv_bn_eval(&mid, site, Unit::Conv2, 1);
            let short = if has_projection(&self.spec, stage, layer) {
                self.conv_bn_eval(&h, site, Unit::Shortcut, stride)
            } else {
                layers::adjust_channels(&h, k)
            };
            h = layers::relu(main + short);
        }
        Ok(h)
    }

    /// Classifier logits from a final-stage feature map.
    pub fn head(&self, features: &Array4<f32>) -> Array2<f32> {
        let pooled = layers::global_avg_pool(features);
        layers::linear(
            &pooled,
            &self.t2(ParamKey::new(Site::Head, Role::LinearWeight)),
            &self.t1(ParamKey::new(Site::Head, Role::LinearBias)),
        )
    }

    /// Eval-mode output of every stage, in order.
    pub fn forward_features(&self, x: &Array4<f32>) -> Result<Vec<Array4<f32>>> {
        let mut h = self.stem(x)?;
        let mut outs = Vec::with_capacity(self.spec.num_stages);
        for stage in 0..self.spec.num_stages {
            h = self.stage(stage, &h)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Eval-mode logits.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let mut h = self.stem(x)?;
        for stage in 0..self.spec.num_stages {
            h = self.stage(stage, &h)?;
        }
        Ok(self.head(&h))
    }

    /// Training-mode forward using batch statistics. Running moments are left untouched; pass
    /// the trace to [`Self::fold_running_stats`] to update them.
    pub fn forward_train(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Trace)> {
        self.check_input(x)?;
        let (s, stem) = self.conv_bn_train(x, Site::Stem, Unit::Conv1, 1);
        let stem_out = layers::relu(s);
        let mut h = stem_out.clone();
        let mut blocks = Vec::new();
        for (stage, ws) in self.widths().iter().enumerate() {
            for (layer, &k) in ws.iter().enumerate() {
                let site = Site::Block { stage, layer };
                let stride = block_stride(stage, layer);
                let (a, c1) = self.conv_bn_train(&h, site, Unit::Conv1, stride);
                let mid = layers::relu(a);
                let (main, c2) = self.conv_bn_train(&mid, site, Unit::Conv2, 1);
                let (short, shortcut) = if has_projection(&self.spec, stage, layer) {
                    let (y, t) = self.conv_bn_train(&h, site, Unit::Shortcut, stride);
                    (y, Some(t))
                } else {
                    (layers::adjust_channels(&h, k), None)
                };
                let out = layers::relu(main + short);
                blocks.push(BlockTrace {
                    site,
                    stride,
                    in_channels: h.dim().1,
                    c1,
                    mid,
                    c2,
                    shortcut,
                    out: out.clone(),
                });
                h = out;
            }
        }
        let pooled = layers::global_avg_pool(&h);
        let logits = layers::linear(
            &pooled,
            &self.t2(ParamKey::new(Site::Head, Role::LinearWeight)),
            &self.t1(ParamKey::new(Site::Head, Role::LinearBias)),
        );
        Ok((logits, Trace { stem, stem_out, blocks, pooled }))
    }

    /// Folds the batch statistics of a training pass into the running moments.
    pub fn fold_running_stats(&mut self, trace: &Trace) {
        let mut fold = |site: Site, unit: Unit, t: &ConvBnTrace| {
            let [_, _, _, m, v] = conv_keys(site, unit);
            let mut mean = self.params.0.get_mut(&m).unwrap().view_mut().into_dimensionality::<Ix1>().unwrap();
            layers::fold_running(&mut mean, &t.stats.mean);
            let mut var = self.params.0.get_mut(&v).unwrap().view_mut().into_dimensionality::<Ix1>().unwrap();
            layers::fold_running(&mut var, &t.stats.var);
        };
        fold(Site::Stem, Unit::Conv1, &trace.stem);
        for b in &trace.blocks {
            fold(b.site, Unit::Conv1, &b.c1);
            fold(b.site, Unit::Conv2, &b.c2);
            if let Some(s) = &b.shortcut {
                fold(b.site, Unit::Shortcut, s);
            }
        }
    }

    fn conv_bn_backward(
        &self,
        dy: &Array4<f32>,
        site: Site,
        unit: Unit,
        stride: usize,
        t: &ConvBnTrace,
        grads: &mut ParamTable,
    ) -> Array4<f32> {
        let [w, g, b, _, _] = conv_keys(site, unit);
        let (dconv, dg, db) = layers::batch_norm_backward(dy, &t.bn, &self.t1(g));
        let (dx, dw) = layers::conv2d_backward(&dconv, &t.conv, &self.t4(w), stride);
        grads.insert(w, dw.into_dyn());
        grads.insert(g, dg.into_dyn());
        grads.insert(b, db.into_dyn());
        dx
    }

    /// Gradients of all trainable tensors given the loss gradient with respect to the logits.
    pub fn backward(&self, trace: &Trace, dlogits: &Array2<f32>) -> ParamTable {
        let mut grads = ParamTable::default();
        let wk = ParamKey::new(Site::Head, Role::LinearWeight);
        let (dpooled, dw, db) = layers::linear_backward(dlogits, &trace.pooled, &self.t2(wk));
        grads.insert(wk, dw.into_dyn());
        grads.insert(ParamKey::new(Site::Head, Role::LinearBias), db.into_dyn());
        let last_dims = trace.blocks.last().map(|b| b.out.dim()).unwrap_or(trace.stem_out.dim());
        let mut dh = layers::global_avg_pool_backward(&dpooled, last_dims);
        for b in trace.blocks.iter().rev() {
            let dsum = layers::relu_backward(&dh, &b.out);
            let dmid = self.conv_bn_backward(&dsum, b.site, Unit::Conv2, 1, &b.c2, &mut grads);
            let da = layers::relu_backward(&dmid, &b.mid);
            let mut dx = self.conv_bn_backward(&da, b.site, Unit::Conv1, b.stride, &b.c1, &mut grads);
            match &b.shortcut {
                Some(s) => {
                    dx += &self.conv_bn_backward(&dsum, b.site, Unit::Shortcut, b.stride, s, &mut grads);
                }
                None => dx += &layers::adjust_channels(&dsum, b.in_channels),
            }
            dh = dx;
        }
        let ds = layers::relu_backward(&dh, &trace.stem_out);
        self.conv_bn_backward(&ds, Site::Stem, Unit::Conv1, 1, &trace.stem, &mut grads);
        grads
    }

    /// Pooled final-stage features recorded by a training pass.
    pub fn pooled<'a>(&self, trace: &'a Trace) -> &'a Array2<f32> {
        &trace.pooled
    }
}

/// Predicted class per row.
pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

