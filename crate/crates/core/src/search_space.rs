//! Factorized hierarchical ResNet-style search space.
//!
//! A network is a stem followed by `num_stages` stages of residual blocks. Each stage picks a
//! depth and each block in it picks a channel shrink ratio applied to the stage's base width.
//! The last block of every stage is pinned to ratio 1.0 so stage outputs have a fixed width.
//!
//! Text formats (one object per line):
//!
//! ```text
//! stages=4 depths=1,2,3,4 widths=32,64,128,256 ratios=0.125,0.25,0.5,1 slots=5 input=3x64x64 mode=absolute
//! depths=2,1 ratios=0.5,1/1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// How depth choices map to the number of blocks in a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DepthMode {
    /// The choice is the block count.
    Absolute,
    /// The choice is added to a fixed per-stage base depth.
    Additive { base_depths: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpaceSpec {
    pub num_stages: usize,
    pub depth_choices: Vec<usize>,
    pub base_widths: Vec<usize>,
    pub ratio_choices: Vec<f64>,
    pub max_layers_per_stage: usize,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub mode: DepthMode,
}

impl SearchSpaceSpec {
    /// Four stages, depths 1..=4, widths 32..256, eight shrink ratios, 64x64 RGB input.
    pub fn standard() -> Self {
        Self {
            num_stages: 4,
            depth_choices: vec![1, 2, 3, 4],
            base_widths: vec![32, 64, 128, 256],
            ratio_choices: vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0],
            max_layers_per_stage: 5,
            input_shape: [3, 64, 64],
            mode: DepthMode::Absolute,
        }
    }

    /// Large-resolution preset: additive depth {0,1,2} over ResNet-50 stage depths.
    pub fn imagenet() -> Self {
        Self {
            num_stages: 4,
            depth_choices: vec![0, 1, 2],
            base_widths: vec![256, 512, 1024, 2048],
            ratio_choices: vec![0.65, 0.8, 1.0],
            max_layers_per_stage: 8,
            input_shape: [3, 256, 256],
            mode: DepthMode::Additive { base_depths: vec![3, 4, 6, 3] },
        }
    }

    /// Desk-scale space used by the end-to-end demo: two stages, depths {1,2}, three ratios.
    pub fn mini() -> Self {
        Self {
            num_stages: 2,
            depth_choices: vec![1, 2],
            base_widths: vec![8, 16],
            ratio_choices: vec![0.5, 0.75, 1.0],
            max_layers_per_stage: 2,
            input_shape: [3, 8, 8],
            mode: DepthMode::Absolute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_stages == 0 {
            return bad("num_stages must be positive".into());
        }
        if self.base_widths.len() != self.num_stages {
            return bad(format!(
                "base_widths has {} entries, expected num_stages = {}",
                self.base_widths.len(),
                self.num_stages
            ));
        }
        if self.base_widths.contains(&0) {
            return bad("base_widths must be positive".into());
        }
        if self.depth_choices.is_empty() {
            return bad("depth_choices is empty".into());
        }
        if self.depth_choices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("depth_choices must be strictly ascending".into());
        }
        if self.ratio_choices.is_empty() {
            return bad("ratio_choices is empty".into());
        }
        if self
            .ratio_choices
            .iter()
            .any(|&r| !r.is_finite() || r <= 0.0 || r > 1.0)
        {
            return bad("ratio_choices must lie in (0, 1]".into());
        }
        if self.ratio_choices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratio_choices must be strictly ascending".into());
        }
        if *self.ratio_choices.last().unwrap() != 1.0 {
            return bad("ratio_choices must contain 1.0".into());
        }
        if self.input_shape.contains(&0) {
            return bad("input_shape dimensions must be positive".into());
        }
        match &self.mode {
            DepthMode::Absolute => {
                if self.depth_choices[0] == 0 {
                    return bad("absolute depth choices must be at least 1".into());
                }
                if let Some(&d) = self
                    .depth_choices
                    .iter()
                    .find(|&&d| d > self.max_layers_per_stage)
                {
                    return bad(format!(
                        "depth choice {d} exceeds max_layers_per_stage {}",
                        self.max_layers_per_stage
                    ));
                }
            }
            DepthMode::Additive { base_depths } => {
                if base_depths.len() != self.num_stages {
                    return bad(format!(
                        "base_depths has {} entries, expected {}",
                        base_depths.len(),
                        self.num_stages
                    ));
                }
                let max_choice = *self.depth_choices.last().unwrap();
                for (i, &b) in base_depths.iter().enumerate() {
                    if b + self.depth_choices[0] == 0 {
                        return bad(format!("stage {i} can have zero blocks"));
                    }
                    if b + max_choice > self.max_layers_per_stage {
                        return bad(format!(
                            "stage {i} depth {} exceeds max_layers_per_stage {}",
                            b + max_choice,
                            self.max_layers_per_stage
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of blocks a stage has for a given depth choice.
    pub fn blocks_for(&self, stage: usize, depth_choice: usize) -> usize {
        match &self.mode {
            DepthMode::Absolute => depth_choice,
            DepthMode::Additive { base_depths } => base_depths[stage] + depth_choice,
        }
    }

    /// Channel count of a block with the given ratio in `stage`.
    pub fn width(&self, stage: usize, ratio: f64) -> usize {
        ((ratio * self.base_widths[stage] as f64).round() as usize).max(1)
    }

    /// Channel count produced by the stem, equal to the first stage's base width.
    pub fn stem_width(&self) -> usize {
        self.base_widths[0]
    }

    /// Length of the one-hot architecture encoding.
    pub fn encoding_len(&self) -> usize {
        self.num_stages
            * (self.depth_choices.len() + self.max_layers_per_stage * self.ratio_choices.len())
    }

    fn depth_index(&self, d: usize) -> Option<usize> {
        self.depth_choices.iter().position(|&c| c == d)
    }

    fn ratio_index(&self, r: f64) -> Option<usize> {
        self.ratio_choices.iter().position(|&c| c == r)
    }

    /// Stable identity of the spec, derived from its text form.
    pub fn digest(&self) -> String {
        rng::content_hash(self.to_string().as_bytes())
    }
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        Self::standard()
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| Error::Parse(format!("{key}: bad element {t:?}")))
        })
        .collect()
}

fn parse_kv_line(s: &str) -> Result<BTreeMap<&str, &str>> {
    let mut map = BTreeMap::new();
    for tok in s.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value, got {tok:?}")))?;
        if map.insert(k, v).is_some() {
            return Err(Error::Parse(format!("duplicate key {k:?}")));
        }
    }
    Ok(map)
}

fn take<'a>(map: &mut BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    map.remove(key)
        .ok_or_else(|| Error::Parse(format!("missing key {key:?}")))
}

impl fmt::Display for SearchSpaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        write!(
            f,
            "stages={} depths={} widths={} ratios={} slots={} input={c}x{h}x{w}",
            self.num_stages,
            join(&self.depth_choices),
            join(&self.base_widths),
            join(&self.ratio_choices),
            self.max_layers_per_stage,
        )?;
        match &self.mode {
            DepthMode::Absolute => write!(f, " mode=absolute"),
            DepthMode::Additive { base_depths } => {
                write!(f, " mode=additive base_depths={}", join(base_depths))
            }
        }
    }
}

impl FromStr for SearchSpaceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = parse_kv_line(s)?;
        let num_stages = take(&mut map, "stages")?
            .parse()
            .map_err(|_| Error::Parse("stages: not a count".into()))?;
        let depth_choices = parse_list("depths", take(&mut map, "depths")?)?;
        let base_widths = parse_list("widths", take(&mut map, "widths")?)?;
        let ratio_choices = parse_list("ratios", take(&mut map, "ratios")?)?;
        let max_layers_per_stage = take(&mut map, "slots")?
            .parse()
            .map_err(|_| Error::Parse("slots: not a count".into()))?;
        let dims: Vec<usize> = take(&mut map, "input")?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Parse(format!("input: bad dim {d:?}"))))
            .collect::<Result<_>>()?;
        let input_shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Parse("input: expected CxHxW".into()))?;
        let mode = match take(&mut map, "mode")? {
            "absolute" => DepthMode::Absolute,
            "additive" => DepthMode::Additive {
                base_depths: parse_list("base_depths", take(&mut map, "base_depths")?)?,
            },
            other => return Err(Error::Parse(format!("mode: unknown {other:?}"))),
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Parse(format!("unknown key {k:?}")));
        }
        let spec = Self {
            num_stages,
            depth_choices,
            base_widths,
            ratio_choices,
            max_layers_per_stage,
            input_shape,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One point in the search space: a depth choice per stage and a ratio per active block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ArchConfig {
    pub depths: Vec<usize>,
    pub ratios: Vec<Vec<f64>>,
}

impl ArchConfig {
    pub fn validate(&self, spec: &SearchSpaceSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depths.len() != spec.num_stages || self.ratios.len() != spec.num_stages {
            return bad(format!(
                "expected {} stages, got depths={} ratios={}",
                spec.num_stages,
                self.depths.len(),
                self.ratios.len()
            ));
        }
        for (stage, (&d, rs)) in self.depths.iter().zip(&self.ratios).enumerate() {
            if spec.depth_index(d).is_none() {
                return bad(format!("stage {stage}: depth {d} not a valid choice"));
            }
            let blocks = spec.blocks_for(stage, d);
            if rs.len() != blocks {
                return bad(format!(
                    "stage {stage}: {} ratios for {blocks} blocks",
                    rs.len()
                ));
            }
            if let Some(r) = rs.iter().find(|&&r| spec.ratio_index(r).is_none()) {
                return bad(format!("stage {stage}: ratio {r} not a valid choice"));
            }
            if rs.last() != Some(&1.0) {
                return bad(format!("stage {stage}: last block ratio must be 1"));
            }
        }
        Ok(())
    }

    /// Output channel count of every block, per stage.
    pub fn widths(&self, spec: &SearchSpaceSpec) -> Vec<Vec<usize>> {
        self.ratios
            .iter()
            .enumerate()
            .map(|(s, rs)| rs.iter().map(|&r| spec.width(s, r)).collect())
            .collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.ratios.iter().map(Vec::len).sum()
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratios: Vec<String> = self.ratios.iter().map(|r| join(r)).collect();
        write!(f, "depths={} ratios={}", join(&self.depths), ratios.join("/"))
    }
}

impl FromStr for ArchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = parse_kv_line(s)?;
        let depths = parse_list("depths", take(&mut map, "depths")?)?;
        let ratios_str = take(&mut map, "ratios")?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Parse(format!("unknown key {k:?}")));
        }
        let ratios = ratios_str
            .split('/')
            .map(|st| parse_list::<f64>("ratios", st))
            .collect::<Result<Vec<_>>>()?;
        if ratios.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::Parse("ratios: non-finite value".into()));
        }
        Ok(Self { depths, ratios })
    }
}

impl From<ArchConfig> for String {
    fn from(c: ArchConfig) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ArchConfig {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Draws a configuration uniformly over depth choices per stage and ratio choices per searchable block.
pub fn sample(spec: &SearchSpaceSpec, seed: u64) -> Result<ArchConfig> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    Ok(sample_with(spec, &mut rng))
}

/// Sampling core for callers that already validated the spec and hold a generator.
pub fn sample_with(spec: &SearchSpaceSpec, rng: &mut rng::Rng) -> ArchConfig {
    let mut depths = Vec::with_capacity(spec.num_stages);
    let mut ratios = Vec::with_capacity(spec.num_stages);
    for stage in 0..spec.num_stages {
        let d = spec.depth_choices[rng.random_range(0..spec.depth_choices.len())];
        let blocks = spec.blocks_for(stage, d);
        let mut rs: Vec<f64> = (0..blocks.saturating_sub(1))
            .map(|_| spec.ratio_choices[rng.random_range(0..spec.ratio_choices.len())])
            .collect();
        rs.push(1.0);
        depths.push(d);
        ratios.push(rs);
    }
    ArchConfig { depths, ratios }
}

/// Maximum depth at every stage and ratio 1.0 everywhere.
pub fn largest(spec: &SearchSpaceSpec) -> ArchConfig {
    let d = *spec.depth_choices.last().expect("validated spec has depth choices");
    ArchConfig {
        depths: vec![d; spec.num_stages],
        ratios: (0..spec.num_stages)
            .map(|s| vec![1.0; spec.blocks_for(s, d)])
            .collect(),
    }
}

pub fn encode_onehot(spec: &SearchSpaceSpec, config: &ArchConfig) -> Result<Vec<u8>> {
    config.validate(spec)?;
    let nd = spec.depth_choices.len();
    let nr = spec.ratio_choices.len();
    let mut v = vec![0u8; spec.encoding_len()];
    let mut off = 0;
    for (&d, rs) in config.depths.iter().zip(&config.ratios) {
        v[off + spec.depth_index(d).unwrap()] = 1;
        off += nd;
        for (slot, &r) in rs.iter().enumerate() {
            v[off + slot * nr + spec.ratio_index(r).unwrap()] = 1;
        }
        off += spec.max_layers_per_stage * nr;
    }
    Ok(v)
}

fn single_hot(block: &[u8], what: &str) -> Result<Option<usize>> {
    let mut hot = None;
    for (i, &b) in block.iter().enumerate() {
        match b {
            0 => {}
            1 if hot.is_none() => hot = Some(i),
            1 => return Err(Error::Decode(format!("{what}: more than one bit set"))),
            x => return Err(Error::Decode(format!("{what}: non-binary value {x}"))),
        }
    }
    Ok(hot)
}

pub fn decode_onehot(spec: &SearchSpaceSpec, v: &[u8]) -> Result<ArchConfig> {
    spec.validate()?;
    if v.len() != spec.encoding_len() {
        return Err(Error::Decode(format!(
            "length {} != expected {}",
            v.len(),
            spec.encoding_len()
        )));
    }
    let nd = spec.depth_choices.len();
    let nr = spec.ratio_choices.len();
    let mut off = 0;
    let mut depths = Vec::new();
    let mut ratios = Vec::new();
    for stage in 0..spec.num_stages {
        let what = format!("stage {stage} depth block");
        let di = single_hot(&v[off..off + nd], &what)?
            .ok_or_else(|| Error::Decode(format!("{what}: no bit set")))?;
        off += nd;
        let d = spec.depth_choices[di];
        let blocks = spec.blocks_for(stage, d);
        let mut rs = Vec::with_capacity(blocks);
        for slot in 0..spec.max_layers_per_stage {
            let what = format!("stage {stage} slot {slot} ratio block");
            let hot = single_hot(&v[off + slot * nr..off + (slot + 1) * nr], &what)?;
            match (slot < blocks, hot) {
                (true, Some(ri)) => rs.push(spec.ratio_choices[ri]),
                (true, None) => {
                    return Err(Error::Decode(format!("{what}: active block missing ratio")))
                }
                (false, Some(_)) => {
                    return Err(Error::Decode(format!("{what}: inactive slot is set")))
                }
                (false, None) => {}
            }
        }
        if rs.last() != Some(&1.0) {
            return Err(Error::Decode(format!(
                "stage {stage}: last block ratio is not 1"
            )));
        }
        off += spec.max_layers_per_stage * nr;
        depths.push(d);
        ratios.push(rs);
    }
    Ok(ArchConfig { depths, ratios })
}

pub fn onehot_to_string(v: &[u8]) -> String {
    v.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

pub fn onehot_from_str(s: &str) -> Result<Vec<u8>> {
    s.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Parse(format!("one-hot string: unexpected {c:?}"))),
        })
        .collect()
}

/// Multiply-accumulate and trainable-parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
}

/// Upper bounds applied with strict inequality; an absent bound admits everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_macs: Option<u64>,
    pub max_params: Option<u64>,
}

pub fn conv_macs(kernel: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    (kernel * kernel * c_in * c_out * h_out * w_out) as u64
}

/// Output size of a padded 3x3 (or unpadded 1x1) convolution along one axis.
pub fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// Whether block `layer` of `stage` carries a projection shortcut. Only stage-entry blocks whose
/// base input width or resolution changes do; the decision is structural, independent of ratios.
pub fn has_projection(spec: &SearchSpaceSpec, stage: usize, layer: usize) -> bool {
    if layer != 0 {
        return false;
    }
    let in_base = if stage == 0 {
        spec.stem_width()
    } else {
        spec.base_widths[stage - 1]
    };
    stage > 0 || in_base != spec.base_widths[stage]
}

pub fn block_stride(stage: usize, layer: usize) -> usize {
    if stage > 0 && layer == 0 {
        2
    } else {
        1
    }
}

/// Exact backbone (stem + stages) costs at `input_shape`. Normalization layers contribute two
/// parameters per channel and no MACs; the classifier head is added by [`CostReport::with_head`].
pub fn count_costs(
    spec: &SearchSpaceSpec,
    config: &ArchConfig,
    input_shape: [usize; 3],
) -> CostReport {
    let [c_in, mut h, mut w] = input_shape;
    let stem = spec.stem_width();
    let mut macs = conv_macs(3, c_in, stem, h, w);
    let mut params = (9 * c_in * stem + 2 * stem) as u64;
    let mut prev = stem;
    for (stage, widths) in config.widths(spec).iter().enumerate() {
        for (layer, &k) in widths.iter().enumerate() {
            let s = block_stride(stage, layer);
            h = conv_out(h, s);
            w = conv_out(w, s);
            macs += conv_macs(3, prev, k, h, w) + conv_macs(3, k, k, h, w);
            params += (9 * prev * k + 9 * k * k + 4 * k) as u64;
            if has_projection(spec, stage, layer) {
                macs += conv_macs(1, prev, k, h, w);
                params += (prev * k + 2 * k) as u64;
            }
            prev = k;
        }
    }
    CostReport { macs, params }
}

impl CostReport {
    /// Adds a linear classifier over the final stage width.
    pub fn with_head(self, spec: &SearchSpaceSpec, num_classes: usize) -> Self {
        let c = *spec.base_widths.last().unwrap() as u64;
        let k = num_classes as u64;
        Self {
            macs: self.macs + c * k,
            params: self.params + c * k + k,
        }
    }
}

pub fn within_budget(report: &CostReport, budget: &Budget) -> bool {
    budget.max_macs.is_none_or(|m| report.macs < m)
        && budget.max_params.is_none_or(|p| report.params < p)
}
