//! Task database: one record per (dataset split, trained teacher) with distilled student accuracies.
//!
//! The file is JSON Lines. The first line is a versioned header; every other line is a
//! [`TaskRecord`]. Accuracies are stored as decimal strings with six places. Teacher checkpoints
//! live in `checkpoints/` beside the file and are named by content hash; synthetic teachers are
//! described by their generator parameters instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::archive::{load_network, save_network, write_atomic};
use crate::data::{Dataset, DatasetSplitPlan};
use crate::distill::{distill, train_supervised, KDConfig};
use crate::encoding::NoiseProbe;
use crate::error::{Error, Result};
use crate::nn::{Role, StagedNetwork};
use crate::predictor::PreparedTask;
use crate::remap::validate_remap_feasibility;
use crate::rng;
use crate::search_space::{count_costs, largest, sample_with, ArchConfig, SearchSpaceSpec};

pub const FORMAT: &str = "danas-taskdb";
pub const VERSION: u32 = 1;

/// An accuracy in `[0, 1]`, serialized as a six-place decimal string.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Accuracy(pub f64);

impl Accuracy {
    /// Rounds to the stored precision.
    pub fn new(v: f64) -> Result<Self> {
        Self::from_str(&format!("{v:.6}"))
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

impl FromStr for Accuracy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: f64 = s.parse().map_err(|_| Error::Parse(format!("accuracy {s:?} is not a number")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parse(format!("accuracy {s} outside [0, 1]")));
        }
        Ok(Self(v))
    }
}

impl Serialize for Accuracy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Accuracy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskRole {
    MetaTrain,
    MetaVal,
    MetaTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherRef {
    /// Trained network stored at `file`, relative to the database directory.
    Checkpoint { file: String, hash: String },
    /// Largest network of the space at random init, convolution weights scaled by `gain`.
    Synthetic { init_seed: u64, gain: f64, num_classes: usize },
}

/// Per-task coefficients of the synthetic accuracy oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOracle {
    pub bias: f64,
    pub weights: [f64; 4],
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub config: ArchConfig,
    pub accuracy: Accuracy,
    /// Oracle noise term, present in synthetic databases only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub split: usize,
    pub role: TaskRole,
    pub teacher: TeacherRef,
    pub teacher_config: ArchConfig,
    pub teacher_accuracy: Accuracy,
    pub pairs: Vec<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<TaskOracle>,
}

/// Shared definition of the synthetic oracle.
///
/// With features `f = [macs / macs_max, params / params_max, blocks / blocks_max, mean_ratio]`,
/// a config's accuracy on a task is
/// `clamp(bias + weights . f + kappa * (gain - 1) * (mean_ratio - 0.5) + noise, 0, 1)`,
/// rounded to six places. Costs exclude the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub macs_max: u64,
    pub params_max: u64,
    pub blocks_max: usize,
    pub kappa: f64,
}

impl OracleSpec {
    pub fn features(&self, spec: &SearchSpaceSpec, config: &ArchConfig) -> [f64; 4] {
        let cost = count_costs(spec, config, spec.input_shape);
        let ratios: Vec<f64> = config.ratios.iter().flatten().copied().collect();
        [
            cost.macs as f64 / self.macs_max as f64,
            cost.params as f64 / self.params_max as f64,
            config.total_blocks() as f64 / self.blocks_max as f64,
            ratios.iter().sum::<f64>() / ratios.len() as f64,
        ]
    }

    pub fn value(&self, spec: &SearchSpaceSpec, task: &TaskOracle, config: &ArchConfig, noise: f64) -> Accuracy {
        let f = self.features(spec, config);
        let mut y = task.bias;
        for i in 0..4 {
            y += task.weights[i] * f[i];
        }
        y += self.kappa * (task.gain - 1.0) * (f[3] - 0.5) + noise;
        Accuracy::new(y.clamp(0.0, 1.0)).expect("clamped value is a valid accuracy")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub spec: SearchSpaceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<DatasetSplitPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
}

impl Header {
    pub fn new(spec: &SearchSpaceSpec) -> Self {
        Self { format: FORMAT.into(), version: VERSION, spec: spec.clone(), source: None, plan: None, oracle: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDb {
    pub header: Header,
    pub records: Vec<TaskRecord>,
    /// Directory checkpoint references resolve against.
    pub dir: PathBuf,
}

impl TaskDb {
    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn by_role(&self, role: TaskRole) -> Vec<&TaskRecord> {
        self.records.iter().filter(|r| r.role == role).collect()
    }

    /// Loads or regenerates the teacher a record refers to.
    pub fn teacher(&self, record: &TaskRecord) -> Result<StagedNetwork> {
        resolve_teacher(&self.header.spec, &self.dir, record)
    }

    /// Probes every teacher and student of the given records.
    pub fn prepare(&self, records: &[&TaskRecord], probe: &NoiseProbe) -> Result<Vec<PreparedTask>> {
        records
            .par_iter()
            .map(|r| {
                let teacher = self.teacher(r)?;
                let pairs: Vec<(ArchConfig, f64)> = r.pairs.iter().map(|p| (p.config.clone(), p.accuracy.0)).collect();
                PreparedTask::new(&format!("split-{}", r.split), &teacher, r.teacher_accuracy.0, &pairs, probe)
            })
            .collect()
    }
}

impl Serialize for SearchSpaceSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SearchSpaceSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn synthetic_teacher(spec: &SearchSpaceSpec, init_seed: u64, gain: f64, num_classes: usize) -> Result<StagedNetwork> {
    let mut net = StagedNetwork::build(spec, &largest(spec), num_classes, init_seed)?;
    for (k, t) in net.params.0.iter_mut() {
        if matches!(k.role, Role::ConvWeight(_)) {
            t.mapv_inplace(|v| v * gain as f32);
        }
    }
    Ok(net)
}

fn resolve_teacher(spec: &SearchSpaceSpec, dir: &Path, record: &TaskRecord) -> Result<StagedNetwork> {
    let net = match &record.teacher {
        TeacherRef::Synthetic { init_seed, gain, num_classes } => synthetic_teacher(spec, *init_seed, *gain, *num_classes)?,
        TeacherRef::Checkpoint { file, hash } => {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|_| Error::DanglingCheckpoint(path.clone()))?;
            if rng::content_hash(&bytes) != *hash {
                return Err(Error::Archive(format!("{}: content hash mismatch", path.display())));
            }
            load_network(&path)?
        }
    };
    if net.config != record.teacher_config {
        return Err(Error::Schema {
            line: 0,
            msg: format!("split {}: teacher checkpoint config differs from the record", record.split),
        });
    }
    Ok(net)
}

fn validate_record(header: &Header, r: &TaskRecord) -> std::result::Result<(), String> {
    let spec = &header.spec;
    r.teacher_config.validate(spec).map_err(|e| format!("teacher config: {e}"))?;
    for (i, p) in r.pairs.iter().enumerate() {
        p.config.validate(spec).map_err(|e| format!("pair {i}: {e}"))?;
        let f = validate_remap_feasibility(spec, &r.teacher_config, &p.config);
        if !f.feasible {
            return Err(format!("pair {i} is not remappable from the teacher: {}", f.violations.join("; ")));
        }
    }
    if let Some(pool) = header.plan.as_ref().map(|p| p.num_splits) {
        if r.split >= pool {
            return Err(format!("split {} outside the plan's {pool} splits", r.split));
        }
    }
    Ok(())
}

/// Parses database text. `dir` is where checkpoint references resolve; they are checked to exist.
pub fn parse_db(text: &str, dir: &Path) -> Result<TaskDb> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        let header = Header::new(&SearchSpaceSpec::standard());
        return Ok(TaskDb { header, records: Vec::new(), dir: dir.to_path_buf() });
    };
    let header: Header = serde_json::from_str(first).map_err(|e| Error::Schema { line: 1, msg: format!("header: {e}") })?;
    if header.format != FORMAT {
        return Err(Error::Schema { line: 1, msg: format!("format {:?}, expected {FORMAT:?}", header.format) });
    }
    if header.version != VERSION {
        return Err(Error::Schema { line: 1, msg: format!("unsupported version {}", header.version) });
    }
    header.spec.validate().map_err(|e| Error::Schema { line: 1, msg: e.to_string() })?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let r: TaskRecord = serde_json::from_str(line).map_err(|e| Error::Schema { line: lineno, msg: e.to_string() })?;
        validate_record(&header, &r).map_err(|msg| Error::Schema { line: lineno, msg })?;
        if let TeacherRef::Checkpoint { file, .. } = &r.teacher {
            if !dir.join(file).is_file() {
                return Err(Error::DanglingCheckpoint(dir.join(file)));
            }
        }
        records.push(r);
    }
    Ok(TaskDb { header, records, dir: dir.to_path_buf() })
}

pub fn load_db(path: &Path) -> Result<TaskDb> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_db(&text, &dir)
}

/// Samples up to `size` distinct configs. Spaces smaller than `size` yield every config reached.
pub fn sample_pool(spec: &SearchSpaceSpec, size: usize, seed: u64) -> Result<Vec<ArchConfig>> {
    spec.validate()?;
    let mut rng = rng::seeded(rng::derive_seed(seed, "pool"));
    let mut seen = BTreeSet::new();
    let mut pool = Vec::with_capacity(size);
    let mut misses = 0;
    while pool.len() < size && misses < 50 * size.max(1) {
        let c = sample_with(spec, &mut rng);
        if seen.insert(c.to_string()) {
            pool.push(c);
        } else {
            misses += 1;
        }
    }
    if pool.len() < size {
        log::warn!("pool holds {} distinct configs, fewer than the requested {size}", pool.len());
    }
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDbConfig {
    pub meta_train: usize,
    pub meta_val: usize,
    pub meta_test: usize,
    pub pairs_per_task: usize,
    pub pool_size: usize,
    pub num_classes: usize,
    pub kappa: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDbConfig {
    fn default() -> Self {
        Self {
            meta_train: 8,
            meta_val: 1,
            meta_test: 2,
            pairs_per_task: 60,
            pool_size: 300,
            num_classes: 20,
            kappa: 0.3,
            noise_std: 0.005,
            seed: 0,
        }
    }
}

/// Generates a database whose accuracies come from the analytic oracle written into its header
/// and records, so ground truth can be recomputed from the file alone.
pub fn make_synthetic_db(spec: &SearchSpaceSpec, cfg: &SyntheticDbConfig) -> Result<TaskDb> {
    spec.validate()?;
    let big = largest(spec);
    let top = count_costs(spec, &big, spec.input_shape);
    let oracle = OracleSpec { macs_max: top.macs, params_max: top.params, blocks_max: big.total_blocks(), kappa: cfg.kappa };
    let pool = sample_pool(spec, cfg.pool_size, cfg.seed)?;
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "oracle"));
    let shared: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.03..0.15));
    let perturb = Normal::new(0.0, 0.04).unwrap();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).unwrap();
    let total = cfg.meta_train + cfg.meta_val + cfg.meta_test;
    let mut records = Vec::with_capacity(total);
    for split in 0..total {
        let role = if split < cfg.meta_train {
            TaskRole::MetaTrain
        } else if split < cfg.meta_train + cfg.meta_val {
            TaskRole::MetaVal
        } else {
            TaskRole::MetaTest
        };
        let task = TaskOracle {
            bias: rng.random_range(0.3..0.45),
            weights: std::array::from_fn(|i| shared[i] + perturb.sample(&mut rng)),
            gain: rng.random_range(0.7..1.3),
        };
        let init_seed = rng.random::<u64>() >> 1;
        let k = cfg.pairs_per_task.min(pool.len());
        let pairs = index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| {
                let n = noise.sample(&mut rng);
                Pair { config: pool[i].clone(), accuracy: oracle.value(spec, &task, &pool[i], n), noise: Some(n) }
            })
            .collect();
        records.push(TaskRecord {
            split,
            role,
            teacher: TeacherRef::Synthetic { init_seed, gain: task.gain, num_classes: cfg.num_classes },
            teacher_config: big.clone(),
            teacher_accuracy: oracle.value(spec, &task, &big, 0.0),
            pairs,
            oracle: Some(task),
        });
    }
    let mut header = Header::new(spec);
    header.source = Some("synthetic".into());
    header.oracle = Some(oracle);
    Ok(TaskDb { header, records, dir: PathBuf::new() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub splits: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub pool_size: usize,
    pub pairs_per_task: usize,
    pub kd: KDConfig,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self::paper_scale()
    }
}

impl BuildConfig {
    /// Database-construction quantities as published: 10 splits, 180 teacher epochs, a pool of
    /// 2000 architectures and 200 distilled pairs per task.
    pub fn paper_scale() -> Self {
        Self {
            splits: 10,
            teacher_epochs: 180,
            teacher_lr: 5e-2,
            pool_size: 2000,
            pairs_per_task: 200,
            kd: KDConfig::default(),
            seed: 0,
        }
    }

    /// Desk-scale preset for the two-stage space.
    pub fn mini() -> Self {
        Self {
            splits: 5,
            teacher_epochs: 10,
            teacher_lr: 5e-2,
            pool_size: 30,
            pairs_per_task: 8,
            kd: KDConfig { epochs: 10, lr: 0.2, batch_size: 16, ..KDConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JournalEntry {
    Teacher { split: usize, file: String, hash: String, accuracy: Accuracy },
    Pair { split: usize, index: usize, config: ArchConfig, accuracy: Accuracy },
}

fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        // A torn final line from an interrupted append is dropped and redone.
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(_) => log::warn!("ignoring unreadable journal line"),
        }
    }
    Ok(out)
}

struct Journal(Mutex<std::fs::File>);

impl Journal {
    fn append(&self, e: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_string(e)?;
        line.push('\n');
        let mut f = self.0.lock().expect("journal lock");
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Trains one teacher per split, distills sampled students from a shared pool and writes
/// `taskdb.jsonl` into `out_dir`. Progress is journaled so an interrupted build resumes where it
/// stopped; the final file depends only on the inputs.
pub fn build_db(
    spec: &SearchSpaceSpec,
    dataset: &Dataset,
    source: &str,
    plan: &DatasetSplitPlan,
    cfg: &BuildConfig,
    out_dir: &Path,
) -> Result<TaskDb> {
    spec.validate()?;
    cfg.kd.validate()?;
    if dataset.image_shape() != spec.input_shape {
        return Err(Error::Dataset(format!(
            "dataset images are {:?}, space expects {:?}",
            dataset.image_shape(),
            spec.input_shape
        )));
    }
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let journal_path = out_dir.join("journal.jsonl");
    let done = read_journal(&journal_path)?;
    let journal = Journal(Mutex::new(OpenOptions::new().create(true).append(true).open(&journal_path)?));
    let pool = sample_pool(spec, cfg.pool_size, cfg.seed)?;
    let teacher_cfg = largest(spec);
    let mut teachers: BTreeMap<usize, (String, String, Accuracy)> = BTreeMap::new();
    let mut pairs: BTreeMap<(usize, usize), (ArchConfig, Accuracy)> = BTreeMap::new();
    for e in done {
        match e {
            JournalEntry::Teacher { split, file, hash, accuracy } => {
                if out_dir.join(&file).is_file() {
                    teachers.insert(split, (file, hash, accuracy));
                }
            }
            JournalEntry::Pair { split, index, config, accuracy } => {
                pairs.insert((split, index), (config, accuracy));
            }
        }
    }
    let mut records = Vec::new();
    for split in 0..plan.num_splits {
        let task = plan.materialize(dataset, split)?;
        let teacher = match teachers.get(&split) {
            Some((file, _, _)) => load_network(&out_dir.join(file))?,
            None => {
                let init = StagedNetwork::build(
                    spec,
                    &teacher_cfg,
                    task.train.num_classes,
                    rng::derive_seed(cfg.seed, &format!("teacher-init/{split}")),
                )?;
                let out = train_supervised(
                    init,
                    &task.train,
                    &task.val,
                    cfg.teacher_epochs,
                    cfg.teacher_lr,
                    cfg.kd.batch_size,
                    rng::derive_seed(cfg.seed, &format!("teacher/{split}")),
                )?;
                let tmp = out_dir.join("checkpoints").join(format!("split-{split}.partial"));
                save_network(&out.net, &tmp)?;
                let hash = rng::content_hash(&std::fs::read(&tmp)?);
                let file = format!("checkpoints/{hash}.dnt");
                std::fs::rename(&tmp, out_dir.join(&file))?;
                let acc = Accuracy::new(out.best_val_acc)?;
                journal.append(&JournalEntry::Teacher { split, file: file.clone(), hash: hash.clone(), accuracy: acc })?;
                teachers.insert(split, (file, hash, acc));
                out.net
            }
        };
        let (file, hash, teacher_acc) = teachers[&split].clone();
        let k = cfg.pairs_per_task.min(pool.len());
        let mut prng = rng::seeded(rng::derive_seed(cfg.seed, &format!("pairs/{split}")));
        let chosen: Vec<usize> = index::sample(&mut prng, pool.len(), k).into_vec();
        let todo: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .filter(|(i, _)| !pairs.contains_key(&(split, *i)))
            .map(|(i, &p)| (i, p))
            .collect();
        let fresh: Vec<((usize, usize), (ArchConfig, Accuracy))> = todo
            .par_iter()
            .map(|&(i, p)| {
                let kd = KDConfig { seed: rng::derive_seed(cfg.seed, &format!("kd/{split}/{i}")), ..cfg.kd.clone() };
                let out = distill(&teacher, &pool[p], &task.train, &task.val, &kd)?;
                let acc = Accuracy::new(out.best_val_acc)?;
                journal.append(&JournalEntry::Pair { split, index: i, config: pool[p].clone(), accuracy: acc })?;
                Ok(((split, i), (pool[p].clone(), acc)))
            })
            .collect::<Result<_>>()?;
        pairs.extend(fresh);
        records.push(TaskRecord {
            split,
            role: if plan.is_meta_val(split) { TaskRole::MetaVal } else { TaskRole::MetaTrain },
            teacher: TeacherRef::Checkpoint { file, hash },
            teacher_config: teacher_cfg.clone(),
            teacher_accuracy: teacher_acc,
            pairs: (0..k)
                .map(|i| {
                    let (config, accuracy) = pairs[&(split, i)].clone();
                    Pair { config, accuracy, noise: None }
                })
                .collect(),
            oracle: None,
        });
    }
    let mut header = Header::new(spec);
    header.source = Some(source.to_string());
    header.plan = Some(plan.clone());
    let db = TaskDb { header, records, dir: out_dir.to_path_buf() };
    db.save(&out_dir.join("taskdb.jsonl"))?;
    Ok(db)
}
