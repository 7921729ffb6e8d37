//! Run configuration: a preset, optionally overlaid by a TOML file, then by `--set key=value`.

use std::collections::BTreeSet;
use std::path::Path;

use danas::data::SyntheticImages;
use danas::distill::KDConfig;
use danas::predictor::{MetaSchedule, PredictorConfig};
use danas::search_space::{Budget, SearchSpaceSpec};
use danas::task_db::{BuildConfig, SyntheticDbConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    PaperScale,
    Mini,
}

/// Every quantity a command may consume. Field names are the config keys; nested tables are
/// addressed with dots (`kd.temperature`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `standard`, `mini`, `imagenet`, or a full space line such as
    /// `stages=2 depths=1,2 widths=8,16 ratios=0.5,1 slots=2 input=3x8x8 mode=absolute`.
    pub space: String,
    pub seed: u64,
    /// `synthetic`, or a folder holding one sub-folder of images per class.
    pub dataset: String,
    pub synthetic: SyntheticImages,
    pub splits: usize,
    pub val_fraction: f64,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub pool_size: usize,
    pub pairs_per_task: usize,
    pub kd: KDConfig,
    pub meta_batch: usize,
    pub query_pairs: usize,
    pub inner_steps: usize,
    pub meta_iterations: usize,
    pub eval_every: usize,
    pub n_eval: usize,
    pub meta_lr: f64,
    pub alpha_init: f64,
    pub first_order: bool,
    pub embed: usize,
    pub hidden: usize,
    pub probe_batch: usize,
    pub probe_seed: u64,
    pub n_candidates: usize,
    pub zero_cost_batch: usize,
    /// Strict upper bounds for search; 0 leaves a bound off.
    pub budget_macs: u64,
    pub budget_params: u64,
    pub synth_db: SyntheticDbConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let pc = PredictorConfig::default();
        let ms = MetaSchedule::default();
        match p {
            Preset::PaperScale => {
                let b = BuildConfig::paper_scale();
                Self {
                    space: "standard".into(),
                    seed: 0,
                    dataset: "synthetic".into(),
                    synthetic: SyntheticImages {
                        num_classes: 100,
                        per_class: 60,
                        shape: [3, 64, 64],
                        max_shift: 4,
                        ..SyntheticImages::default()
                    },
                    splits: b.splits,
                    val_fraction: 0.1,
                    teacher_epochs: b.teacher_epochs,
                    teacher_lr: b.teacher_lr,
                    pool_size: b.pool_size,
                    pairs_per_task: b.pairs_per_task,
                    kd: b.kd,
                    meta_batch: ms.meta_batch,
                    query_pairs: ms.query_pairs,
                    inner_steps: pc.inner_steps,
                    meta_iterations: ms.iterations,
                    eval_every: ms.eval_every,
                    n_eval: ms.n_eval,
                    meta_lr: pc.meta_lr,
                    alpha_init: pc.alpha_init,
                    first_order: pc.first_order,
                    embed: pc.embed,
                    hidden: pc.hidden,
                    probe_batch: 1,
                    probe_seed: 0,
                    n_candidates: 1000,
                    zero_cost_batch: 64,
                    budget_macs: 0,
                    budget_params: 0,
                    synth_db: SyntheticDbConfig::default(),
                }
            }
            Preset::Mini => {
                let b = BuildConfig::mini();
                Self {
                    space: "mini".into(),
                    seed: 0,
                    dataset: "synthetic".into(),
                    synthetic: SyntheticImages { num_classes: 80, per_class: 300, noise: 1.8, ..SyntheticImages::default() },
                    splits: b.splits,
                    val_fraction: 0.3,
                    teacher_epochs: b.teacher_epochs,
                    teacher_lr: b.teacher_lr,
                    pool_size: b.pool_size,
                    pairs_per_task: b.pairs_per_task,
                    kd: b.kd,
                    meta_batch: 4,
                    query_pairs: 8,
                    inner_steps: pc.inner_steps,
                    meta_iterations: 300,
                    eval_every: 20,
                    n_eval: 8,
                    meta_lr: pc.meta_lr,
                    alpha_init: pc.alpha_init,
                    first_order: pc.first_order,
                    embed: 8,
                    hidden: 16,
                    probe_batch: 4,
                    probe_seed: 0,
                    n_candidates: 100,
                    zero_cost_batch: 16,
                    budget_macs: 230_000,
                    budget_params: 0,
                    synth_db: SyntheticDbConfig {
                        meta_train: 4,
                        meta_val: 1,
                        meta_test: 2,
                        pairs_per_task: 12,
                        pool_size: 16,
                        ..SyntheticDbConfig::default()
                    },
                }
            }
        }
    }

    /// Resolves preset, then file, then overrides, rejecting keys the preset does not define.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                Self::resolve_text(preset, Some((&path.display().to_string(), &text)), overrides)
            }
            None => Self::resolve_text(preset, None, overrides),
        }
    }

    /// Same as [`RunConfig::resolve`] with the file given as `(origin, contents)`.
    pub fn resolve_text(preset: Preset, file: Option<(&str, &str)>, overrides: &[String]) -> Result<Self, CliError> {
        let base = Self::preset(preset);
        let mut table = base.to_table();
        let valid = leaf_keys(&table, "");
        if let Some((origin, text)) = file {
            let overlay = parse_table(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
            for key in leaf_keys(&overlay, "") {
                check_key(&valid, &key)?;
            }
            merge(&mut table, overlay);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {item:?}")))?;
            let key = key.trim();
            check_key(&valid, key)?;
            set_path(&mut table, key, parse_scalar(raw.trim()));
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All dotted keys a config file or `--set` may name.
    pub fn valid_keys() -> BTreeSet<String> {
        leaf_keys(&Self::preset(Preset::PaperScale).to_table(), "")
    }

    pub fn spec(&self) -> Result<SearchSpaceSpec, CliError> {
        let spec = match self.space.as_str() {
            "standard" => SearchSpaceSpec::standard(),
            "mini" => SearchSpaceSpec::mini(),
            "imagenet" => SearchSpaceSpec::imagenet(),
            line => line.parse().map_err(|e| CliError::Config(format!("space: {e}")))?,
        };
        Ok(spec)
    }

    pub fn budget(&self) -> Option<Budget> {
        let bound = |v: u64| (v > 0).then_some(v);
        let b = Budget { max_macs: bound(self.budget_macs), max_params: bound(self.budget_params) };
        (b != Budget::default()).then_some(b)
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            embed: self.embed,
            hidden: self.hidden,
            inner_steps: self.inner_steps,
            meta_lr: self.meta_lr,
            alpha_init: self.alpha_init,
            first_order: self.first_order,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> MetaSchedule {
        MetaSchedule {
            iterations: self.meta_iterations,
            meta_batch: self.meta_batch,
            query_pairs: self.query_pairs,
            eval_every: self.eval_every,
            n_eval: self.n_eval,
            seed: self.seed,
        }
    }

    pub fn build(&self) -> BuildConfig {
        BuildConfig {
            splits: self.splits,
            teacher_epochs: self.teacher_epochs,
            teacher_lr: self.teacher_lr,
            pool_size: self.pool_size,
            pairs_per_task: self.pairs_per_task,
            kd: self.kd.clone(),
            seed: self.seed,
        }
    }

    /// Seeds by key, for the run manifest.
    pub fn seeds(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "kd.seed": self.kd.seed,
            "probe_seed": self.probe_seed,
            "synthetic.seed": self.synthetic.seed,
            "synth_db.seed": self.synth_db.seed,
        })
    }

    fn validate(&self) -> Result<(), CliError> {
        let spec = self.spec()?;
        self.kd.validate().map_err(|e| CliError::Config(format!("kd: {e}")))?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.dataset == "synthetic" && self.synthetic.shape != spec.input_shape {
            return Err(CliError::Config(format!(
                "synthetic.shape {:?} does not match the space input {:?}",
                self.synthetic.shape, spec.input_shape
            )));
        }
        for (key, v) in [("probe_batch", self.probe_batch), ("embed", self.embed), ("hidden", self.hidden)] {
            if v == 0 {
                return Err(CliError::Config(format!("{key} must be positive")));
            }
        }
        Ok(())
    }
}

fn parse_table(text: &str) -> Result<Table, toml::de::Error> {
    text.parse::<Table>()
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn leaf_keys(t: &Table, prefix: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => out.extend(leaf_keys(inner, &key)),
            _ => {
                out.insert(key);
            }
        }
    }
    out
}

fn check_key(valid: &BTreeSet<String>, key: &str) -> Result<(), CliError> {
    if valid.contains(key) {
        return Ok(());
    }
    let list: Vec<&str> = valid.iter().map(String::as_str).collect();
    Err(CliError::Config(format!("unknown config key `{key}`; valid keys are: {}", list.join(", "))))
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn set_path(t: &mut Table, key: &str, value: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            if let Some(Value::Table(inner)) = t.get_mut(head) {
                set_path(inner, rest, value);
            }
        }
        None => {
            t.insert(key.to_string(), value);
        }
    }
}
