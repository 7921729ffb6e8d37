//! `danas` command line: builds task databases, meta-trains the accuracy predictor, adapts it to
//! a teacher, searches and distills.
//!
//! Every run writes into its output directory the command's artifacts together with
//! `manifest.json` (resolved config, seeds, space digest, content hashes of inputs and outputs),
//! `config.toml` (the resolved config, reusable with `--config`), `result.json` and
//! `timing.json`. Only `timing.json` depends on the wall clock.

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use danas::archive::{load_network, save_network, write_atomic};
use danas::data::{load_image_folder, plan_splits, Dataset, DatasetSplitPlan, TaskData};
use danas::distill::{distill, evaluate};
use danas::encoding::{NoiseProbe, PredictorDims};
use danas::eval::{evaluate_predictor, search, zero_cost_score, PredictorScorer, Ranker, SearchResult, ZeroCostMethod};
use danas::nn::StagedNetwork;
use danas::predictor::{meta_train, predict, PredictorCheckpoint, PredictorState, PreparedTask};
use danas::rng::{self, content_hash};
use danas::search_space::{count_costs, ArchConfig, SearchSpaceSpec};
use danas::task_db::{build_db, load_db, make_synthetic_db, TaskRole};
use serde::Serialize;
use serde_json::{json, Value};
use walkdir::WalkDir;

pub use config::{Preset, RunConfig};
pub use error::CliError;

pub const LOCK_FILE: &str = ".danas.lock";

#[derive(Debug, Parser)]
#[command(name = "danas", version, about = "Distillation-aware architecture search with a meta-learned accuracy predictor")]
pub struct Cli {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set kd.temperature=4`. Repeatable; applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Start from the full-size quantities (the default).
    #[arg(long, global = true, conflicts_with = "mini")]
    pub paper_scale: bool,
    /// Start from the desk-scale preset on the two-stage space.
    #[arg(long, global = true)]
    pub mini: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "danas-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TeacherArgs {
    /// Teacher checkpoint; its split is rebuilt from the configured dataset.
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    /// Task database whose record for `--split` supplies the teacher.
    #[arg(long, value_name = "FILE")]
    pub db: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split: usize,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train teachers and distill sampled students on the configured dataset.
    BuildDb,
    /// Write a database whose accuracies come from an analytic oracle.
    MakeSynthDb,
    /// Meta-train the predictor on a task database.
    MetaTrain {
        #[arg(long, value_name = "FILE")]
        db: PathBuf,
    },
    /// Adapt a predictor to one teacher and save the adapted state.
    Adapt {
        #[arg(long, value_name = "FILE")]
        predictor: PathBuf,
        #[command(flatten)]
        teacher: TeacherArgs,
    },
    /// Score given students for a teacher.
    Predict {
        #[arg(long, value_name = "FILE")]
        predictor: PathBuf,
        #[command(flatten)]
        teacher: TeacherArgs,
        /// Student architecture, e.g. `depths=1,2 ratios=1/0.5,1`. Repeatable.
        #[arg(long = "arch", required = true)]
        archs: Vec<String>,
    },
    /// Rank sampled candidates under the configured budget.
    Search {
        #[arg(long, default_value = "danas", value_parser = ["danas", "grad-norm", "activation-overlap"])]
        method: String,
        #[arg(long, value_name = "FILE")]
        predictor: Option<PathBuf>,
        #[command(flatten)]
        teacher: TeacherArgs,
    },
    /// Distill one student from a teacher.
    Distill {
        #[command(flatten)]
        teacher: TeacherArgs,
        #[arg(long)]
        arch: String,
    },
    /// Report predictor rank correlation on the tasks of a database.
    Eval {
        #[arg(long, value_name = "FILE")]
        predictor: PathBuf,
        #[arg(long, value_name = "FILE")]
        db: PathBuf,
        #[arg(long, default_value = "meta-test", value_parser = ["meta-train", "meta-val", "meta-test"])]
        role: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildDb => "build-db",
            Command::MakeSynthDb => "make-synth-db",
            Command::MetaTrain { .. } => "meta-train",
            Command::Adapt { .. } => "adapt",
            Command::Predict { .. } => "predict",
            Command::Search { .. } => "search",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Lock(path))
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    space: Option<SearchSpaceSpec>,
    inputs: BTreeMap<String, Value>,
    outputs: Vec<String>,
    timing: serde_json::Map<String, Value>,
}

impl Run {
    fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let hash = hash_path(path)?;
        self.inputs.insert(role.into(), json!({ "path": path.display().to_string(), "hash": hash }));
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        write_atomic(&self.out.join(name), text.as_bytes())?;
        self.outputs.push(name.into());
        Ok(())
    }

    fn time(&mut self, key: &str, seconds: f64) {
        self.timing.insert(key.into(), json!(seconds));
    }
}

fn hash_path(path: &Path) -> Result<String, CliError> {
    let unreadable = |e: std::io::Error| CliError::Input(format!("cannot read {}: {e}", path.display()));
    if !path.is_dir() {
        return Ok(content_hash(&std::fs::read(path).map_err(unreadable)?));
    }
    let mut listing = String::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Input(e.to_string()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).expect("walk stays under its root");
            let bytes = std::fs::read(entry.path()).map_err(unreadable)?;
            listing += &format!("{} {}\n", rel.display(), content_hash(&bytes));
        }
    }
    Ok(content_hash(listing.as_bytes()))
}

/// Parses arguments and runs; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_USAGE } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("danas {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let preset = if cli.mini { Preset::Mini } else { Preset::PaperScale };
    let cfg = RunConfig::resolve(preset, cli.config.as_deref(), &cli.set)?;
    let _lock = Lock::acquire(&cli.out)?;
    let mut run = Run {
        cfg,
        out: cli.out.clone(),
        space: None,
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
        timing: serde_json::Map::new(),
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::BuildDb => build(&mut run)?,
        Command::MakeSynthDb => make_synth(&mut run)?,
        Command::MetaTrain { db } => train(&mut run, db)?,
        Command::Adapt { predictor, teacher } => adapt(&mut run, predictor, teacher)?,
        Command::Predict { predictor, teacher, archs } => predict_archs(&mut run, predictor, teacher, archs)?,
        Command::Search { method, predictor, teacher } => run_search(&mut run, method, predictor.as_deref(), teacher)?,
        Command::Distill { teacher, arch } => run_distill(&mut run, teacher, arch)?,
        Command::Eval { predictor, db, role } => run_eval(&mut run, predictor, db, role)?,
    };
    run.write_json("result.json", &result)?;
    run.time("total_seconds", start.elapsed().as_secs_f64());

    let toml_text = run.cfg.to_toml();
    write_atomic(&run.out.join("config.toml"), toml_text.as_bytes())?;
    let mut outputs = BTreeMap::new();
    for name in &run.outputs {
        outputs.insert(name.clone(), hash_path(&run.out.join(name))?);
    }
    let space = run.space.clone().map(|s| json!({ "spec": s.to_string(), "digest": s.digest() }));
    let manifest = json!({
        "tool": "danas",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "arguments": &cli.command,
        "preset": if cli.mini { "mini" } else { "paper-scale" },
        "config": serde_json::to_value(&run.cfg)?,
        "seeds": run.cfg.seeds(),
        "space": space,
        "inputs": run.inputs,
        "outputs": outputs,
    });
    run.write_json("manifest.json", &manifest)?;
    let timing = Value::Object(std::mem::take(&mut run.timing));
    let text = serde_json::to_string_pretty(&timing)? + "\n";
    write_atomic(&run.out.join("timing.json"), text.as_bytes())?;
    Ok(())
}

fn dataset_source(cfg: &RunConfig) -> String {
    if cfg.dataset == "synthetic" {
        format!("synthetic {}", serde_json::to_string(&cfg.synthetic).expect("serializes"))
    } else {
        cfg.dataset.clone()
    }
}

fn load_dataset(run: &mut Run, spec: &SearchSpaceSpec) -> Result<Dataset, CliError> {
    if run.cfg.dataset == "synthetic" {
        return Ok(run.cfg.synthetic.generate()?);
    }
    let root = PathBuf::from(&run.cfg.dataset);
    run.input("dataset", &root)?;
    Ok(load_image_folder(&root, spec.input_shape)?)
}

fn split_plan(cfg: &RunConfig, ds: &Dataset) -> Result<DatasetSplitPlan, CliError> {
    let mut plan = plan_splits(&dataset_source(cfg), ds.num_classes, cfg.splits, cfg.seed)?;
    plan.val_fraction = cfg.val_fraction;
    Ok(plan)
}

struct Teacher {
    id: String,
    net: StagedNetwork,
    accuracy: f64,
    data: Option<TaskData>,
}

fn resolve_teacher(run: &mut Run, args: &TeacherArgs, need_data: bool) -> Result<Teacher, CliError> {
    let id = format!("split-{}", args.split);
    let teacher = match (&args.teacher, &args.db) {
        (Some(path), None) => {
            run.input("teacher", path)?;
            let net = load_network(path)?;
            let ds = load_dataset(run, &net.spec)?;
            let data = split_plan(&run.cfg, &ds)?.materialize(&ds, args.split)?;
            if data.train.num_classes != net.num_classes {
                return Err(CliError::Input(format!(
                    "teacher has {} classes, split {} of the dataset has {}",
                    net.num_classes, args.split, data.train.num_classes
                )));
            }
            let accuracy = evaluate(&net, &data.val)?;
            Teacher { id, net, accuracy, data: Some(data) }
        }
        (None, Some(path)) => {
            run.input("db", path)?;
            let db = load_db(path)?;
            let record = db
                .records
                .iter()
                .find(|r| r.split == args.split)
                .ok_or_else(|| CliError::Input(format!("{} has no record for split {}", path.display(), args.split)))?;
            let net = db.teacher(record)?;
            let data = match &db.header.plan {
                Some(plan) if need_data => {
                    if plan.source != dataset_source(&run.cfg) {
                        return Err(CliError::Input(format!(
                            "the database was built from `{}`, the config names `{}`",
                            plan.source,
                            dataset_source(&run.cfg)
                        )));
                    }
                    let ds = load_dataset(run, &db.header.spec)?;
                    Some(plan.materialize(&ds, args.split)?)
                }
                _ => None,
            };
            Teacher { id, net, accuracy: record.teacher_accuracy.0, data }
        }
        _ => return Err(CliError::Usage("name the teacher with either --teacher FILE or --db FILE [--split N]".into())),
    };
    if need_data && teacher.data.is_none() {
        return Err(CliError::Input("this command needs images, but the database teachers are synthetic".into()));
    }
    run.space = Some(teacher.net.spec.clone());
    Ok(teacher)
}

fn load_predictor(run: &mut Run, path: &Path) -> Result<PredictorCheckpoint, CliError> {
    run.input("predictor", path)?;
    let ck = PredictorCheckpoint::load(path)?;
    run.space = Some(ck.spec.clone());
    Ok(ck)
}

fn adapted(ck: &PredictorCheckpoint, t: &Teacher) -> Result<PredictorState, CliError> {
    if t.net.spec != ck.spec {
        return Err(CliError::Input(format!("teacher space `{}` differs from predictor space `{}`", t.net.spec, ck.spec)));
    }
    let task = PreparedTask::new("unseen", &t.net, t.accuracy, &[], &ck.probe())?;
    Ok(ck.state.adapted(&task)?)
}

fn cost_json(spec: &SearchSpaceSpec, c: &ArchConfig) -> Value {
    let cost = count_costs(spec, c, spec.input_shape);
    json!({ "macs": cost.macs, "params": cost.params })
}

fn build(run: &mut Run) -> Result<Value, CliError> {
    let spec = run.cfg.spec()?;
    run.space = Some(spec.clone());
    let ds = load_dataset(run, &spec)?;
    let plan = split_plan(&run.cfg, &ds)?;
    let start = Instant::now();
    let db = build_db(&spec, &ds, &plan.source, &plan, &run.cfg.build(), &run.out)?;
    run.time("build_seconds", start.elapsed().as_secs_f64());
    run.outputs.push("taskdb.jsonl".into());
    let records: Vec<Value> = db
        .records
        .iter()
        .map(|r| {
            let n = r.pairs.len().max(1) as f64;
            json!({
                "split": r.split,
                "role": r.role,
                "teacher_accuracy": r.teacher_accuracy,
                "pairs": r.pairs.len(),
                "mean_pair_accuracy": r.pairs.iter().map(|p| p.accuracy.0).sum::<f64>() / n,
            })
        })
        .collect();
    println!("wrote {} tasks to {}", records.len(), run.out.join("taskdb.jsonl").display());
    Ok(json!({ "records": records }))
}

fn make_synth(run: &mut Run) -> Result<Value, CliError> {
    let spec = run.cfg.spec()?;
    run.space = Some(spec.clone());
    let db = make_synthetic_db(&spec, &run.cfg.synth_db)?;
    db.save(&run.out.join("taskdb.jsonl"))?;
    run.outputs.push("taskdb.jsonl".into());
    let count = |role| db.by_role(role).len();
    println!("wrote {} synthetic tasks to {}", db.records.len(), run.out.join("taskdb.jsonl").display());
    Ok(json!({
        "meta_train": count(TaskRole::MetaTrain),
        "meta_val": count(TaskRole::MetaVal),
        "meta_test": count(TaskRole::MetaTest),
        "pairs": db.records.iter().map(|r| r.pairs.len()).sum::<usize>(),
    }))
}

/// Ranks by the unadapted predictor, for comparison with guided ranking.
struct Unadapted<'a>(&'a PredictorState);

impl Ranker for Unadapted<'_> {
    fn rank_scores(&self, task: &PreparedTask, n: usize) -> danas::Result<Vec<f64>> {
        task.queries[..n].iter().map(|(x, _)| self.0.predict_input(x)).collect()
    }
}

#[derive(Debug, Serialize)]
struct SrcRow {
    task: String,
    n_eval: usize,
    src_guided: f64,
    src_plain: f64,
}

fn src_rows(state: &PredictorState, tasks: &[PreparedTask], n_eval: usize) -> Result<Vec<SrcRow>, CliError> {
    tasks
        .iter()
        .map(|t| {
            let n = n_eval.min(t.queries.len());
            Ok(SrcRow {
                task: t.id.clone(),
                n_eval: n,
                src_guided: evaluate_predictor(state, t, n)?,
                src_plain: evaluate_predictor(&Unadapted(state), t, n)?,
            })
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn train(run: &mut Run, db_path: &Path) -> Result<Value, CliError> {
    run.input("db", db_path)?;
    let db = load_db(db_path)?;
    let spec = db.header.spec.clone();
    run.space = Some(spec.clone());
    let cfg = &run.cfg;
    let probe = NoiseProbe::new(&spec, cfg.probe_batch, cfg.probe_seed);
    let start = Instant::now();
    let train = db.prepare(&db.by_role(TaskRole::MetaTrain), &probe)?;
    let val = db.prepare(&db.by_role(TaskRole::MetaVal), &probe)?;
    let test = db.prepare(&db.by_role(TaskRole::MetaTest), &probe)?;
    let prepare_seconds = start.elapsed().as_secs_f64();
    let init = PredictorState::new(PredictorDims::for_spec(&spec, cfg.embed, cfg.hidden), &cfg.predictor());
    let (state, log) = meta_train(&init, &train, &val, &cfg.schedule())?;
    let rows = src_rows(&state, &test, cfg.n_eval)?;
    let ck = PredictorCheckpoint { state, spec, probe_seed: cfg.probe_seed, probe_batch: cfg.probe_batch };
    ck.save(&run.out.join("predictor.dnp"))?;
    run.outputs.push("predictor.dnp".into());
    run.time("prepare_seconds", prepare_seconds);
    run.time("meta_train_seconds", log.seconds);
    println!("best meta-validation SRC at iteration {}", log.best_iteration);
    print_table(&rows);
    Ok(json!({
        "best_iteration": log.best_iteration,
        "val_src": log.val_src,
        "losses": log.losses,
        "test": rows,
        "mean_test_src_guided": mean(rows.iter().map(|r| r.src_guided)),
        "mean_test_src_plain": mean(rows.iter().map(|r| r.src_plain)),
    }))
}

fn adapt(run: &mut Run, predictor: &Path, teacher: &TeacherArgs) -> Result<Value, CliError> {
    let ck = load_predictor(run, predictor)?;
    let t = resolve_teacher(run, teacher, false)?;
    let state = adapted(&ck, &t)?;
    let shift = state.phi.iter().zip(&ck.state.phi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let out = PredictorCheckpoint { state, ..ck };
    out.save(&run.out.join("predictor.dnp"))?;
    run.outputs.push("predictor.dnp".into());
    println!("adapted to {} (teacher accuracy {:.4})", t.id, t.accuracy);
    Ok(json!({ "teacher": t.id, "teacher_accuracy": t.accuracy, "parameter_shift": shift }))
}

fn predict_archs(run: &mut Run, predictor: &Path, teacher: &TeacherArgs, archs: &[String]) -> Result<Value, CliError> {
    let ck = load_predictor(run, predictor)?;
    let t = resolve_teacher(run, teacher, false)?;
    let state = adapted(&ck, &t)?;
    let probe = ck.probe();
    let mut scores = Vec::new();
    for a in archs {
        let c: ArchConfig = a.parse()?;
        c.validate(&ck.spec)?;
        let score = predict(&state, &c, &t.net, &probe)?;
        println!("{score:>10.6}  {c}");
        scores.push(json!({ "config": c, "score": score, "cost": cost_json(&ck.spec, &c) }));
    }
    Ok(json!({ "teacher": t.id, "teacher_accuracy": t.accuracy, "scores": scores }))
}

fn search_json(run: &mut Run, res: &SearchResult, teacher: &Teacher) -> Result<Value, CliError> {
    run.time("scoring_seconds", res.scoring_seconds);
    run.time("seconds_per_architecture", res.seconds_per_architecture);
    let mut v = serde_json::to_value(res)?;
    let obj = v.as_object_mut().expect("search result is an object");
    obj.remove("scoring_seconds");
    obj.remove("seconds_per_architecture");
    obj.insert("teacher".into(), json!(teacher.id));
    obj.insert("top".into(), serde_json::to_value(res.top())?);
    let top = res.top();
    println!("top-1 of {} ({} within budget): {} score {:.6}", res.sampled, res.ranked.len(), top.config, top.score);
    Ok(v)
}

fn run_search(run: &mut Run, method: &str, predictor: Option<&Path>, teacher: &TeacherArgs) -> Result<Value, CliError> {
    let (n, budget, seed) = (run.cfg.n_candidates, run.cfg.budget(), run.cfg.seed);
    if method == "danas" {
        let path = predictor.ok_or_else(|| CliError::Usage("--method danas needs --predictor FILE".into()))?;
        let ck = load_predictor(run, path)?;
        let t = resolve_teacher(run, teacher, false)?;
        let probe = ck.probe();
        let scorer = PredictorScorer::new(adapted(&ck, &t)?, &t.net, &probe)?;
        let res = search(&scorer, method, &ck.spec, n, budget, seed)?;
        return search_json(run, &res, &t);
    }
    let m: ZeroCostMethod = method.parse()?;
    let t = resolve_teacher(run, teacher, true)?;
    let data = &t.data.as_ref().expect("data was required").train;
    let mut r = rng::seeded(rng::derive_seed(seed, "zero-cost-batch"));
    let idx = data.batches(run.cfg.zero_cost_batch, &mut r).swap_remove(0);
    let (x, y) = data.select(&idx);
    let spec = t.net.spec.clone();
    let score = |c: &ArchConfig| zero_cost_score(m, &spec, c, data.num_classes, &x, &y, seed);
    let res = search(&score, method, &spec, n, budget, seed)?;
    search_json(run, &res, &t)
}

fn run_distill(run: &mut Run, teacher: &TeacherArgs, arch: &str) -> Result<Value, CliError> {
    let t = resolve_teacher(run, teacher, true)?;
    let c: ArchConfig = arch.parse()?;
    c.validate(&t.net.spec)?;
    let data = t.data.as_ref().expect("data was required");
    let start = Instant::now();
    let outcome = distill(&t.net, &c, &data.train, &data.val, &run.cfg.kd)?;
    run.time("distill_seconds", start.elapsed().as_secs_f64());
    save_network(&outcome.net, &run.out.join("student.dnt"))?;
    run.outputs.push("student.dnt".into());
    println!("{c}: best validation accuracy {:.4} (teacher {:.4})", outcome.best_val_acc, t.accuracy);
    Ok(json!({
        "teacher": t.id,
        "teacher_accuracy": t.accuracy,
        "config": c,
        "cost": cost_json(&t.net.spec, &c),
        "best_val_acc": outcome.best_val_acc,
        "history": outcome.history,
    }))
}

fn print_table(rows: &[SrcRow]) {
    if rows.is_empty() {
        return;
    }
    println!("{:<12} {:>6} {:>10} {:>10}", "task", "n", "guided", "plain");
    for r in rows {
        println!("{:<12} {:>6} {:>10.4} {:>10.4}", r.task, r.n_eval, r.src_guided, r.src_plain);
    }
    if let (Some(g), Some(p)) = (mean(rows.iter().map(|r| r.src_guided)), mean(rows.iter().map(|r| r.src_plain))) {
        println!("{:<12} {:>6} {:>10.4} {:>10.4}", "mean", "", g, p);
    }
}

fn run_eval(run: &mut Run, predictor: &Path, db_path: &Path, role: &str) -> Result<Value, CliError> {
    let ck = load_predictor(run, predictor)?;
    run.input("db", db_path)?;
    let db = load_db(db_path)?;
    if db.header.spec != ck.spec {
        return Err(CliError::Input(format!("database space `{}` differs from predictor space `{}`", db.header.spec, ck.spec)));
    }
    let role: TaskRole = serde_json::from_value(json!(role))?;
    let records = db.by_role(role);
    if records.is_empty() {
        return Err(CliError::Input(format!("{} has no {role:?} tasks", db_path.display())));
    }
    let tasks = db.prepare(&records, &ck.probe())?;
    let rows = src_rows(&ck.state, &tasks, run.cfg.n_eval)?;
    print_table(&rows);
    Ok(json!({
        "role": role,
        "tasks": rows,
        "mean_src_guided": mean(rows.iter().map(|r| r.src_guided)),
        "mean_src_plain": mean(rows.iter().map(|r| r.src_plain)),
    }))
}
