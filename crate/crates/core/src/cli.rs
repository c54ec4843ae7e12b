//! `ovor` command line: data generation, training, evaluation, reports, sweeps
//! and outlier dumps. Exit status is 0 on success, 1 for invalid input and 2
//! for failures at run time.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::data::{
    config_from_value, config_keys, get_path, load_stream, resolve_value, set_path, write_embeddings, Dtype,
    EmbeddingFile,
};
use crate::encoder::{FrozenBackbone, PrefixPrompt};
use crate::error::{Error, Result};
use crate::harness::{
    aggregate, build_backbone, run_stream, DataSource, Encoder, EncoderMode, Learner, RunConfig, RunManifest,
    TaskStream,
};
use crate::head::TaskHead;
use crate::kernel::Tensor;

#[derive(Debug, Parser)]
#[command(
    name = "ovor",
    version,
    about = "Rehearsal-free class-incremental learning with virtual outlier regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One seed, an inclusive range `a..b`, or a comma list. Overrides `seeds`.
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `precision`.
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic stream as train/test embedding files.
    GenSynthetic(Shared),
    /// Train on every task for each seed; writes manifests, score CSVs, checkpoints and an aggregate.
    Train(Shared),
    /// Evaluate a checkpoint on the configured stream.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize the manifests of a train output directory.
    Report {
        #[command(flatten)]
        shared: Shared,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// One training run per value (and seed) of one hyperparameter.
    Sweep {
        #[command(flatten)]
        shared: Shared,
        /// Axis name (lambda, reg_fraction, loss_shape, tau_current, tau_outlier,
        /// sigma, alpha, beta, k, prompt_lengths) or any dotted config path.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis' standard grid.
        #[arg(long)]
        values: Option<String>,
    },
    /// Train and write each task's features followed by its virtual outliers.
    DumpOutliers(Shared),
}

/// Config paths and standard grids of the named sweep axes.
pub fn sweep_axis(name: &str) -> Option<(&'static str, Vec<Value>)> {
    use serde_json::json;
    let nums = |v: &[f64]| v.iter().map(|x| json!(x)).collect::<Vec<_>>();
    Some(match name {
        "lambda" => ("vor.lambda", nums(&[0.05, 0.1, 0.5, 1.0])),
        "reg_fraction" => ("reg_fraction", nums(&[0.1, 0.2, 0.3])),
        "loss_shape" | "shape" => ("vor.shape", vec![json!("huber"), json!("mse")]),
        "tau_current" => ("vor.tau_current", nums(&[-21.0, -24.0, -27.0])),
        "tau_outlier" => ("vor.tau_outlier", nums(&[0.0, -3.0, -6.0])),
        "sigma" => ("npos.sigma", nums(&[0.1, 0.5, 1.0, 2.0])),
        "alpha" => ("npos.alpha", nums(&[5.0, 7.5, 10.0, 12.5, 15.0])),
        "beta" => ("npos.beta", nums(&[100.0, 120.0, 140.0, 160.0, 180.0, 200.0])),
        "k" => ("npos.k", vec![json!(50), json!(100), json!(150)]),
        "prompt_lengths" => ("encoder.prompt_lengths", Vec::new()),
        _ => return None,
    })
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::config("--seed", format!("cannot parse {text:?}; use N, A..B or A,B,C"));
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn user_document(shared: &Shared) -> Result<Value> {
    let mut doc = match &shared.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => Value::Object(Default::default()),
    };
    if let Some(s) = &shared.seed {
        set_path(&mut doc, "seeds", serde_json::to_value(parse_seeds(s)?)?)?;
    }
    if let Some(p) = &shared.precision {
        set_path(&mut doc, "precision", Value::String(p.clone()))?;
    }
    Ok(doc)
}

fn load_config(shared: &Shared) -> Result<RunConfig> {
    config_from_value(resolve_value(&user_document(shared)?)?)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn json_text<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Streams for every seed, loaded before any output is written.
fn load_streams(cfg: &RunConfig) -> Result<Vec<(u64, TaskStream)>> {
    let streams = cfg
        .seeds
        .iter()
        .map(|&s| load_stream(cfg, s).map(|st| (s, st)))
        .collect::<Result<Vec<_>>>()?;
    if cfg.reg_epochs() > 0 {
        for (_, st) in &streams {
            for t in &st.tasks {
                cfg.npos
                    .check_samples(t.train.len(), t.classes)
                    .map_err(|e| Error::config("npos", format!("task {}: {e}", t.id)))?;
            }
        }
    }
    if cfg.mode == EncoderMode::Prompted {
        for (_, st) in &streams {
            let w = st.tasks[0].train.inputs.cols();
            if w != cfg.encoder.input_dim {
                return Err(Error::config(
                    "encoder.input_dim",
                    format!("is {}, but the data has width {w}", cfg.encoder.input_dim),
                ));
            }
        }
    }
    Ok(streams)
}

fn stream_files(stream: &TaskStream) -> Result<(EmbeddingFile, EmbeddingFile)> {
    let classes = stream.total_classes();
    let join = |test: bool| -> Result<EmbeddingFile> {
        let parts: Vec<&Tensor> = stream
            .tasks
            .iter()
            .map(|t| if test { &t.test.inputs } else { &t.train.inputs })
            .collect();
        let labels = stream
            .tasks
            .iter()
            .flat_map(|t| {
                if test {
                    t.test.labels.clone()
                } else {
                    t.train.labels.clone()
                }
            })
            .collect();
        EmbeddingFile::new(Tensor::vstack(&parts)?, labels, classes, Dtype::F64)
    };
    Ok((join(false)?, join(true)?))
}

fn gen_synthetic(shared: &Shared) -> Result<()> {
    let cfg = load_config(shared)?;
    if !matches!(cfg.data, DataSource::Synthetic(_)) {
        return Err(Error::config(
            "data.kind",
            "gen-synthetic needs a synthetic data source",
        ));
    }
    let streams = load_streams(&cfg)?;
    create_dir(&shared.out)?;
    for (seed, stream) in &streams {
        let (train, test) = stream_files(stream)?;
        write_embeddings(&shared.out.join(format!("train-seed{seed}.cile")), &train)?;
        write_embeddings(&shared.out.join(format!("test-seed{seed}.cile")), &test)?;
    }
    Ok(())
}

/// Runs every seed of a config; returns the manifests in seed order.
pub fn train_all(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<RunManifest>> {
    let streams = load_streams(cfg)?;
    let backbone = build_backbone(cfg)?;
    if let Some(o) = out {
        create_dir(o)?;
    }
    let mut manifests = Vec::new();
    for (seed, stream) in &streams {
        let run = run_stream(cfg, stream, *seed, backbone.clone())?;
        if let Some(o) = out {
            let dir = o.join(format!("seed-{seed}"));
            create_dir(&dir)?;
            write_text(&dir.join("manifest.json"), &json_text(&run.manifest))?;
            write_text(&dir.join("timings.json"), &json_text(&run.timings))?;
            write_text(&dir.join("scores.csv"), &run.manifest.score_matrix.to_csv())?;
            write_checkpoint(&dir.join("checkpoint.cilf"), &run.learner.named_tensors())?;
        }
        manifests.push(run.manifest);
    }
    if let Some(o) = out {
        write_text(&o.join("aggregate.json"), &json_text(&aggregate(&manifests)?))?;
    }
    Ok(manifests)
}

fn learner_from_checkpoint(cfg: &RunConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Learner> {
    let missing = |n: &str| Error::Format(format!("checkpoint lacks tensor {n}"));
    let encoder = match cfg.mode {
        EncoderMode::Identity => Encoder::Identity,
        EncoderMode::Prompted => {
            let backbone = FrozenBackbone::from_named(&cfg.encoder, tensors)?;
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for i in 0..cfg.encoder.num_layers {
                for (dst, kind) in [(&mut keys, "key"), (&mut values, "value")] {
                    let n = format!("prompt.layer{i}.{kind}");
                    dst.push(tensors.get(&n).ok_or_else(|| missing(&n))?.clone());
                }
            }
            let prompt = PrefixPrompt::from_tensors(keys, values)?;
            if !prompt.matches(&cfg.encoder) {
                return Err(Error::Format(
                    "checkpoint prompt does not match the encoder config".into(),
                ));
            }
            Encoder::Prompted {
                backbone: Arc::new(backbone),
                prompt,
            }
        }
    };
    let mut heads = Vec::new();
    for t in 0.. {
        let (w, b) = (format!("head.task{t}.weight"), format!("head.task{t}.bias"));
        match (tensors.get(&w), tensors.get(&b)) {
            (Some(w), Some(b)) => heads.push(TaskHead::from_parts(t, w.clone(), b.clone())?),
            _ => break,
        }
    }
    if heads.is_empty() {
        return Err(missing("head.task0.weight"));
    }
    Learner::from_parts(cfg, encoder, heads)
}

#[derive(Serialize)]
struct EvalReport {
    seed: u64,
    tasks: usize,
    accuracy: Vec<f64>,
    average_accuracy: f64,
    task_given: Vec<f64>,
    confusion: Vec<Vec<usize>>,
    cross_task_errors: usize,
}

fn eval(shared: &Shared, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(shared)?;
    let seed = cfg.seeds[0];
    let stream = load_stream(&cfg, seed)?;
    let tensors = read_checkpoint(checkpoint)?;
    let learner = learner_from_checkpoint(&cfg, &tensors)?;
    let upto = learner.tasks_trained().min(stream.len());
    let ev = learner.evaluate(&stream.tasks[..upto])?;
    let report = EvalReport {
        seed,
        tasks: upto,
        average_accuracy: ev.accuracy.iter().sum::<f64>() / upto as f64,
        cross_task_errors: ev.cross_task_errors(),
        accuracy: ev.accuracy,
        task_given: ev.task_given,
        confusion: ev.confusion,
    };
    create_dir(&shared.out)?;
    write_text(&shared.out.join("eval.json"), &json_text(&report))
}

fn report(shared: &Shared, run: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let entries = fs::read_dir(run).map_err(|e| Error::io(run, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let p = d.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let v: Value = serde_json::from_str(&text)?;
        let seed = v["seed"].as_u64().unwrap_or_default();
        let acc = v["average_accuracy"]
            .as_array()
            .and_then(|a| a.last())
            .and_then(Value::as_f64);
        let fgt = v["average_forgetting"]
            .as_array()
            .and_then(|a| a.last())
            .and_then(Value::as_f64);
        let cross = v["cross_task_errors"]
            .as_array()
            .and_then(|a| a.last())
            .and_then(Value::as_u64);
        rows.push((seed, acc, fgt, cross));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no manifests under {}", run.display())));
    }
    rows.sort_by_key(|r| r.0);
    let cell = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:?}"));
    let mut csv = String::from("seed,A_T,F_T,cross_task_errors\n");
    for (s, a, f, c) in &rows {
        csv.push_str(&format!(
            "{s},{},{},{}\n",
            cell(*a),
            cell(*f),
            c.map_or(String::new(), |c| c.to_string())
        ));
    }
    create_dir(&shared.out)?;
    write_text(&shared.out.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<Value>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            _ => {}
        }
        if ch == ',' && depth == 0 {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(ch);
        }
    }
    out.push(cur);
    let vals: Vec<Value> = out
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_str(&s).unwrap_or(Value::String(s)))
        .collect();
    Ok(vals)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: String,
    pub path: String,
    pub values: Vec<Value>,
    /// `accuracy[v][s]`: final average accuracy of value `v`, seed `s`.
    pub accuracy: Vec<Vec<f64>>,
    pub forgetting: Vec<Vec<Option<f64>>>,
    pub runs: usize,
}

impl SweepResult {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_accuracy(&self) -> Vec<f64> {
        self.accuracy.iter().map(|a| Self::mean(a)).collect()
    }

    /// Header row of the axis and its values, then one row per statistic.
    pub fn to_csv(&self) -> String {
        let show = |v: &Value| match v {
            Value::String(s) => s.clone(),
            Value::Array(_) => format!("\"{v}\""),
            other => other.to_string(),
        };
        let mut out = self.axis.clone();
        for v in &self.values {
            out.push(',');
            out.push_str(&show(v));
        }
        out.push_str("\nA_T");
        for a in self.mean_accuracy() {
            out.push_str(&format!(",{a:?}"));
        }
        out.push_str("\nF_T");
        for f in &self.forgetting {
            let f: Vec<f64> = f.iter().filter_map(|x| *x).collect();
            out.push(',');
            if !f.is_empty() {
                out.push_str(&format!("{:?}", Self::mean(&f)));
            }
        }
        out.push('\n');
        out
    }
}

/// One configuration per value of `axis`, each trained over every seed.
pub fn run_sweep(base: &Value, axis: &str, values: Option<Vec<Value>>) -> Result<SweepResult> {
    let resolved = resolve_value(base)?;
    let (path, grid) = match sweep_axis(axis) {
        Some((p, g)) => (p.to_string(), g),
        None if get_path(&resolved, axis).is_some() => (axis.to_string(), Vec::new()),
        None => return Err(Error::config("--axis", format!("unknown sweep axis {axis:?}"))),
    };
    let values = values.unwrap_or(grid);
    if values.is_empty() {
        return Err(Error::config("--values", format!("no values to sweep for {axis}")));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut doc = resolved.clone();
            set_path(&mut doc, &path, v.clone())?;
            config_from_value(doc)
        })
        .collect::<Result<Vec<_>>>()?;
    for cfg in &configs {
        load_streams(cfg)?;
    }
    let mut accuracy = Vec::new();
    let mut forgetting = Vec::new();
    let mut runs = 0;
    for cfg in &configs {
        let ms = train_all(cfg, None)?;
        runs += ms.len();
        accuracy.push(ms.iter().map(RunManifest::final_accuracy).collect());
        forgetting.push(ms.iter().map(RunManifest::final_forgetting).collect());
    }
    Ok(SweepResult {
        axis: axis.to_string(),
        path,
        values,
        accuracy,
        forgetting,
        runs,
    })
}

fn sweep(shared: &Shared, axis: &str, values: Option<&str>) -> Result<()> {
    let values = values.map(parse_values).transpose()?;
    let result = run_sweep(&user_document(shared)?, axis, values)?;
    create_dir(&shared.out)?;
    write_text(&shared.out.join("sweep.csv"), &result.to_csv())?;
    write_text(&shared.out.join("sweep.json"), &json_text(&result))?;
    print!("{}", result.to_csv());
    Ok(())
}

fn dump_outliers(shared: &Shared) -> Result<()> {
    let cfg = load_config(shared)?;
    if cfg.reg_epochs() == 0 {
        return Err(Error::config(
            "reg_fraction",
            "no outliers are synthesized when the regularized phase is empty",
        ));
    }
    let seed = cfg.seeds[0];
    let streams = load_streams(&RunConfig {
        seeds: vec![seed],
        ..cfg.clone()
    })?;
    let stream = &streams[0].1;
    let mut learner = Learner::new(&cfg, build_backbone(&cfg)?, seed)?;
    let mut files = Vec::new();
    for task in &stream.tasks {
        learner.train_task(task)?;
        let out = learner
            .last_outliers()
            .ok_or_else(|| Error::InvalidArgument(format!("task {} produced no outliers", task.id)))?;
        let z = learner.features(&task.train.inputs)?;
        let outlier_label = stream.total_classes();
        let mut labels = task.train.labels.clone();
        labels.extend(std::iter::repeat_n(outlier_label, out.len()));
        let feats = Tensor::vstack(&[&z, &out.points])?;
        files.push((
            task.id,
            EmbeddingFile::new(feats, labels, outlier_label + 1, Dtype::F64)?,
        ));
    }
    create_dir(&shared.out)?;
    for (t, f) in files {
        write_embeddings(&shared.out.join(format!("outliers-task{t}.cile")), &f)?;
    }
    Ok(())
}

fn key_listing() -> String {
    let mut s = String::from("Configuration keys (defaults):\n");
    for (k, v) in config_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nPresets (\"preset\": name or list): ");
    s.push_str(&crate::data::PRESETS.join(", "));
    s.push('\n');
    s
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(key_listing()).after_help(key_listing())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(s) => gen_synthetic(s),
        Command::Train(s) => {
            let cfg = load_config(s)?;
            train_all(&cfg, Some(&s.out)).map(|_| ())
        }
        Command::Eval { shared, checkpoint } => eval(shared, checkpoint),
        Command::Report { shared, run } => report(shared, run),
        Command::Sweep { shared, axis, values } => sweep(shared, axis, values.as_deref()),
        Command::DumpOutliers(s) => dump_outliers(s),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
