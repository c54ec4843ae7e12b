use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::config::{EncoderMode, RunConfig};
use super::drift::{drift_table, representation_drift, RepresentationDrift};
use super::learner::{Learner, TaskReport};
use super::metrics::{average_accuracy, average_forgetting, ScoreMatrix};
use super::stream::TaskStream;
use crate::encoder::{prompt_drift, FrozenBackbone};
use crate::error::{Error, Result};
use crate::kernel::Rng;

/// The frozen backbone a config describes; `None` in identity mode.
pub fn build_backbone(config: &RunConfig) -> Result<Option<Arc<FrozenBackbone>>> {
    match config.mode {
        EncoderMode::Identity => Ok(None),
        EncoderMode::Prompted => {
            let mut rng = Rng::new(config.backbone_seed).split("backbone");
            Ok(Some(Arc::new(FrozenBackbone::random(&config.encoder, &mut rng)?)))
        }
    }
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

/// Everything a run produces that is a pure function of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub tasks: usize,
    pub score_matrix: ScoreMatrix,
    /// `task_given[t][i]`: accuracy on task `i` restricted to head `i`, after task `t`.
    pub task_given: Vec<Vec<f64>>,
    pub average_accuracy: Vec<f64>,
    /// Entry `t` is `F_{t+1}`; absent for the first task.
    pub average_forgetting: Vec<Option<f64>>,
    /// Final task-given accuracy minus the one right after training, per task but the last.
    pub task_given_drift: Vec<f64>,
    /// Cosine similarity of prompt snapshots after consecutive tasks.
    pub prompt_cosine: Vec<f64>,
    /// Test features of each task right after it versus after the last task.
    pub representation_drift: Vec<RepresentationDrift>,
    /// `confusion[t][i][j]` after task `t`.
    pub confusion: Vec<Vec<Vec<usize>>>,
    pub cross_task_errors: Vec<usize>,
    pub reports: Vec<TaskReport>,
    pub backbone_checksum: Option<String>,
    pub prompt_checksums: Vec<String>,
    pub head_checksums: Vec<String>,
    pub outlier_checksums: Vec<Option<String>>,
}

impl RunManifest {
    pub fn final_accuracy(&self) -> f64 {
        *self.average_accuracy.last().expect("at least one task")
    }

    pub fn final_forgetting(&self) -> Option<f64> {
        self.average_forgetting.last().copied().flatten()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Wall-clock durations, kept apart from the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub seed: u64,
    pub train_seconds: Vec<f64>,
    pub eval_seconds: Vec<f64>,
}

pub struct RunOutput {
    pub manifest: RunManifest,
    pub timings: Timings,
    pub learner: Learner,
}

/// Trains every task in order, evaluating after each, and audits that the
/// backbone and all frozen heads stay bit-identical.
pub fn run_stream(
    config: &RunConfig,
    stream: &TaskStream,
    seed: u64,
    backbone: Option<Arc<FrozenBackbone>>,
) -> Result<RunOutput> {
    run_with(config, stream, seed, backbone, |_, _| {})
}

/// As [`run_stream`], calling `between(t, stream)` after task `t` is trained
/// and evaluated and before task `t + 1` starts.
pub fn run_with(
    config: &RunConfig,
    stream: &TaskStream,
    seed: u64,
    backbone: Option<Arc<FrozenBackbone>>,
    mut between: impl FnMut(usize, &mut TaskStream),
) -> Result<RunOutput> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::InvalidArgument("empty task stream".into()));
    }
    let mut stream = stream.clone();
    let backbone_sum = backbone.as_ref().map(|b| b.checksum());
    let mut learner = Learner::new(config, backbone, seed)?;

    let mut scores = ScoreMatrix::new();
    let mut task_given = Vec::new();
    let mut confusion = Vec::new();
    let mut cross = Vec::new();
    let mut reports = Vec::new();
    let mut own_features = Vec::new();
    let mut frozen_heads: Vec<u64> = Vec::new();
    let mut outlier_sums = Vec::new();
    let mut timings = Timings {
        seed,
        train_seconds: Vec::new(),
        eval_seconds: Vec::new(),
    };
    let mut last_eval = None;

    for t in 0..stream.len() {
        let start = Instant::now();
        reports.push(learner.train_task(&stream.tasks[t])?);
        timings.train_seconds.push(start.elapsed().as_secs_f64());
        outlier_sums.push(learner.last_outliers().map(|o| hex(o.points.checksum())));

        for (i, &sum) in frozen_heads.iter().enumerate() {
            if learner.heads().head(i)?.checksum() != sum {
                return Err(Error::InvalidArgument(format!(
                    "head {i} changed while training task {t}"
                )));
            }
        }
        frozen_heads.push(learner.heads().head(t)?.checksum());
        if learner.encoder().backbone().map(|b| b.checksum()) != backbone_sum {
            return Err(Error::InvalidArgument("backbone changed during training".into()));
        }

        let start = Instant::now();
        let eval = learner.evaluate(&stream.tasks[..=t])?;
        timings.eval_seconds.push(start.elapsed().as_secs_f64());
        scores.push_row(eval.accuracy.clone())?;
        task_given.push(eval.task_given.clone());
        confusion.push(eval.confusion.clone());
        cross.push(eval.cross_task_errors());
        own_features.push(eval.features[t].clone());
        last_eval = Some(eval);

        between(t, &mut stream);
    }

    let tasks = stream.len();
    let average_accuracy = (1..=tasks)
        .map(|t| average_accuracy(&scores, t))
        .collect::<Result<Vec<_>>>()?;
    let average_forgetting = (1..=tasks)
        .map(|t| {
            if t < 2 {
                Ok(None)
            } else {
                average_forgetting(&scores, t).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let snapshots = learner.prompt_snapshots();
    let prompt_cosine = snapshots
        .windows(2)
        .map(|w| prompt_drift(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let last = last_eval.expect("at least one task");
    let representation_drift = (0..tasks.saturating_sub(1))
        .map(|i| representation_drift(&own_features[i], &last.features[i]))
        .collect::<Result<Vec<_>>>()?;

    let manifest = RunManifest {
        seed,
        config: config.clone(),
        tasks,
        task_given_drift: drift_table(&task_given)?,
        score_matrix: scores,
        task_given,
        average_accuracy,
        average_forgetting,
        prompt_cosine,
        representation_drift,
        confusion,
        cross_task_errors: cross,
        reports,
        backbone_checksum: backbone_sum.map(hex),
        prompt_checksums: snapshots.iter().map(|p| hex(p.checksum())).collect(),
        head_checksums: frozen_heads.into_iter().map(hex).collect(),
        outlier_checksums: outlier_sums,
    };
    Ok(RunOutput {
        manifest,
        timings,
        learner,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub final_accuracy: MeanStd,
    pub final_forgetting: Option<MeanStd>,
    pub cross_task_errors: MeanStd,
}

pub fn aggregate(manifests: &[RunManifest]) -> Result<Aggregate> {
    if manifests.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let acc: Vec<f64> = manifests.iter().map(RunManifest::final_accuracy).collect();
    let fgt: Vec<f64> = manifests.iter().filter_map(RunManifest::final_forgetting).collect();
    let cross: Vec<f64> = manifests
        .iter()
        .map(|m| *m.cross_task_errors.last().expect("at least one task") as f64)
        .collect();
    Ok(Aggregate {
        seeds: manifests.iter().map(|m| m.seed).collect(),
        final_accuracy: MeanStd::of(&acc).expect("non-empty"),
        final_forgetting: MeanStd::of(&fgt),
        cross_task_errors: MeanStd::of(&cross).expect("non-empty"),
    })
}
