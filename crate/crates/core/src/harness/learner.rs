use std::sync::Arc;

use serde::Serialize;

use super::config::{EncoderMode, RunConfig};
use super::stream::Task;
use crate::encoder::{encode, encode_backward, encode_cached, FrozenBackbone, PrefixPrompt};
use crate::error::{Error, Result};
use crate::head::{cross_entropy, head_logits, TaskHead, TaskHeadBank};
use crate::kernel::{AdamState, Precision, Rng, Tensor};
use crate::npos::{synthesize, OutlierBatch};
use crate::regularizer::{combined_loss, vor_loss};

#[derive(Debug, Clone)]
pub enum Encoder {
    Identity,
    Prompted {
        backbone: Arc<FrozenBackbone>,
        prompt: PrefixPrompt,
    },
}

impl Encoder {
    pub fn features(&self, inputs: &Tensor, precision: Precision) -> Result<Tensor> {
        let mut z = match self {
            Encoder::Identity => {
                if inputs.shape().len() != 2 {
                    return Err(Error::shape("identity encoder", format!("inputs {:?}", inputs.shape())));
                }
                inputs.clone()
            }
            Encoder::Prompted { backbone, prompt } => encode(backbone, prompt, inputs)?.features,
        };
        z.round_to(precision);
        Ok(z)
    }

    pub fn prompt(&self) -> Option<&PrefixPrompt> {
        match self {
            Encoder::Identity => None,
            Encoder::Prompted { prompt, .. } => Some(prompt),
        }
    }

    pub fn backbone(&self) -> Option<&FrozenBackbone> {
        match self {
            Encoder::Identity => None,
            Encoder::Prompted { backbone, .. } => Some(backbone),
        }
    }
}

/// Training statistics of one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: usize,
    pub prompt_steps: u64,
    pub head_only_steps: u64,
    /// Mean loss over the last epoch of each phase.
    pub final_ce: f64,
    pub final_combined: Option<f64>,
    pub outliers: usize,
}

/// Results of evaluating tasks `0..=t` after training task `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Accuracy of the global argmax over all trained heads, per task.
    pub accuracy: Vec<f64>,
    /// Accuracy when restricted to the task's own head.
    pub task_given: Vec<f64>,
    /// `confusion[i][j]`: test samples of task `i` predicted into classes of task `j`.
    pub confusion: Vec<Vec<usize>>,
    /// Test features of every evaluated task.
    pub features: Vec<Tensor>,
}

impl Evaluation {
    /// Test samples assigned to a class of a different task.
    pub fn cross_task_errors(&self) -> usize {
        let mut n = 0;
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    n += c;
                }
            }
        }
        n
    }
}

/// Incremental learner state: encoder, every head so far, and the run's random streams.
///
/// Training only ever receives the current [`Task`]; nothing from earlier
/// training splits is retained.
#[derive(Debug, Clone)]
pub struct Learner {
    config: RunConfig,
    encoder: Encoder,
    heads: TaskHeadBank,
    rng: Rng,
    prompt_snapshots: Vec<PrefixPrompt>,
    outliers: Option<OutlierBatch>,
}

impl Learner {
    /// `backbone` is required in prompted mode and ignored otherwise.
    pub fn new(config: &RunConfig, backbone: Option<Arc<FrozenBackbone>>, seed: u64) -> Result<Self> {
        let rng = Rng::new(seed).split("run");
        let encoder = match config.mode {
            EncoderMode::Identity => Encoder::Identity,
            EncoderMode::Prompted => {
                let backbone =
                    backbone.ok_or_else(|| Error::InvalidArgument("prompted mode needs a backbone".into()))?;
                if backbone.config() != &config.encoder {
                    return Err(Error::InvalidArgument(
                        "backbone does not match the encoder config".into(),
                    ));
                }
                let mut prompt = PrefixPrompt::init(&config.encoder, &mut rng.split("prompt"));
                for t in prompt.tensors_mut() {
                    t.round_to(config.precision);
                }
                Encoder::Prompted { backbone, prompt }
            }
        };
        Ok(Learner {
            config: config.clone(),
            encoder,
            heads: TaskHeadBank::new(),
            rng,
            prompt_snapshots: Vec::new(),
            outliers: None,
        })
    }

    /// Rebuilds a learner from stored parts, for evaluation.
    pub fn from_parts(config: &RunConfig, encoder: Encoder, heads: Vec<TaskHead>) -> Result<Self> {
        let mut bank = TaskHeadBank::new();
        for (t, h) in heads.into_iter().enumerate() {
            bank.push(h)?;
            bank.freeze(t)?;
        }
        Ok(Learner {
            config: config.clone(),
            encoder,
            heads: bank,
            rng: Rng::new(0).split("run"),
            prompt_snapshots: Vec::new(),
            outliers: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &TaskHeadBank {
        &self.heads
    }

    pub fn tasks_trained(&self) -> usize {
        self.heads.len()
    }

    /// Prompt right after each trained task.
    pub fn prompt_snapshots(&self) -> &[PrefixPrompt] {
        &self.prompt_snapshots
    }

    /// Virtual outliers of the most recent task, if any were synthesized.
    pub fn last_outliers(&self) -> Option<&OutlierBatch> {
        self.outliers.as_ref()
    }

    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        self.encoder.features(inputs, self.config.precision)
    }

    /// Named tensors of backbone, prompt and heads, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Encoder::Prompted { backbone, prompt } = &self.encoder {
            out.extend(backbone.named_tensors());
            out.extend(prompt.named_tensors());
        }
        for h in self.heads.heads() {
            out.push((format!("head.task{}.weight", h.task), h.weight.clone()));
            out.push((format!("head.task{}.bias", h.task), h.bias.clone()));
        }
        out
    }

    fn batches(&self, n: usize, shuffle: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle.shuffle(&mut order);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Trains prompt and head `t` on task `t`, then (when enabled) synthesizes
    /// virtual outliers and trains the head alone under the combined loss.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskReport> {
        let t = self.heads.len();
        if task.id != t {
            return Err(Error::InvalidArgument(format!(
                "expected task {t}, got task {}",
                task.id
            )));
        }
        let cfg = self.config.clone();
        let labels = task.local_labels(&task.train)?;
        let n = task.train.len();
        let reg_epochs = cfg.reg_epochs().min(cfg.epochs);
        let ce_epochs = cfg.epochs - reg_epochs;
        if reg_epochs > 0 {
            cfg.npos.check_samples(n, task.classes)?;
        }

        let mut inputs = task.train.inputs.clone();
        inputs.round_to(cfg.precision);
        let dim = match &self.encoder {
            Encoder::Identity => inputs.cols(),
            Encoder::Prompted { backbone, .. } => backbone.config().model_dim,
        };
        let mut head = TaskHead::new(
            t,
            task.classes,
            dim,
            cfg.head.init_std,
            &mut self.rng.split(&format!("head/task{t}")),
        );
        head.weight.round_to(cfg.precision);

        let per_epoch = n.div_ceil(cfg.batch_size) as u64;
        let total = per_epoch * cfg.epochs as u64;
        let head_shapes: Vec<Vec<usize>> = if cfg.head.bias {
            vec![head.weight.shape().to_vec(), head.bias.shape().to_vec()]
        } else {
            vec![head.weight.shape().to_vec()]
        };
        let mut head_opt = AdamState::new(cfg.optimizer, total).init(head_shapes.iter().map(Vec::as_slice));
        let mut shuffle = self.rng.split(&format!("shuffle/task{t}"));
        let precision = cfg.precision;
        let head_step = |opt: &mut AdamState, head: &mut TaskHead, gw: &Tensor, gb: &Tensor| -> Result<()> {
            if cfg.head.bias {
                opt.step(&mut [&mut head.weight, &mut head.bias], &[gw, gb])?;
            } else {
                opt.step(&mut [&mut head.weight], &[gw])?;
            }
            head.weight.round_to(precision);
            head.bias.round_to(precision);
            Ok(())
        };

        // CE on prompt and head
        let mut prompt_opt = self
            .encoder
            .prompt()
            .map(|p| AdamState::new(cfg.optimizer, total).init(p.tensors().into_iter().map(Tensor::shape)));
        let mut final_ce = f64::NAN;
        for _ in 0..ce_epochs {
            let mut epoch_loss = 0.0;
            let batches = self.batches(n, &mut shuffle);
            for idx in &batches {
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let x = inputs.select_rows(idx);
                let loss = match &mut self.encoder {
                    Encoder::Identity => {
                        let logits = head_logits(&head, &x)?;
                        let (loss, dlogits) = cross_entropy(&logits, &y)?;
                        let (g, _) = head.backward(&x, &dlogits)?;
                        head_step(&mut head_opt, &mut head, &g.weight, &g.bias)?;
                        loss
                    }
                    Encoder::Prompted { backbone, prompt } => {
                        let (fb, cache) = encode_cached(backbone, prompt, &x)?;
                        let mut z = fb.features;
                        z.round_to(precision);
                        let logits = head_logits(&head, &z)?;
                        let (loss, dlogits) = cross_entropy(&logits, &y)?;
                        let (g, dz) = head.backward(&z, &dlogits)?;
                        let pg = encode_backward(backbone, prompt, &cache, &dz)?;
                        let opt = prompt_opt.as_mut().expect("prompted mode has a prompt optimizer");
                        {
                            let grads = pg.tensors();
                            let mut params = prompt.tensors_mut();
                            opt.step(&mut params, &grads)?;
                        }
                        for p in prompt.tensors_mut() {
                            p.round_to(precision);
                        }
                        head_step(&mut head_opt, &mut head, &g.weight, &g.bias)?;
                        loss
                    }
                };
                epoch_loss += loss;
            }
            final_ce = epoch_loss / batches.len() as f64;
        }
        let prompt_steps = prompt_opt.as_ref().map_or(0, AdamState::step_count);

        // outlier synthesis on the frozen encoder, then head-only regularized training
        let mut final_combined = None;
        let mut regularized_steps = 0;
        if reg_epochs > 0 {
            let z_all = self.features(&inputs)?;
            let mut npos_rng = self.rng.split(&format!("npos/task{t}"));
            let mut out = synthesize(&z_all, &cfg.npos, task.classes, t, &mut npos_rng)?;
            out.points.round_to(precision);
            let mut draw = self.rng.split(&format!("outliers/task{t}"));
            let m = out.len();
            for _ in 0..reg_epochs {
                let mut epoch_loss = 0.0;
                let mut epoch_ce = 0.0;
                let batches = self.batches(n, &mut shuffle);
                for idx in &batches {
                    let b = idx.len();
                    let oidx: Vec<usize> = if m >= b {
                        let mut all: Vec<usize> = (0..m).collect();
                        draw.shuffle(&mut all);
                        all.truncate(b);
                        all
                    } else {
                        (0..b).map(|_| draw.below(m)).collect()
                    };
                    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let z = z_all.select_rows(idx);
                    let o = out.points.select_rows(&oidx);
                    let cur_logits = head_logits(&head, &z)?;
                    let out_logits = head_logits(&head, &o)?;
                    let (ce, dce) = cross_entropy(&cur_logits, &y)?;
                    let vor = vor_loss(&cur_logits, &out_logits, &cfg.vor)?;
                    let comb = combined_loss((ce, &dce), &vor, cfg.vor.lambda)?;
                    let (g1, _) = head.backward(&z, &comb.grad_current)?;
                    let (g2, _) = head.backward(&o, &comb.grad_outlier)?;
                    let gw = g1.weight.add(&g2.weight)?;
                    let gb = g1.bias.add(&g2.bias)?;
                    head_step(&mut head_opt, &mut head, &gw, &gb)?;
                    epoch_loss += comb.value;
                    epoch_ce += ce;
                    regularized_steps += 1;
                }
                final_combined = Some(epoch_loss / batches.len() as f64);
                final_ce = epoch_ce / batches.len() as f64;
            }
            self.outliers = Some(out);
        } else {
            self.outliers = None;
        }

        let outliers = self.outliers.as_ref().map_or(0, OutlierBatch::len);
        self.heads.push(head)?;
        self.heads.freeze(t)?;
        if let Some(p) = self.encoder.prompt() {
            self.prompt_snapshots.push(p.clone());
        }
        Ok(TaskReport {
            task: t,
            prompt_steps,
            head_only_steps: regularized_steps,
            final_ce,
            final_combined,
            outliers,
        })
    }

    /// Evaluates the given tasks on their test splits with every trained head.
    pub fn evaluate(&self, tasks: &[Task]) -> Result<Evaluation> {
        let upto = self.heads.len();
        if tasks.len() > upto || tasks.is_empty() {
            return Err(Error::MissingHead(tasks.len().saturating_sub(1)));
        }
        let mut accuracy = Vec::with_capacity(tasks.len());
        let mut task_given = Vec::with_capacity(tasks.len());
        let mut confusion = Vec::with_capacity(tasks.len());
        let mut features = Vec::with_capacity(tasks.len());
        for task in tasks {
            if task.test.is_empty() {
                return Err(Error::InvalidArgument(format!("task {} has no test split", task.id)));
            }
            let mut x = task.test.inputs.clone();
            x.round_to(self.config.precision);
            let z = self.features(&x)?;
            let pred = self.heads.predict(&z, upto)?;
            let local = task.local_labels(&task.test)?;
            let tg = self.heads.task_given_prediction(&z, task.id)?;
            let mut correct = 0usize;
            let mut correct_tg = 0usize;
            let mut row = vec![0usize; upto];
            for ((&p, &y), (&q, &ly)) in pred.iter().zip(&task.test.labels).zip(tg.iter().zip(&local)) {
                correct += usize::from(p == y);
                correct_tg += usize::from(q == ly);
                let (owner, _) = self.heads.locate(p).expect("prediction within trained classes");
                row[owner] += 1;
            }
            let n = task.test.len() as f64;
            accuracy.push(correct as f64 / n);
            task_given.push(correct_tg as f64 / n);
            confusion.push(row);
            features.push(z);
        }
        Ok(Evaluation {
            accuracy,
            task_given,
            confusion,
            features,
        })
    }
}
