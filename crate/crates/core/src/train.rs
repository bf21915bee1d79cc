//! Adam, minibatch objective, evaluation over a scene set, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::channel::{Channel, ChannelConfig, ChannelMode};
use crate::config::{RunConfig, TrainConfig};
use crate::heads::{balance_weights, task_loss, total_loss};
use crate::metrics::{Direction, TaskEvaluator};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::synth::{generate_split, Scene, Split};
use crate::tensor::Tensor;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x5348_5546_4C45;
const TRAIN_CHANNEL_STREAM: u64 = 0x5452_4149_4E00;
/// Offset for evaluation channels, disjoint from the training stream.
pub const EVAL_CHANNEL_STREAM: u64 = 0x4556_414C_0000;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.learning_rate, c.beta1, c.beta2, c.eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &[f64])]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for &(id, g) in grads {
            let k = id.0;
            if self.m.len() <= k {
                self.m.resize(k + 1, Vec::new());
                self.v.resize(k + 1, Vec::new());
            }
            if self.m[k].is_empty() {
                self.m[k] = vec![0.0; g.len()];
                self.v[k] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Training and validation scenes for a run.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Data {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let [_, h, w] = cfg.encoder.input;
        let k = cfg.scene_classes();
        Ok(Self {
            train: generate_split(cfg.seed, Split::Train, cfg.train.train_size, h, w, k)?,
            val: generate_split(cfg.seed, Split::Validation, cfg.train.val_size, h, w, k)?,
        })
    }
}

/// Weighted objective of one minibatch, built on a fresh graph.
pub struct BatchObjective {
    pub graph: Graph,
    pub total: Var,
    /// Mean loss of each task over the batch.
    pub task_losses: Vec<f64>,
}

pub fn batch_objective(
    model: &Model,
    store: &ParamStore,
    scenes: &[&Scene],
    weights: &[f64],
    channel: &mut Channel,
) -> Result<BatchObjective> {
    if scenes.is_empty() {
        return Err(Error::invalid("batch_objective", "empty batch"));
    }
    let mut g = Graph::new();
    let tasks = &model.config.tasks;
    let mut per_task: Vec<Vec<Var>> = vec![Vec::with_capacity(scenes.len()); tasks.len()];
    for s in scenes {
        let out = model.forward(&mut g, store, &s.image, channel)?;
        for (t, spec) in tasks.iter().enumerate() {
            per_task[t].push(task_loss(&mut g, spec.kind, out.outputs[t], &s.target(spec.kind))?);
        }
    }
    let inv = 1.0 / scenes.len() as f64;
    let means = per_task
        .iter()
        .map(|ls| {
            let s = g.add_all(ls)?;
            g.scale(s, inv)
        })
        .collect::<Result<Vec<_>>>()?;
    let task_losses = means.iter().map(|&m| g.value(m).item()).collect();
    let total = total_loss(&mut g, &means, weights)?;
    Ok(BatchObjective {
        graph: g,
        total,
        task_losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub task: String,
    pub loss: f64,
    pub metrics: Vec<(&'static str, f64, Direction)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub tasks: Vec<TaskEval>,
    /// `Σ w_t·L_t` with the run's weights.
    pub total_loss: f64,
}

impl EvalResult {
    pub fn mean_task_loss(&self) -> f64 {
        self.tasks.iter().map(|t| t.loss).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Task losses and metrics over `scenes`, one sample at a time.
pub fn evaluate(model: &Model, store: &ParamStore, scenes: &[Scene], weights: &[f64], channel: &mut Channel) -> Result<EvalResult> {
    let tasks = &model.config.tasks;
    let mut evals: Vec<TaskEvaluator> = tasks.iter().map(TaskEvaluator::new).collect();
    let mut sums = vec![0.0; tasks.len()];
    for s in scenes {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &s.image, channel)?;
        for (t, spec) in tasks.iter().enumerate() {
            let target = s.target(spec.kind);
            let l = task_loss(&mut g, spec.kind, out.outputs[t], &target)?;
            sums[t] += g.value(l).item();
            evals[t].update(g.value(out.outputs[t]), &target)?;
        }
    }
    let n = scenes.len().max(1) as f64;
    let tasks_out = tasks
        .iter()
        .zip(&evals)
        .zip(&sums)
        .map(|((spec, ev), &s)| {
            Ok(TaskEval {
                task: spec.name().to_string(),
                loss: s / n,
                metrics: ev.finish()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_loss = tasks_out.iter().zip(weights).map(|(t, w)| w * t.loss).sum();
    Ok(EvalResult {
        tasks: tasks_out,
        total_loss,
    })
}

/// Channel used for the training-time validation pass.
pub fn validation_channel(cfg: &RunConfig) -> ChannelConfig {
    let mut c = if cfg.train.noisy {
        cfg.channel.clone()
    } else {
        ChannelConfig {
            mode: ChannelMode::Noiseless,
            ..cfg.channel.clone()
        }
    };
    c.seed = cfg.seed ^ EVAL_CHANNEL_STREAM;
    c
}

fn training_channel(cfg: &RunConfig) -> Result<Channel> {
    let mut c = validation_channel(cfg);
    c.seed = cfg.seed ^ TRAIN_CHANNEL_STREAM;
    Channel::new(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training objective of every optimiser step.
    pub step_losses: Vec<f64>,
    /// Validation objective after each epoch.
    pub val_losses: Vec<f64>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub weights: Vec<f64>,
}

/// Fixed weights where configured, otherwise `1/L_t` measured on the first batch.
pub fn resolve_weights(cfg: &RunConfig, model: &Model, store: &ParamStore, data: &Data) -> Result<Vec<f64>> {
    let fixed: Vec<Option<f64>> = cfg.tasks.iter().map(|t| t.loss_weight).collect();
    if fixed.iter().all(Option::is_some) {
        return Ok(fixed.into_iter().flatten().collect());
    }
    let batch: Vec<&Scene> = data.train.iter().take(cfg.train.batch_size).collect();
    let mut ch = Channel::new(ChannelConfig {
        mode: ChannelMode::Noiseless,
        ..cfg.channel.clone()
    })?;
    let ones = vec![1.0; cfg.tasks.len()];
    let initial = batch_objective(model, store, &batch, &ones, &mut ch)?.task_losses;
    let balanced = balance_weights(&initial)?;
    Ok(fixed.iter().zip(balanced).map(|(f, b)| f.unwrap_or(b)).collect())
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, snap: Vec<Tensor>) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(snap) {
        *store.get_mut(id) = t;
    }
}

/// Adam on the weighted objective with early stopping on validation loss. The
/// parameters with the best validation loss are left in `store`.
pub fn train(cfg: &RunConfig, model: &Model, store: &mut ParamStore, data: &Data, weights: &[f64]) -> Result<TrainReport> {
    let tc = &cfg.train;
    let mut adam = Adam::from_config(tc);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut channel = training_channel(cfg)?;
    let val_cfg = validation_channel(cfg);
    let val_loss = |store: &ParamStore| -> Result<f64> {
        let mut ch = Channel::new(val_cfg.clone())?;
        Ok(evaluate(model, store, &data.val, weights, &mut ch)?.total_loss)
    };

    let initial_val_loss = val_loss(store)?;
    let mut best = (initial_val_loss, 0usize, snapshot(store));
    let mut step_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &data.train[i]).collect();
            let step = step_losses.len();
            let mut obj = batch_objective(model, store, &batch, weights, &mut channel).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            let loss = obj.graph.value(obj.total).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: step_losses.len(),
                    detail: format!("training loss became {loss}"),
                });
            }
            obj.graph.backward(obj.total)?;
            let grads = obj.graph.param_grads();
            if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    step: step_losses.len(),
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(store, &grads);
            step_losses.push(loss);
        }
        let v = val_loss(store)?;
        val_losses.push(v);
        if v < best.0 {
            best = (v, epoch, snapshot(store));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                stopped_early = epoch < tc.max_epochs;
                break;
            }
        }
    }
    let epochs_run = val_losses.len();
    let (best_val_loss, best_epoch, snap) = best;
    restore(store, snap);
    Ok(TrainReport {
        step_losses,
        val_losses,
        initial_val_loss,
        best_val_loss,
        best_epoch,
        epochs_run,
        stopped_early,
        weights: weights.to_vec(),
    })
}

/// A model, its parameters, the data it was trained on, and the training record.
pub struct TrainedRun {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub data: Data,
    pub report: TrainReport,
}

impl TrainedRun {
    pub fn weights(&self) -> &[f64] {
        &self.report.weights
    }
}

/// Builds the model for `cfg` with freshly initialised parameters.
pub fn build(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, &cfg.model_config())?;
    Ok((model, store))
}

/// Generates data, resolves loss weights and trains.
pub fn train_run(cfg: &RunConfig) -> Result<TrainedRun> {
    let (model, mut store) = build(cfg)?;
    let data = Data::generate(cfg)?;
    let weights = resolve_weights(cfg, &model, &store, &data)?;
    let report = train(cfg, &model, &mut store, &data, &weights)?;
    Ok(TrainedRun {
        config: cfg.clone(),
        model,
        store,
        data,
        report,
    })
}
