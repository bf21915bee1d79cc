//! SNR/bandwidth sweeps, ablation runs, task-node weight export, FLOP reports, and
//! their CSV files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::channel::{solve_cds, Channel, ChannelConfig, ChannelMode};
use crate::config::RunConfig;
use crate::gai::{flop_count_gai, FlopBreakdown, GaiConfig, GaiModule, GaiVariant};
use crate::metrics::{relative_improvement, Direction, MetricRecord};
use crate::model::{Model, ModelVariant};
use crate::params::ParamStore;
use crate::synth::Scene;
use crate::tensor::Tensor;
use crate::train::{evaluate, train_run, validation_channel, EvalResult, TrainedRun, EVAL_CHANNEL_STREAM};
use crate::{Error, Result};

pub const RESULTS_HEADER: [&str; 10] = [
    "run_id",
    "variant",
    "task",
    "metric",
    "direction",
    "snr_db",
    "bandwidth_ratio",
    "channel_mode",
    "seed",
    "value",
];

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub variant: String,
    pub task: String,
    pub metric: String,
    pub direction: String,
    /// `inf` for noiseless cells.
    pub snr_db: String,
    pub bandwidth_ratio: f64,
    pub channel_mode: String,
    pub seed: u64,
    pub value: f64,
}

/// Parses `lo:hi:step` into an inclusive grid.
pub fn parse_snr_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("SNR range '{spec}' is not lo:hi:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (lo, hi, step) = (v[0], v[1], v[2]);
    if !(step > 0.0) || hi < lo || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

/// Comma-separated ratios; an empty string yields an empty list.
pub fn parse_ratio_list(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|r| *r > 0.0 && r.is_finite())
                .ok_or_else(|| Error::Config(format!("bad bandwidth ratio '{s}'")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub snrs: Vec<f64>,
    /// Requested ratios; empty means the model's own ratio.
    pub ratios: Vec<f64>,
    pub modes: Vec<ChannelMode>,
}

/// Trained parameters together with what is needed to evaluate them.
pub struct Evaluable<'a> {
    pub config: &'a RunConfig,
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub weights: &'a [f64],
}

impl<'a> From<&'a TrainedRun> for Evaluable<'a> {
    fn from(r: &'a TrainedRun) -> Self {
        Self {
            config: &r.config,
            model: &r.model,
            store: &r.store,
            weights: &r.report.weights,
        }
    }
}

/// Checks each requested ratio against the model's transmitted channel count and
/// returns the achieved ratios.
pub fn resolve_ratios(cfg: &RunConfig, requested: &[f64]) -> Result<Vec<f64>> {
    let mc = cfg.model_config();
    let native = mc.bandwidth()?.as_f64();
    if requested.is_empty() {
        return Ok(vec![native]);
    }
    let have = mc.transmitted_channels()?;
    let (h, w) = mc.feature_hw();
    requested
        .iter()
        .map(|&r| {
            let (c, achieved) = solve_cds(r, cfg.encoder.input, h, w)?;
            if c != have {
                return Err(Error::Config(format!(
                    "ratio {r} needs {c} transmitted channels but the model sends {have}; \
                     train with bandwidth.target_ratio = {r}"
                )));
            }
            Ok(achieved.as_f64())
        })
        .collect()
}

fn eval_rows(
    eval: &EvalResult,
    run_id: &str,
    variant: ModelVariant,
    snr: Option<f64>,
    ratio: f64,
    mode: ChannelMode,
    seed: u64,
) -> Vec<ResultRow> {
    let snr_db = match snr {
        Some(s) if s.is_finite() => s.to_string(),
        _ => "inf".to_string(),
    };
    let row = |task: &str, metric: &str, dir: Direction, value: f64| ResultRow {
        run_id: run_id.to_string(),
        variant: variant.as_str().to_string(),
        task: task.to_string(),
        metric: metric.to_string(),
        direction: dir.as_str().to_string(),
        snr_db: snr_db.clone(),
        bandwidth_ratio: ratio,
        channel_mode: mode.as_str().to_string(),
        seed,
        value,
    };
    let mut rows = Vec::new();
    for t in &eval.tasks {
        rows.push(row(&t.task, "loss", Direction::LowerBetter, t.loss));
        for &(m, v, d) in &t.metrics {
            rows.push(row(&t.task, m, d, v));
        }
    }
    rows
}

/// Metric records of an evaluation, without the loss rows.
pub fn metric_records(eval: &EvalResult) -> Vec<MetricRecord> {
    eval.tasks
        .iter()
        .flat_map(|t| {
            t.metrics
                .iter()
                .map(move |&(m, v, d)| MetricRecord::new(&t.task, m, v, d))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    ratio: f64,
    mode: ChannelMode,
    snr: Option<f64>,
}

/// Evaluates every (ratio, mode, SNR) cell on `scenes`. Cells run in parallel, each
/// with its own channel seeded from the evaluation stream plus the cell index.
pub fn evaluate_sweep(run: &Evaluable, scenes: &[Scene], spec: &SweepSpec, run_id: &str) -> Result<Vec<ResultRow>> {
    let ratios = resolve_ratios(run.config, &spec.ratios)?;
    let mut cells = Vec::new();
    for &ratio in &ratios {
        for &mode in &spec.modes {
            if mode == ChannelMode::Noiseless {
                cells.push(Cell { ratio, mode, snr: None });
            } else {
                cells.extend(spec.snrs.iter().map(|&s| Cell { ratio, mode, snr: Some(s) }));
            }
        }
    }
    let base = ChannelConfig {
        seed: run.config.seed ^ EVAL_CHANNEL_STREAM,
        ..run.config.channel.clone()
    };
    let results: Vec<Result<Vec<ResultRow>>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let cfg = ChannelConfig {
                mode: cell.mode,
                snr_db: cell.snr.unwrap_or(f64::INFINITY),
                ..base.clone()
            };
            let mut ch = Channel::for_worker(&cfg, i as u64)?;
            let eval = evaluate(run.model, run.store, scenes, run.weights, &mut ch)?;
            Ok(eval_rows(
                &eval,
                run_id,
                run.config.train.variant,
                cell.snr,
                cell.ratio,
                cell.mode,
                run.config.seed,
            ))
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of training and evaluating one ablation variant.
pub struct AblationOutcome {
    pub variant: ModelVariant,
    pub run: TrainedRun,
    /// Noiseless evaluation on the validation split.
    pub eval: EvalResult,
    pub rows: Vec<ResultRow>,
}

/// Trains `variant` from `base` (same data seed and budget) and evaluates it noiselessly.
pub fn run_ablation(base: &RunConfig, variant: ModelVariant) -> Result<AblationOutcome> {
    let cfg = base.with_variant(variant);
    let run = train_run(&cfg)?;
    let mut ch = Channel::new(ChannelConfig {
        mode: ChannelMode::Noiseless,
        ..validation_channel(&cfg)
    })?;
    let eval = evaluate(&run.model, &run.store, &run.data.val, run.weights(), &mut ch)?;
    let ratio = cfg.model_config().bandwidth()?.as_f64();
    let rows = eval_rows(
        &eval,
        &format!("ablate-{}", variant.as_str()),
        variant,
        None,
        ratio,
        ChannelMode::Noiseless,
        cfg.seed,
    );
    Ok(AblationOutcome {
        variant,
        run,
        eval,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub variant: String,
    /// Task name, or `overall` for the mean over tasks.
    pub task: String,
    pub delta: f64,
}

/// Relative improvement of each outcome over `baseline`.
pub fn delta_summary(outcomes: &[AblationOutcome], baseline: &AblationOutcome) -> Result<Vec<DeltaRow>> {
    let base = metric_records(&baseline.eval);
    let mut rows = Vec::new();
    for o in outcomes.iter().filter(|o| o.variant != baseline.variant) {
        let imp = relative_improvement(&metric_records(&o.eval), &base)?;
        for (task, d) in &imp.per_task {
            rows.push(DeltaRow {
                variant: o.variant.as_str().into(),
                task: task.clone(),
                delta: *d,
            });
        }
        rows.push(DeltaRow {
            variant: o.variant.as_str().into(),
            task: "overall".into(),
            delta: imp.overall,
        });
    }
    Ok(rows)
}

pub fn write_delta_csv(path: &Path, rows: &[DeltaRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `T×N` matrix of task-node weights `e_{i,t}`, averaged over channels and scenes.
pub fn export_task_node_weights(model: &Model, store: &ParamStore, scenes: &[Scene]) -> Result<Vec<Vec<f64>>> {
    let branch = match model.branches.as_slice() {
        [b] if b.gai.is_some() => b,
        _ => {
            return Err(Error::Config(format!(
                "variant {} has no task-node weights",
                model.config.variant.as_str()
            )))
        }
    };
    let gai = branch.gai.as_ref().expect("checked above");
    if scenes.is_empty() {
        return Err(Error::invalid("export_task_node_weights", "no scenes"));
    }
    let mut acc = vec![vec![0.0; gai.num_nodes]; gai.num_tasks];
    for s in scenes {
        let mut g = Graph::new();
        let x = g.constant(s.image.clone())?;
        let (_, traces) = model.encode(&mut g, store, x)?;
        let tr = traces[0].as_ref().expect("GAI branch has a trace");
        for (t, row) in tr.e.iter().enumerate() {
            for (i, &e) in row.iter().enumerate() {
                let v = g.value(e).data();
                acc[t][i] += v.iter().sum::<f64>() / v.len() as f64;
            }
        }
    }
    let n = scenes.len() as f64;
    Ok(acc.into_iter().map(|row| row.into_iter().map(|v| v / n).collect()).collect())
}

pub fn write_task_weights_csv(path: &Path, task_names: &[&str], matrix: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "node", "weight"])?;
    for (t, row) in matrix.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            w.write_record([task_names[t].to_string(), i.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopRow {
    pub stage: String,
    pub analytic: u64,
    pub instrumented: u64,
}

impl FlopRow {
    pub fn matches(&self) -> bool {
        self.analytic == self.instrumented
    }
}

/// Runs the full GAI module once on random block features of the configured shapes
/// and compares its multiply counters with the closed-form counts.
pub fn flop_report_for(gai: &GaiConfig, num_tasks: usize, block_shapes: &[[usize; 3]], out_hw: (usize, usize)) -> Result<Vec<FlopRow>> {
    let cfg = GaiConfig {
        variant: GaiVariant::Full,
        ..gai.clone()
    };
    let mut store = ParamStore::new(0);
    let chans: Vec<usize> = block_shapes.iter().map(|s| s[0]).collect();
    let module = GaiModule::new(&mut store, "gai", &cfg, &chans, num_tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let feats = block_shapes
        .iter()
        .map(|s| g.constant(Tensor::uniform(s, 1.0, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    module.forward(&mut g, &store, &feats, out_hw)?;
    let measured = FlopBreakdown::from_graph(&g);
    let analytic = flop_count_gai(&cfg, num_tasks, block_shapes, out_hw);
    let mut rows: Vec<FlopRow> = analytic
        .stages()
        .iter()
        .zip(measured.stages())
        .map(|(&(stage, a), (_, m))| FlopRow {
            stage: stage.to_string(),
            analytic: a,
            instrumented: m,
        })
        .collect();
    rows.push(FlopRow {
        stage: "total".into(),
        analytic: analytic.total(),
        instrumented: measured.total(),
    });
    Ok(rows)
}

pub fn flop_report(cfg: &RunConfig) -> Result<Vec<FlopRow>> {
    cfg.validate()?;
    let shapes = cfg.encoder.block_shapes();
    let [_, h, w] = cfg.encoder.output_shape();
    flop_report_for(&cfg.gai, cfg.tasks.len(), &shapes, (h, w))
}
