//! Task metrics and relative improvement over single-task baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_LABEL;
use crate::heads::{Target, TaskKind, TaskSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEPTH_THRESHOLDS: [f64; 3] = [1.25, 1.5625, 1.953125];
pub const ANGLE_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn sign(&self) -> f64 {
        match self {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher_better",
            Direction::LowerBetter => "lower_better",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub direction: Direction,
}

impl MetricRecord {
    pub fn new(task: &str, metric: &str, value: f64, direction: Direction) -> Self {
        Self {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            direction,
        }
    }
}

/// Confusion counts for segmentation.
#[derive(Debug, Clone)]
pub struct SegAccumulator {
    k: usize,
    intersection: Vec<u64>,
    pred_count: Vec<u64>,
    gt_count: Vec<u64>,
    correct: u64,
    total: u64,
}

impl SegAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            intersection: vec![0; k],
            pred_count: vec![0; k],
            gt_count: vec![0; k],
            correct: 0,
            total: 0,
        }
    }

    pub fn update(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("seg_metrics", format!("{} vs {}", pred.len(), gt.len())));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if t == IGNORE_LABEL {
                continue;
            }
            if p >= self.k || t >= self.k {
                return Err(Error::invalid("seg_metrics", format!("label out of range: {p}/{t}")));
            }
            self.pred_count[p] += 1;
            self.gt_count[t] += 1;
            self.total += 1;
            if p == t {
                self.intersection[p] += 1;
                self.correct += 1;
            }
        }
        Ok(())
    }

    /// `(mIoU, pixel accuracy)` in percent; classes absent from both maps are skipped.
    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.total == 0 {
            return Err(Error::invalid("seg_metrics", "no labelled pixels"));
        }
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            let union = self.pred_count[c] + self.gt_count[c] - self.intersection[c];
            if union > 0 {
                sum += self.intersection[c] as f64 / union as f64;
                present += 1;
            }
        }
        Ok((
            100.0 * sum / present as f64,
            100.0 * self.correct as f64 / self.total as f64,
        ))
    }
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], k: usize) -> Result<(f64, f64)> {
    let mut acc = SegAccumulator::new(k);
    acc.update(pred, gt)?;
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs: f64,
    pub rel: f64,
    /// Percent of pixels under each of [`DEPTH_THRESHOLDS`].
    pub delta: [f64; 3],
}

#[derive(Debug, Clone, Default)]
pub struct DepthAccumulator {
    abs: f64,
    rel: f64,
    within: [u64; 3],
    count: u64,
}

impl DepthAccumulator {
    /// Pixels with nonpositive ground truth are skipped.
    pub fn update(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("depth_metrics", format!("{} vs {}", pred.len(), gt.len())));
        }
        for (&d, &t) in pred.iter().zip(gt) {
            if !(t > 0.0) {
                continue;
            }
            let err = (d - t).abs();
            self.abs += err;
            self.rel += err / t;
            let ratio = if d > 0.0 { (d / t).max(t / d) } else { f64::INFINITY };
            for (slot, thr) in self.within.iter_mut().zip(DEPTH_THRESHOLDS) {
                if ratio < thr {
                    *slot += 1;
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.count == 0 {
            return Err(Error::invalid("depth_metrics", "no valid ground-truth pixels"));
        }
        let n = self.count as f64;
        Ok(DepthMetrics {
            abs: self.abs / n,
            rel: self.rel / n,
            delta: self.within.map(|c| 100.0 * c as f64 / n),
        })
    }
}

pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.update(pred, gt)?;
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalMetrics {
    pub mean: f64,
    pub median: f64,
    /// Percent of pixels under each of [`ANGLE_THRESHOLDS`].
    pub within: [f64; 3],
}

#[derive(Debug, Clone, Default)]
pub struct NormalAccumulator {
    angles: Vec<f64>,
}

impl NormalAccumulator {
    /// Both fields are `3×H×W`; each pixel vector is normalised before comparing.
    pub fn update(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() || !pred.len().is_multiple_of(3) {
            return Err(Error::shape("normal_metrics", format!("{} vs {}", pred.len(), gt.len())));
        }
        let plane = pred.len() / 3;
        for p in 0..plane {
            let a = [pred[p], pred[plane + p], pred[2 * plane + p]];
            let b = [gt[p], gt[plane + p], gt[2 * plane + p]];
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
            let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
            self.angles.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<NormalMetrics> {
        if self.angles.is_empty() {
            return Err(Error::invalid("normal_metrics", "no pixels"));
        }
        let n = self.angles.len();
        let mut sorted = self.angles.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let within = ANGLE_THRESHOLDS.map(|t| 100.0 * sorted.iter().filter(|&&a| a < t).count() as f64 / n as f64);
        Ok(NormalMetrics {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            within,
        })
    }
}

pub fn normal_metrics(pred: &[f64], gt: &[f64]) -> Result<NormalMetrics> {
    let mut acc = NormalAccumulator::default();
    acc.update(pred, gt)?;
    acc.finish()
}

fn argmax_channels(t: &Tensor) -> Result<Vec<usize>> {
    let (k, h, w) = t.chw()?;
    let plane = h * w;
    let d = t.data();
    Ok((0..plane)
        .map(|p| {
            (0..k)
                .max_by(|&a, &b| d[a * plane + p].total_cmp(&d[b * plane + p]))
                .unwrap_or(0)
        })
        .collect())
}

/// Pools one task's metrics over a validation set.
#[derive(Debug, Clone)]
pub enum TaskEvaluator {
    Segmentation(SegAccumulator),
    Depth(DepthAccumulator),
    Normals(NormalAccumulator),
    L1 { sum: f64, count: u64 },
    Classification { correct: u64, total: u64 },
}

impl TaskEvaluator {
    pub fn new(spec: &TaskSpec) -> Self {
        match spec.kind {
            TaskKind::Segmentation => Self::Segmentation(SegAccumulator::new(spec.output_channels())),
            TaskKind::Depth => Self::Depth(DepthAccumulator::default()),
            TaskKind::SurfaceNormal => Self::Normals(NormalAccumulator::default()),
            TaskKind::Keypoint | TaskKind::Edge => Self::L1 { sum: 0.0, count: 0 },
            TaskKind::Classification => Self::Classification { correct: 0, total: 0 },
        }
    }

    /// Adds one decoder output and its target.
    pub fn update(&mut self, output: &Tensor, target: &Target) -> Result<()> {
        match (self, target) {
            (Self::Segmentation(acc), Target::Labels(gt)) => acc.update(&argmax_channels(output)?, gt),
            (Self::Depth(acc), Target::Dense { values, mask }) => match mask {
                None => acc.update(output.data(), values.data()),
                Some(m) => {
                    let (p, t): (Vec<f64>, Vec<f64>) = output
                        .data()
                        .iter()
                        .zip(values.data())
                        .zip(m)
                        .filter(|(_, &keep)| keep)
                        .map(|((&a, &b), _)| (a, b))
                        .unzip();
                    acc.update(&p, &t)
                }
            },
            (Self::Normals(acc), Target::Normals(gt)) => acc.update(output.data(), gt.data()),
            (Self::L1 { sum, count }, Target::Dense { values, mask }) => {
                if output.len() != values.len() {
                    return Err(Error::shape("l1_metric", format!("{} vs {}", output.len(), values.len())));
                }
                for (i, (a, b)) in output.data().iter().zip(values.data()).enumerate() {
                    if mask.as_ref().is_none_or(|m| m[i]) {
                        *sum += (a - b).abs();
                        *count += 1;
                    }
                }
                Ok(())
            }
            (Self::Classification { correct, total }, Target::Class(c)) => {
                let d = output.data();
                let pred = (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
                *total += 1;
                if pred == *c {
                    *correct += 1;
                }
                Ok(())
            }
            _ => Err(Error::invalid("evaluate", "target does not match task kind")),
        }
    }

    /// `(metric name, value, direction)` triples.
    pub fn finish(&self) -> Result<Vec<(&'static str, f64, Direction)>> {
        use Direction::*;
        Ok(match self {
            Self::Segmentation(acc) => {
                let (miou, acc) = acc.finish()?;
                vec![("miou", miou, HigherBetter), ("pixel_acc", acc, HigherBetter)]
            }
            Self::Depth(acc) => {
                let m = acc.finish()?;
                vec![
                    ("abs_err", m.abs, LowerBetter),
                    ("rel_err", m.rel, LowerBetter),
                    ("delta1", m.delta[0], HigherBetter),
                    ("delta2", m.delta[1], HigherBetter),
                    ("delta3", m.delta[2], HigherBetter),
                ]
            }
            Self::Normals(acc) => {
                let m = acc.finish()?;
                vec![
                    ("mean_angle", m.mean, LowerBetter),
                    ("median_angle", m.median, LowerBetter),
                    ("within_11_25", m.within[0], HigherBetter),
                    ("within_22_5", m.within[1], HigherBetter),
                    ("within_30", m.within[2], HigherBetter),
                ]
            }
            Self::L1 { sum, count } => {
                if *count == 0 {
                    return Err(Error::invalid("l1_metric", "no pixels"));
                }
                vec![("l1", sum / *count as f64, LowerBetter)]
            }
            Self::Classification { correct, total } => {
                if *total == 0 {
                    return Err(Error::invalid("accuracy", "no samples"));
                }
                vec![("accuracy", 100.0 * *correct as f64 / *total as f64, HigherBetter)]
            }
        })
    }
}

/// Per-task and overall relative improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct Improvement {
    pub per_task: Vec<(String, f64)>,
    pub overall: f64,
}

/// Signed percentage improvement of one task's metrics over the baseline, averaged
/// over metrics. Metrics are matched by name.
pub fn task_improvement(model: &[MetricRecord], baseline: &[MetricRecord]) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::invalid("relative_improvement", "no metrics"));
    }
    let mut sum = 0.0;
    for m in model {
        let b = baseline
            .iter()
            .find(|b| b.task == m.task && b.metric == m.metric)
            .ok_or_else(|| Error::invalid("relative_improvement", format!("baseline lacks {}/{}", m.task, m.metric)))?;
        if b.value == 0.0 {
            return Err(Error::invalid("relative_improvement", format!("zero baseline for {}", m.metric)));
        }
        sum += m.direction.sign() * (m.value - b.value) / b.value * 100.0;
    }
    Ok(sum / model.len() as f64)
}

/// Groups records by task (first-appearance order) and averages the per-task values.
pub fn relative_improvement(model: &[MetricRecord], baseline: &[MetricRecord]) -> Result<Improvement> {
    let mut tasks: Vec<&str> = Vec::new();
    for r in model {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    if tasks.is_empty() {
        return Err(Error::invalid("relative_improvement", "no metrics"));
    }
    let per_task = tasks
        .iter()
        .map(|&t| {
            let rows: Vec<MetricRecord> = model.iter().filter(|r| r.task == t).cloned().collect();
            Ok((t.to_string(), task_improvement(&rows, baseline)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = per_task.iter().map(|(_, d)| d).sum::<f64>() / per_task.len() as f64;
    Ok(Improvement { per_task, overall })
}
