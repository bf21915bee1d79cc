//! Per-task decoders and their losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::layers::{Conv2d, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DILATION_RATES: [usize; 4] = [6, 12, 18, 24];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segmentation,
    Depth,
    SurfaceNormal,
    Keypoint,
    Edge,
    Classification,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
            TaskKind::SurfaceNormal => "surface_normal",
            TaskKind::Keypoint => "keypoint",
            TaskKind::Edge => "edge",
            TaskKind::Classification => "classification",
        }
    }

    pub fn is_dense(&self) -> bool {
        !matches!(self, TaskKind::Classification)
    }
}

fn default_dilation() -> usize {
    6
}
fn default_hidden() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Required for segmentation and classification.
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Fixed loss weight; `None` calibrates it from the first batch.
    #[serde(default)]
    pub loss_weight: Option<f64>,
    #[serde(default = "default_dilation")]
    pub dilation: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let num_classes = matches!(kind, TaskKind::Segmentation | TaskKind::Classification).then_some(4);
        Self {
            kind,
            num_classes,
            loss_weight: None,
            dilation: default_dilation(),
            hidden: default_hidden(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Segmentation | TaskKind::Classification => match self.num_classes {
                Some(k) if k >= 2 => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{} needs num_classes >= 2",
                        self.kind.as_str()
                    )))
                }
            },
            _ => {}
        }
        if let Some(w) = self.loss_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss_weight {w} must be positive")));
            }
        }
        if !DILATION_RATES.contains(&self.dilation) {
            return Err(Error::Config(format!(
                "dilation {} not in {DILATION_RATES:?}",
                self.dilation
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("decoder hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// Decoder output channels.
    pub fn output_channels(&self) -> usize {
        match self.kind {
            TaskKind::Segmentation | TaskKind::Classification => self.num_classes.unwrap_or(2),
            TaskKind::SurfaceNormal => 3,
            TaskKind::Depth | TaskKind::Keypoint | TaskKind::Edge => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum DecoderHead {
    Dense(Conv2d),
    Pooled(Linear),
}

/// Dilated 3×3 conv, 1×1 conv, then a 1×1 conv (or pooled linear head for
/// classification).
#[derive(Debug, Clone)]
pub struct TaskDecoder {
    pub spec: TaskSpec,
    pub layer1: Conv2d,
    pub layer2: Conv2d,
    pub layer3: DecoderHead,
}

impl TaskDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: &TaskSpec, c_in: usize) -> Result<Self> {
        spec.validate()?;
        let d = spec.hidden;
        let geom = ConvGeom::new(1, spec.dilation, spec.dilation);
        let layer1 = Conv2d::new(store, &format!("{prefix}.layer1"), c_in, d, 3, geom);
        let layer2 = Conv2d::new(store, &format!("{prefix}.layer2"), d, d, 1, ConvGeom::UNIT);
        let k = spec.output_channels();
        let layer3 = if spec.kind.is_dense() {
            DecoderHead::Dense(Conv2d::new(store, &format!("{prefix}.layer3"), d, k, 1, ConvGeom::UNIT))
        } else {
            DecoderHead::Pooled(Linear::new(store, &format!("{prefix}.layer3"), d, k))
        };
        Ok(Self {
            spec: spec.clone(),
            layer1,
            layer2,
            layer3,
        })
    }

    /// Dense outputs are resized to `label_hw`; classification returns `K` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, label_hw: (usize, usize)) -> Result<Var> {
        let c = g.value(z).chw()?.0;
        if c != self.layer1.in_channels {
            return Err(Error::shape(
                "decode_task",
                format!("expected {} channels, got {c}", self.layer1.in_channels),
            ));
        }
        let h = self.layer1.forward(g, store, z)?;
        let h = g.relu(h)?;
        let h = self.layer2.forward(g, store, h)?;
        let h = g.relu(h)?;
        match &self.layer3 {
            DecoderHead::Dense(conv) => {
                let out = conv.forward(g, store, h)?;
                let (_, oh, ow) = g.value(out).chw()?;
                if (oh, ow) == label_hw {
                    Ok(out)
                } else {
                    g.bilinear_resize(out, label_hw.0, label_hw.1)
                }
            }
            DecoderHead::Pooled(lin) => {
                let pooled = g.global_avg_pool(h)?;
                lin.forward(g, store, pooled)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.layer1.params().into_iter().chain(self.layer2.params()).collect();
        match &self.layer3 {
            DecoderHead::Dense(c) => p.extend(c.params()),
            DecoderHead::Pooled(l) => p.extend(l.params()),
        }
        p
    }
}

/// Ground truth for one task of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Per-pixel class indices, `IGNORE_LABEL` allowed.
    Labels(Vec<usize>),
    /// Real-valued map with optional evaluation mask.
    Dense { values: Tensor, mask: Option<Vec<bool>> },
    /// Unit normals, `3×H×W`.
    Normals(Tensor),
    Class(usize),
}

/// Loss of one decoder output against its target.
pub fn task_loss(g: &mut Graph, kind: TaskKind, pred: Var, target: &Target) -> Result<Var> {
    match (kind, target) {
        (TaskKind::Segmentation, Target::Labels(l)) => g.cross_entropy(pred, l),
        (TaskKind::Depth | TaskKind::Keypoint | TaskKind::Edge, Target::Dense { values, mask }) => {
            g.l1_loss(pred, values, mask.as_deref())
        }
        (TaskKind::SurfaceNormal, Target::Normals(n)) => g.cosine_loss(pred, n),
        (TaskKind::Classification, Target::Class(c)) => {
            let k = g.value(pred).len();
            let logits = g.reshape(pred, &[k, 1, 1])?;
            g.cross_entropy(logits, &[*c])
        }
        (kind, _) => Err(Error::invalid(
            "task_loss",
            format!("target does not match task kind {}", kind.as_str()),
        )),
    }
}

/// `Σ w_t·L_t`.
pub fn total_loss(g: &mut Graph, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(Error::invalid(
            "total_loss",
            format!("{} losses vs {} weights", losses.len(), weights.len()),
        ));
    }
    let parts = losses
        .iter()
        .zip(weights)
        .map(|(&l, &w)| g.scale(l, w))
        .collect::<Result<Vec<_>>>()?;
    g.add_all(&parts)
}

/// Weights that bring every initial loss to 1.
pub fn balance_weights(initial: &[f64]) -> Result<Vec<f64>> {
    initial
        .iter()
        .map(|&l| {
            if l > 0.0 && l.is_finite() {
                Ok(1.0 / l)
            } else {
                Err(Error::invalid("balance_weights", format!("cannot balance initial loss {l}")))
            }
        })
        .collect()
}
