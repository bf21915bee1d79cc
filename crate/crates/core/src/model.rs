//! Full transmitter/receiver model: shared encoder, optional GAI fusion, optional
//! bandwidth adapter, channel, and one decoder per task.

use serde::{Deserialize, Serialize};

use crate::channel::{solve_cds, BandwidthAdapter, BandwidthRatio, Channel, TransmitInfo};
use crate::encoder::{Encoder, EncoderConfig};
use crate::gai::{GaiConfig, GaiModule, GaiTrace, GaiVariant};
use crate::heads::{TaskDecoder, TaskSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::autodiff::{Graph, Var};
use crate::{Error, Result};

/// Architectures compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// One encoder and decoder per task, last block transmitted.
    SingleTask,
    /// Shared encoder, last block transmitted to every decoder.
    BasicMultitask,
    GaiW,
    SimpAtt,
    #[default]
    Full,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Full,
        ModelVariant::GaiW,
        ModelVariant::SimpAtt,
        ModelVariant::BasicMultitask,
        ModelVariant::SingleTask,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::SingleTask => "single_task",
            ModelVariant::BasicMultitask => "basic_multitask",
            ModelVariant::GaiW => "gai_w",
            ModelVariant::SimpAtt => "simp_att",
            ModelVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    pub fn gai_variant(&self) -> Option<GaiVariant> {
        match self {
            ModelVariant::Full => Some(GaiVariant::Full),
            ModelVariant::GaiW => Some(GaiVariant::GaiW),
            ModelVariant::SimpAtt => Some(GaiVariant::SimpAtt),
            ModelVariant::SingleTask | ModelVariant::BasicMultitask => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gai: GaiConfig,
    pub tasks: Vec<TaskSpec>,
    pub variant: ModelVariant,
    /// Target bandwidth ratio; `None` transmits the fused features as they are.
    pub target_ratio: Option<f64>,
    pub transmit_power: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gai.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        if let Some(r) = self.target_ratio {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("target bandwidth ratio {r} must be positive")));
            }
        }
        if !(self.transmit_power > 0.0) {
            return Err(Error::Config("transmit_power must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of each transmitted task feature before any adapter.
    pub fn feature_channels(&self) -> usize {
        match self.variant.gai_variant() {
            Some(_) => self.gai.c_out,
            None => self.encoder.out_channels(),
        }
    }

    /// Spatial extent of the transmitted features.
    pub fn feature_hw(&self) -> (usize, usize) {
        let [_, h, w] = self.encoder.output_shape();
        (h, w)
    }

    pub fn transmitted_channels(&self) -> Result<usize> {
        match self.target_ratio {
            Some(r) => {
                let (h, w) = self.feature_hw();
                Ok(solve_cds(r, self.encoder.input, h, w)?.0)
            }
            None => Ok(self.feature_channels()),
        }
    }

    /// Bandwidth ratio of one transmitted task feature.
    pub fn bandwidth(&self) -> Result<BandwidthRatio> {
        let (h, w) = self.feature_hw();
        crate::channel::bandwidth_ratio(self.encoder.input, [self.transmitted_channels()?, h, w])
    }
}

/// One encoder with everything it feeds.
#[derive(Debug, Clone)]
pub struct Branch {
    pub encoder: Encoder,
    pub gai: Option<GaiModule>,
    pub adapter: Option<BandwidthAdapter>,
    /// `(task index, decoder)` pairs served by this branch.
    pub decoders: Vec<(usize, TaskDecoder)>,
}

impl Branch {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        if let Some(gai) = &self.gai {
            p.extend(gai.params());
        }
        if let Some(a) = &self.adapter {
            p.extend(a.params());
        }
        for (_, d) in &self.decoders {
            p.extend(d.params());
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub branches: Vec<Branch>,
}

/// Outputs of one forward pass over a single image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Decoder outputs in task order.
    pub outputs: Vec<Var>,
    /// Task features before the channel, in task order.
    pub features: Vec<Var>,
    pub transmissions: Vec<TransmitInfo>,
    /// GAI intermediates per branch, when the branch has a GAI module.
    pub traces: Vec<Option<GaiTrace>>,
}

impl Model {
    /// Registers all parameters in `store`. Initial values depend only on the store
    /// seed and parameter names, so variants share every parameter they have in common.
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let groups: Vec<(String, Vec<usize>)> = match config.variant {
            ModelVariant::SingleTask => (0..config.tasks.len()).map(|t| (format!("st{t}."), vec![t])).collect(),
            _ => vec![(String::new(), (0..config.tasks.len()).collect())],
        };
        let c_feat = config.feature_channels();
        let c_tx = config.transmitted_channels()?;
        let branches = groups
            .into_iter()
            .map(|(prefix, tasks)| {
                let encoder = Encoder::new(store, &format!("{prefix}enc"), &config.encoder)?;
                let gai = match config.variant.gai_variant() {
                    Some(v) => {
                        let chans: Vec<usize> = config.encoder.block_shapes().iter().map(|s| s[0]).collect();
                        let cfg = GaiConfig {
                            variant: v,
                            ..config.gai.clone()
                        };
                        Some(GaiModule::new(store, &format!("{prefix}gai"), &cfg, &chans, tasks.len())?)
                    }
                    None => None,
                };
                let adapter = config
                    .target_ratio
                    .map(|_| BandwidthAdapter::new(store, &format!("{prefix}bw"), c_feat, c_tx));
                let decoders = tasks
                    .iter()
                    .map(|&t| Ok((t, TaskDecoder::new(store, &format!("{prefix}dec{t}"), &config.tasks[t], c_feat)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Branch {
                    encoder,
                    gai,
                    adapter,
                    decoders,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            branches,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.config.tasks.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.branches.iter().flat_map(|b| b.params()).collect()
    }

    pub fn gai_params(&self) -> Vec<ParamId> {
        self.branches
            .iter()
            .filter_map(|b| b.gai.as_ref())
            .flat_map(|g| g.params())
            .collect()
    }

    /// Task features `z_t` for one image, before normalisation and the channel.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Vec<Var>, Vec<Option<GaiTrace>>)> {
        let mut features = vec![None; self.num_tasks()];
        let mut traces = Vec::with_capacity(self.branches.len());
        let hw = self.config.feature_hw();
        for b in &self.branches {
            let feats = b.encoder.encode_collect(g, store, image)?;
            match &b.gai {
                Some(gai) => {
                    let tr = gai.forward(g, store, &feats, hw)?;
                    for (slot, &(t, _)) in b.decoders.iter().enumerate() {
                        features[t] = Some(tr.z[slot]);
                    }
                    traces.push(Some(tr));
                }
                None => {
                    let last = *feats.last().expect("encoder has blocks");
                    for &(t, _) in &b.decoders {
                        features[t] = Some(last);
                    }
                    traces.push(None);
                }
            }
        }
        Ok((features.into_iter().map(|f| f.expect("every task has a branch")).collect(), traces))
    }

    /// Encode, transmit each task feature through `channel`, decode.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, channel: &mut Channel) -> Result<ForwardOutput> {
        let x = g.constant(image.clone())?;
        let (features, traces) = self.encode(g, store, x)?;
        let [_, ih, iw] = self.config.encoder.input;
        let mut outputs = vec![None; self.num_tasks()];
        let mut transmissions = vec![None; self.num_tasks()];
        for b in &self.branches {
            let mut sent = Vec::with_capacity(b.decoders.len());
            for &(t, _) in &b.decoders {
                let z = match &b.adapter {
                    Some(a) => a.down.forward(g, store, features[t])?,
                    None => features[t],
                };
                let (zn, _) = g.power_normalize(z, self.config.transmit_power)?;
                sent.push(zn);
            }
            let received = channel.transmit_all(g, &sent)?;
            for ((t, dec), (zhat, info)) in b.decoders.iter().zip(received) {
                let zhat = match &b.adapter {
                    Some(a) => a.up.forward(g, store, zhat)?,
                    None => zhat,
                };
                outputs[*t] = Some(dec.forward(g, store, zhat, (ih, iw))?);
                transmissions[*t] = Some(info);
            }
        }
        Ok(ForwardOutput {
            outputs: outputs.into_iter().map(Option::unwrap).collect(),
            features,
            transmissions: transmissions.into_iter().map(Option::unwrap).collect(),
            traces,
        })
    }
}
