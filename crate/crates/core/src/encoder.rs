//! Residual-block encoder whose per-block outputs feed the GAI module.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{ParamId, ParamStore};

/// Block layout of the encoder. `input` is `[C_in, H_in, W_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for EncoderConfig {
    /// Eight blocks in the ResNet-18 channel pattern on a 3×32×32 input (α = 8).
    fn default() -> Self {
        Self {
            input: [3, 32, 32],
            channels: vec![64, 64, 128, 128, 256, 256, 512, 512],
            strides: vec![1, 1, 2, 1, 2, 1, 2, 1],
        }
    }
}

impl EncoderConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Reduction coefficient α: the product of all block strides.
    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated config has blocks")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "encoder has {} channel entries but {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.input.contains(&0) || self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("encoder extents, channels and strides must be positive".into()));
        }
        let alpha = self.reduction();
        let [_, h, w] = self.input;
        if h % alpha != 0 || w % alpha != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the reduction coefficient {alpha}"
            )));
        }
        Ok(())
    }

    /// `[C_i, H_i, W_i]` of every block output.
    pub fn block_shapes(&self) -> Vec<[usize; 3]> {
        let [_, mut h, mut w] = self.input;
        self.channels
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| {
                h /= s;
                w /= s;
                [c, h, w]
            })
            .collect()
    }

    /// `[C_out, H_in/α, W_in/α]`.
    pub fn output_shape(&self) -> [usize; 3] {
        let alpha = self.reduction();
        [self.out_channels(), self.input[1] / alpha, self.input[2] / alpha]
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1×1 shortcut, present when the stride or channel count changes.
    pub projection: Option<Conv2d>,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, ConvGeom::new(stride, 1, 1));
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, ConvGeom::new(1, 1, 1));
        let projection = (stride != 1 || cin != cout).then(|| {
            Conv2d::new(store, &format!("{name}.proj"), cin, cout, 1, ConvGeom::new(stride, 0, 1))
        });
        Self {
            conv1,
            conv2,
            projection,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    /// `ReLU(conv2(ReLU(conv1(x))) + shortcut(x))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (c, _, _) = g.value(x).chw()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "residual_block",
                format!("input has {c} channels, block expects {}", self.in_channels()),
            ));
        }
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv1.params().to_vec();
        v.extend(self.conv2.params());
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<ResidualBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = config.input[0];
        let blocks = config
            .channels
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&cout, &s))| {
                let b = ResidualBlock::new(store, &format!("{prefix}.block{i}"), cin, cout, s);
                cin = cout;
                b
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    /// Runs every block and returns all intermediate outputs `F_1..F_N`.
    pub fn encode_collect(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        if g.shape(x) != self.config.input {
            return Err(Error::shape(
                "encode_collect",
                format!("input {:?}, encoder expects {:?}", g.shape(x), self.config.input),
            ));
        }
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}
