//! Parameterised layers shared by the encoder, the GAI module and the decoders.

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Glorot-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Self {
        let area = kernel * kernel;
        let weight = store.glorot(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * area,
            out_channels * area,
        );
        let bias = store.zeros(format!("{name}.bias"), &[out_channels]);
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.geom)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = store.glorot(
            format!("{name}.weight"),
            &[out_features, in_features],
            in_features,
            out_features,
        );
        let bias = store.zeros(format!("{name}.bias"), &[out_features]);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
