//! Power normalisation, AWGN and Rayleigh block-fading channels, and bandwidth-ratio
//! bookkeeping.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, PowerScale, Var};
use crate::layers::Conv2d;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Gains below this are redrawn so that equalisation stays finite.
pub const MIN_FADING_GAIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Awgn,
    Rayleigh,
    #[default]
    Noiseless,
}

impl ChannelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelMode::Awgn => "awgn",
            ChannelMode::Rayleigh => "rayleigh",
            ChannelMode::Noiseless => "noiseless",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelMode::Awgn),
            "rayleigh" => Ok(ChannelMode::Rayleigh),
            "noiseless" => Ok(ChannelMode::Noiseless),
            other => Err(Error::Config(format!("unknown channel mode '{other}'"))),
        }
    }
}

fn default_power() -> f64 {
    1.0
}
fn default_rayleigh_scale() -> f64 {
    0.2
}
fn default_snr() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    #[serde(default = "default_power")]
    pub transmit_power: f64,
    #[serde(default)]
    pub mode: ChannelMode,
    #[serde(default = "default_rayleigh_scale")]
    pub rayleigh_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// One fading coefficient for all task features of a sample instead of one each.
    #[serde(default)]
    pub shared_fading: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            snr_db: default_snr(),
            transmit_power: default_power(),
            mode: ChannelMode::Noiseless,
            rayleigh_scale: default_rayleigh_scale(),
            seed: 0,
            shared_fading: false,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.transmit_power > 0.0 && self.transmit_power.is_finite()) {
            return Err(Error::Config("transmit_power must be positive".into()));
        }
        if self.mode == ChannelMode::Rayleigh && !(self.rayleigh_scale > 0.0) {
            return Err(Error::Config("rayleigh_scale must be positive".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("snr_db is NaN".into()));
        }
        Ok(())
    }

    /// `σ² = P·10^(−snr/10)`; zero for the noiseless mode and for infinite SNR.
    pub fn noise_variance(&self) -> f64 {
        match self.mode {
            ChannelMode::Noiseless => 0.0,
            _ => self.transmit_power * 10f64.powf(-self.snr_db / 10.0),
        }
    }
}

/// What happened to one transmitted tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmitInfo {
    pub noise_variance: f64,
    /// Fading coefficient, when the mode fades.
    pub gain: Option<f64>,
}

impl TransmitInfo {
    /// Noise variance after dividing by the fading gain.
    pub fn effective_noise_variance(&self) -> f64 {
        match self.gain {
            Some(h) => self.noise_variance / (h * h),
            None => self.noise_variance,
        }
    }
}

/// A channel realisation source. Each instance owns its RNG.
#[derive(Debug, Clone)]
pub struct Channel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    fixed_gain: Option<f64>,
}

impl Channel {
    pub fn new(config: ChannelConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            rng,
            fixed_gain: None,
        })
    }

    /// Channel for parallel worker `index`, seeded `seed + index`.
    pub fn for_worker(config: &ChannelConfig, index: u64) -> Result<Self> {
        let mut c = config.clone();
        c.seed = c.seed.wrapping_add(index);
        Self::new(c)
    }

    /// Test hook: pin the fading coefficient.
    pub fn with_fixed_gain(mut self, h: f64) -> Self {
        self.fixed_gain = Some(h);
        self
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Draws a Rayleigh coefficient by inversion, redrawing values below
    /// [`MIN_FADING_GAIN`].
    pub fn sample_gain(&mut self) -> f64 {
        if let Some(h) = self.fixed_gain {
            return h;
        }
        loop {
            let u: f64 = 1.0 - self.rng.random::<f64>();
            let h = self.config.rayleigh_scale * (-2.0 * u.ln()).sqrt();
            if h >= MIN_FADING_GAIN {
                return h;
            }
        }
    }

    pub fn sample_noise(&mut self, len: usize, variance: f64) -> Vec<f64> {
        let sd = variance.sqrt();
        (0..len)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                n * sd
            })
            .collect()
    }

    fn offset(&mut self, shape: &[usize], gain: Option<f64>) -> Result<(Option<Tensor>, TransmitInfo)> {
        let var = self.config.noise_variance();
        let info = TransmitInfo {
            noise_variance: var,
            gain,
        };
        if var == 0.0 {
            return Ok((None, info));
        }
        let mut noise = self.sample_noise(Tensor::numel(shape), var);
        if let Some(h) = gain {
            noise.iter_mut().for_each(|n| *n /= h);
        }
        Ok((Some(Tensor::new(shape, noise)?), info))
    }

    fn gain_for_mode(&mut self) -> Option<f64> {
        (self.config.mode == ChannelMode::Rayleigh).then(|| self.sample_gain())
    }

    /// Sends one tensor: `ẑ = z + η` (AWGN) or `ẑ = (h·z + η)/h` (Rayleigh with perfect
    /// receiver knowledge of `h`). Noise enters as a constant, so gradients pass through
    /// unchanged.
    pub fn transmit(&mut self, g: &mut Graph, z: Var) -> Result<(Var, TransmitInfo)> {
        let gain = self.gain_for_mode();
        self.transmit_with_gain(g, z, gain)
    }

    fn transmit_with_gain(&mut self, g: &mut Graph, z: Var, gain: Option<f64>) -> Result<(Var, TransmitInfo)> {
        let shape = g.shape(z).to_vec();
        match self.offset(&shape, gain)? {
            (None, info) => Ok((z, info)),
            (Some(noise), info) => Ok((g.add_const(z, &noise)?, info)),
        }
    }

    /// Sends the task features of one sample, sharing the fading draw when configured.
    pub fn transmit_all(&mut self, g: &mut Graph, zs: &[Var]) -> Result<Vec<(Var, TransmitInfo)>> {
        let shared = if self.config.shared_fading {
            Some(self.gain_for_mode())
        } else {
            None
        };
        zs.iter()
            .map(|&z| {
                let gain = match shared {
                    Some(h) => h,
                    None => self.gain_for_mode(),
                };
                self.transmit_with_gain(g, z, gain)
            })
            .collect()
    }

    /// Graph-free variant of [`Channel::transmit`].
    pub fn transmit_tensor(&mut self, z: &Tensor) -> Result<(Tensor, TransmitInfo)> {
        let gain = self.gain_for_mode();
        let (offset, info) = self.offset(z.shape(), gain)?;
        let out = match offset {
            None => z.clone(),
            Some(n) => {
                let data = z.data().iter().zip(n.data()).map(|(a, b)| a + b).collect();
                Tensor::new(z.shape(), data)?
            }
        };
        Ok((out, info))
    }
}

/// Normalises `z` to mean power `power` and passes it through `channel`.
pub fn normalize_and_transmit(
    g: &mut Graph,
    channel: &mut Channel,
    z: Var,
) -> Result<(Var, PowerScale, TransmitInfo)> {
    let (zn, scale) = g.power_normalize(z, channel.config().transmit_power)?;
    let (out, info) = channel.transmit(g, zn)?;
    Ok((out, scale, info))
}

/// `n` source pixels, `k` channel uses and `R = k/n`, all exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandwidthRatio {
    pub n: u64,
    pub k: Ratio<u64>,
    pub ratio: Ratio<u64>,
}

impl BandwidthRatio {
    pub fn as_f64(&self) -> f64 {
        *self.ratio.numer() as f64 / *self.ratio.denom() as f64
    }
}

fn checked_volume(op: &'static str, shape: [usize; 3]) -> Result<u64> {
    if shape.contains(&0) {
        return Err(Error::invalid(op, format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().map(|&d| d as u64).product())
}

/// Real-valued features pair into complex channel symbols, so `k` is half the
/// transmitted element count.
pub fn bandwidth_ratio(input: [usize; 3], transmitted: [usize; 3]) -> Result<BandwidthRatio> {
    let n = checked_volume("bandwidth_ratio", input)?;
    let k = Ratio::new(checked_volume("bandwidth_ratio", transmitted)?, 2);
    Ok(BandwidthRatio {
        n,
        k,
        ratio: k / n,
    })
}

/// Smallest-error channel count for a target ratio, clamped to at least 1.
pub fn solve_cds(target: f64, input: [usize; 3], out_h: usize, out_w: usize) -> Result<(usize, BandwidthRatio)> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::invalid("solve_cds", format!("target ratio {target} must be positive")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("solve_cds", "zero spatial extent"));
    }
    let n = checked_volume("solve_cds", input)? as f64;
    let c = (2.0 * target * n / (out_h * out_w) as f64).round().max(1.0) as usize;
    let achieved = bandwidth_ratio(input, [c, out_h, out_w])?;
    Ok((c, achieved))
}

/// Pair of 1×1 convolutions narrowing `C_out` to `C_ds` before the channel and
/// widening it back afterwards.
#[derive(Debug, Clone)]
pub struct BandwidthAdapter {
    pub down: Conv2d,
    pub up: Conv2d,
}

impl BandwidthAdapter {
    pub fn new(store: &mut ParamStore, prefix: &str, c_out: usize, c_ds: usize) -> Self {
        Self {
            down: Conv2d::new(store, &format!("{prefix}.down"), c_out, c_ds, 1, ConvGeom::UNIT),
            up: Conv2d::new(store, &format!("{prefix}.up"), c_ds, c_out, 1, ConvGeom::UNIT),
        }
    }

    pub fn c_ds(&self) -> usize {
        self.down.out_channels
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.down.params().into_iter().chain(self.up.params()).collect()
    }
}
