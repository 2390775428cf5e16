//! The stereo deblurring network.
//!
//! Three subnetworks share one parameter store, told apart by name prefix:
//!
//! * `deblur.*`: per-view encoder/decoder used with identical weights for
//!   both views. Encoder: full → 1/2 → 1/4 with strided 3x3 convolutions,
//!   residual blocks, atrous residual blocks and a context module. Decoder:
//!   nearest upsampling + 3x3 convolution with additive skips, and a
//!   zero-initialised output convolution added to the input image.
//! * `disp.*`: takes the concatenated pair down to 1/8 and back up,
//!   predicting left and right disparities at every scale.
//! * `fusion.*`: gate network, one depth-aware stack per view and the 1x1
//!   fusion convolution, all at 1/4 scale.

mod checkpoint;
mod layers;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DisparityMap, Scale, View};
use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, read_header, write_checkpoint, Checkpoint, CheckpointHeader, ParamInfo};
pub use layers::{
    context_module, davanet_forward, deblur_decode, deblur_encode, deblurnet_forward, depth_aware, dispbinet_forward, fuse,
    gate_map, residual_block, single_rate_block, DepthStack, DispOutput, Encoded, StereoVars,
};
pub use params::{Builder, Init, ParamStore, Subnet};

/// Replacement used for the context module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    /// Parallel dilated branches.
    MultiRate,
    /// A single-path block of the same depth (ablation).
    SingleRate,
}

/// Architecture hyper-parameters. The deblurring encoder always downsamples
/// twice and the disparity encoder three times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub disp_width: usize,
    pub blocks_per_level: usize,
    pub atrous_dilations: Vec<usize>,
    pub context_rates: Vec<usize>,
    pub context: ContextKind,
    pub gate_width: usize,
    pub depth_width: usize,
    /// Number of disparity outputs, finest (full resolution) first.
    pub disp_scales: usize,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            disp_width: 16,
            blocks_per_level: 1,
            atrous_dilations: vec![2, 4],
            context_rates: vec![1, 2, 3, 4],
            context: ContextKind::MultiRate,
            gate_width: 16,
            depth_width: 16,
            disp_scales: 4,
            leaky_slope: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Wider preset in the spirit of the published model size. The widths
    /// are not calibrated against any reference parameter count.
    pub fn paper_scale() -> Self {
        ModelConfig {
            base_width: 32,
            disp_width: 32,
            blocks_per_level: 2,
            gate_width: 32,
            depth_width: 32,
            ..ModelConfig::default()
        }
    }

    /// Same architecture family with every width set to `width`.
    pub fn with_width(width: usize) -> Self {
        ModelConfig {
            base_width: width,
            disp_width: width,
            gate_width: width,
            depth_width: width,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_width", self.base_width),
            ("disp_width", self.disp_width),
            ("gate_width", self.gate_width),
            ("depth_width", self.depth_width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(1..=4).contains(&self.disp_scales) {
            return Err(Error::config("disp_scales must be between 1 and 4"));
        }
        if self.context_rates.is_empty() || self.context_rates.contains(&0) {
            return Err(Error::config("context_rates must be non-empty positive rates"));
        }
        let k = self.context_rates.len();
        if !(4 * self.base_width).is_multiple_of(k) || !(4 * self.disp_width).is_multiple_of(k) {
            return Err(Error::config(format!(
                "context module widths must be divisible by the {k} branches"
            )));
        }
        if self.atrous_dilations.contains(&0) {
            return Err(Error::config("atrous dilations must be at least 1"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("leaky_slope must be finite"));
        }
        Ok(())
    }
}

/// Forward-path modifications used by the ablation variants and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace the gate map by this constant.
    pub gate: Option<f64>,
    /// Feed zeros in place of the depth-aware features.
    pub zero_depth: bool,
    /// Use the reference features in place of the view-aggregated ones.
    pub no_view_aggregation: bool,
}

/// Result of a stereo forward pass on concrete tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub restored_left: Tensor,
    pub restored_right: Tensor,
    /// `[N, 1, H/s, W/s]` disparity tensors, finest first.
    pub disp_left: Vec<Tensor>,
    pub disp_right: Vec<Tensor>,
    /// `[N, 1, H/4, W/4]` gates.
    pub gate_left: Tensor,
    pub gate_right: Tensor,
}

impl NetOutput {
    pub fn restored(&self, view: View) -> &Tensor {
        match view {
            View::Left => &self.restored_left,
            View::Right => &self.restored_right,
        }
    }

    /// Disparity of batch item `n` at pyramid level `level` (0 = full).
    pub fn disparity(&self, view: View, level: usize, n: usize) -> Result<DisparityMap> {
        let pyr = match view {
            View::Left => &self.disp_left,
            View::Right => &self.disp_right,
        };
        let t = pyr
            .get(level)
            .ok_or_else(|| Error::contract(format!("no disparity output at level {level}")))?
            .item(n);
        DisparityMap::new(t.width(), t.height(), t.into_data(), Scale::from_divisor(1 << level)?, view)
    }
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Davanet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Davanet {
    /// Freshly initialised model; the layout is defined by one forward pass.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut b = Builder::creating(&mut params, config.init_seed, config.leaky_slope);
            let l = b.input(Tensor::zeros([1, 3, 16, 16]));
            let r = b.input(Tensor::zeros([1, 3, 16, 16]));
            davanet_forward(&mut b, &config, l, r, &ForwardOptions::default())?;
        }
        Ok(Davanet { config, params })
    }

    pub fn builder(&self, trainable: &[Subnet]) -> Builder<'_> {
        Builder::new(&self.params, trainable, self.config.leaky_slope)
    }

    pub fn count(&self, subnet: Subnet) -> usize {
        self.params.count(subnet)
    }

    /// Restore each view independently with the deblurring network.
    pub fn deblur(&self, image: &Tensor) -> Result<Tensor> {
        let mut b = self.builder(&[]);
        let x = b.input(image.clone());
        let (restored, _) = deblurnet_forward(&mut b, &self.config, x)?;
        Ok(b.graph.value(restored).clone())
    }

    pub fn forward(&self, left: &Tensor, right: &Tensor, opts: &ForwardOptions) -> Result<NetOutput> {
        let mut b = self.builder(&[]);
        let l = b.input(left.clone());
        let r = b.input(right.clone());
        let out = davanet_forward(&mut b, &self.config, l, r, opts)?;
        let g = &b.graph;
        Ok(NetOutput {
            restored_left: g.value(out.restored_left).clone(),
            restored_right: g.value(out.restored_right).clone(),
            disp_left: out.disp.left.iter().map(|&v| g.value(v).clone()).collect(),
            disp_right: out.disp.right.iter().map(|&v| g.value(v).clone()).collect(),
            gate_left: g.value(out.gate_left).clone(),
            gate_right: g.value(out.gate_right).clone(),
        })
    }
}
