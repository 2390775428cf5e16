//! Graph-level building blocks and the subnetwork forward passes.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::geometry::View;
use crate::kernels::ConvSpec;

use super::params::{Builder, Init};
use super::{ContextKind, ForwardOptions, ModelConfig};

fn check_spatial(b: &Builder, x: Var, divisor: usize, what: &str) -> Result<()> {
    let [_, _, h, w] = b.graph.shape(x);
    if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
        return Err(Error::contract(format!(
            "{what}: {w}x{h} input must have sides divisible by {divisor}"
        )));
    }
    Ok(())
}

/// `x + B(x)` with `B` two dilated 3x3 convolutions around a leaky rectifier.
pub fn residual_block(b: &mut Builder, x: Var, name: &str, dilation: usize) -> Result<Var> {
    if dilation == 0 {
        return Err(Error::contract("dilation must be at least 1"));
    }
    let c = b.channels(x);
    let spec = ConvSpec::same(3, dilation);
    let h = b.conv_act(x, &format!("{name}.c0"), c, spec)?;
    let h = b.conv(h, &format!("{name}.c1"), c, spec, Init::FanIn(1.0))?;
    Ok(b.graph.add(x, h))
}

/// Parallel dilated 3x3 branches of width `C / rates.len()` concatenated
/// and fused back to `C` channels by a 1x1 convolution.
pub fn context_module(b: &mut Builder, x: Var, name: &str, rates: &[usize]) -> Result<Var> {
    let c = b.channels(x);
    if rates.is_empty() || !c.is_multiple_of(rates.len()) {
        return Err(Error::contract(format!(
            "context module: {c} channels cannot be split over {} branches",
            rates.len()
        )));
    }
    let width = c / rates.len();
    let mut branches = Vec::with_capacity(rates.len());
    for (i, &r) in rates.iter().enumerate() {
        if r == 0 {
            return Err(Error::contract("context rates must be at least 1"));
        }
        branches.push(b.conv_act(x, &format!("{name}.branch{i}"), width, ConvSpec::same(3, r))?);
    }
    let cat = b.graph.concat(&branches);
    b.conv(cat, &format!("{name}.fuse"), c, ConvSpec::same(1, 1), Init::FanIn(1.0))
}

/// One-path replacement for the context module with the same depth.
pub fn single_rate_block(b: &mut Builder, x: Var, name: &str) -> Result<Var> {
    let c = b.channels(x);
    let h = b.conv_act(x, &format!("{name}.c0"), c, ConvSpec::same(3, 1))?;
    b.conv(h, &format!("{name}.fuse"), c, ConvSpec::same(1, 1), Init::FanIn(1.0))
}

fn context(b: &mut Builder, x: Var, name: &str, kind: ContextKind, rates: &[usize]) -> Result<Var> {
    let y = match kind {
        ContextKind::MultiRate => context_module(b, x, name, rates)?,
        ContextKind::SingleRate => single_rate_block(b, x, name)?,
    };
    Ok(b.graph.add(x, y))
}

fn res_stack(b: &mut Builder, mut x: Var, name: &str, count: usize) -> Result<Var> {
    for i in 0..count {
        x = residual_block(b, x, &format!("{name}.res{i}"), 1)?;
    }
    Ok(x)
}

/// Nearest-neighbour x2 upsampling followed by a 3x3 convolution.
fn up(b: &mut Builder, x: Var, name: &str, cout: usize) -> Result<Var> {
    let u = b.graph.upsample(x, 2);
    b.conv_act(u, name, cout, ConvSpec::same(3, 1))
}

/// Encoder output of the deblurring network for one view.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Features at 1/4 resolution.
    pub features: Var,
    pub skip_full: Var,
    pub skip_half: Var,
}

pub fn deblur_encode(b: &mut Builder, cfg: &ModelConfig, image: Var) -> Result<Encoded> {
    check_spatial(b, image, 4, "deblurring network")?;
    if b.channels(image) != 3 {
        return Err(Error::contract("deblurring network expects 3-channel images"));
    }
    let c = cfg.base_width;
    let n = cfg.blocks_per_level;
    let x = b.conv_act(image, "deblur.enc0", c, ConvSpec::same(3, 1))?;
    let skip_full = res_stack(b, x, "deblur.enc0", n)?;
    let x = b.conv_act(skip_full, "deblur.enc1", 2 * c, ConvSpec::down())?;
    let skip_half = res_stack(b, x, "deblur.enc1", n)?;
    let x = b.conv_act(skip_half, "deblur.enc2", 4 * c, ConvSpec::down())?;
    let mut x = res_stack(b, x, "deblur.enc2", n)?;
    for (i, &d) in cfg.atrous_dilations.iter().enumerate() {
        x = residual_block(b, x, &format!("deblur.atrous{i}"), d)?;
    }
    let features = context(b, x, "deblur.context", cfg.context, &cfg.context_rates)?;
    Ok(Encoded {
        features,
        skip_full,
        skip_half,
    })
}

/// Decode (possibly fused) quarter-scale features into `image + residual`.
pub fn deblur_decode(b: &mut Builder, cfg: &ModelConfig, image: Var, features: Var, enc: &Encoded) -> Result<Var> {
    let c = cfg.base_width;
    let n = cfg.blocks_per_level;
    let x = res_stack(b, features, "deblur.dec2", n)?;
    let x = up(b, x, "deblur.up1", 2 * c)?;
    let x = b.graph.add(x, enc.skip_half);
    let x = res_stack(b, x, "deblur.dec1", n)?;
    let x = up(b, x, "deblur.up0", c)?;
    let x = b.graph.add(x, enc.skip_full);
    let x = res_stack(b, x, "deblur.dec0", n)?;
    let residual = b.conv(x, "deblur.out", 3, ConvSpec::same(3, 1), Init::Zero)?;
    Ok(b.graph.add(image, residual))
}

/// Single-view deblurring: returns the restored image and the encoder output.
pub fn deblurnet_forward(b: &mut Builder, cfg: &ModelConfig, image: Var) -> Result<(Var, Encoded)> {
    let enc = deblur_encode(b, cfg, image)?;
    let restored = deblur_decode(b, cfg, image, enc.features, &enc)?;
    Ok((restored, enc))
}

/// Bidirectional disparity pyramids, finest (full resolution) first.
#[derive(Debug, Clone)]
pub struct DispOutput {
    pub left: Vec<Var>,
    pub right: Vec<Var>,
    /// Second-to-last full-resolution features.
    pub features: Var,
}

pub fn dispbinet_forward(b: &mut Builder, cfg: &ModelConfig, left: Var, right: Var) -> Result<DispOutput> {
    if b.graph.shape(left) != b.graph.shape(right) {
        return Err(Error::contract("disparity network inputs differ in shape"));
    }
    check_spatial(b, left, 8, "disparity network")?;
    let c = cfg.disp_width;
    let n = cfg.blocks_per_level;
    let pair = b.graph.concat(&[left, right]);
    let x = b.conv_act(pair, "disp.enc0", c, ConvSpec::same(3, 1))?;
    let s0 = res_stack(b, x, "disp.enc0", n)?;
    let x = b.conv_act(s0, "disp.enc1", 2 * c, ConvSpec::down())?;
    let s1 = res_stack(b, x, "disp.enc1", n)?;
    let x = b.conv_act(s1, "disp.enc2", 4 * c, ConvSpec::down())?;
    let s2 = res_stack(b, x, "disp.enc2", n)?;
    let x = b.conv_act(s2, "disp.enc3", 4 * c, ConvSpec::down())?;
    let mut x = res_stack(b, x, "disp.enc3", n)?;
    for (i, &d) in cfg.atrous_dilations.iter().enumerate() {
        x = residual_block(b, x, &format!("disp.atrous{i}"), d)?;
    }
    let x3 = context(b, x, "disp.context", ContextKind::MultiRate, &cfg.context_rates)?;

    let head = |b: &mut Builder, x: Var, level: usize| {
        b.conv(x, &format!("disp.head{level}"), 2, ConvSpec::same(3, 1), Init::Zero)
    };
    let mut heads = vec![None; 4];
    if cfg.disp_scales >= 4 {
        heads[3] = Some(head(b, x3, 3)?);
    }
    let x = up(b, x3, "disp.up2", 4 * c)?;
    let x = b.graph.add(x, s2);
    let x2 = res_stack(b, x, "disp.dec2", n)?;
    if cfg.disp_scales >= 3 {
        heads[2] = Some(head(b, x2, 2)?);
    }
    let x = up(b, x2, "disp.up1", 2 * c)?;
    let x = b.graph.add(x, s1);
    let x1 = res_stack(b, x, "disp.dec1", n)?;
    if cfg.disp_scales >= 2 {
        heads[1] = Some(head(b, x1, 1)?);
    }
    let x = up(b, x1, "disp.up0", c)?;
    let x = b.graph.add(x, s0);
    let features = res_stack(b, x, "disp.dec0", n)?;
    heads[0] = Some(head(b, features, 0)?);

    let mut out = DispOutput {
        left: Vec::new(),
        right: Vec::new(),
        features,
    };
    for h in heads.into_iter().flatten() {
        let l = b.graph.slice_channels(h, 0, 1);
        let r = b.graph.slice_channels(h, 1, 1);
        out.left.push(l);
        out.right.push(r);
    }
    Ok(out)
}

/// Soft gate in `[0, 1]` from the absolute difference between a reference
/// image and the other view warped onto it.
pub fn gate_map(b: &mut Builder, cfg: &ModelConfig, reference: Var, warped_other: Var) -> Result<Var> {
    if b.graph.shape(reference) != b.graph.shape(warped_other) {
        return Err(Error::contract("gate inputs differ in shape"));
    }
    let diff = b.graph.sub(reference, warped_other);
    let mut x = b.graph.abs(diff);
    for i in 0..4 {
        x = b.conv_act(x, &format!("fusion.gate.c{i}"), cfg.gate_width, ConvSpec::same(3, 1))?;
    }
    let logits = b.conv(x, "fusion.gate.c4", 1, ConvSpec::same(3, 1), Init::FanIn(1.0))?;
    Ok(b.graph.sigmoid(logits))
}

/// Handle on one view's depth-aware stack; each view owns its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthStack {
    view: View,
}

impl DepthStack {
    pub fn of(view: View) -> Self {
        DepthStack { view }
    }

    pub fn view(self) -> View {
        self.view
    }

    pub fn prefix(self) -> &'static str {
        match self.view {
            View::Left => "fusion.depth_left",
            View::Right => "fusion.depth_right",
        }
    }
}

/// Three convolutions over `[disparity, F^D]` producing depth features.
pub fn depth_aware(b: &mut Builder, cfg: &ModelConfig, disp: Var, f_d: Var, view: View, stack: DepthStack) -> Result<Var> {
    if stack.view() != view {
        return Err(Error::contract(format!(
            "the {:?} depth stack cannot serve the {view:?} view",
            stack.view()
        )));
    }
    let [n, _, h, w] = b.graph.shape(disp);
    let [fn_, _, fh, fw] = b.graph.shape(f_d);
    if b.channels(disp) != 1 || (n, h, w) != (fn_, fh, fw) {
        return Err(Error::contract("depth-aware inputs must be a 1-channel disparity and features of equal size"));
    }
    let p = stack.prefix();
    let x = b.graph.concat(&[disp, f_d]);
    let x = b.conv_act(x, &format!("{p}.c0"), cfg.depth_width, ConvSpec::same(3, 1))?;
    let x = b.conv_act(x, &format!("{p}.c1"), cfg.depth_width, ConvSpec::same(3, 1))?;
    b.conv(x, &format!("{p}.c2"), cfg.depth_width, ConvSpec::same(3, 1), Init::FanIn(1.0))
}

/// Gated view aggregation followed by the 1x1 fusion convolution.
///
/// Returns the fused features and the view-aggregated features
/// `f_ref * (1 - G) + f_other * G`. The fusion convolution starts as a copy
/// of `f_ref`, so an untrained fusion stage passes encoder features through.
pub fn fuse(b: &mut Builder, f_ref: Var, f_other_warped: Var, gate: Var, f_depth: Var) -> Result<(Var, Var)> {
    let [n, c, h, w] = b.graph.shape(f_ref);
    if b.graph.shape(f_other_warped) != [n, c, h, w] {
        return Err(Error::contract("fused feature maps differ in shape"));
    }
    if b.graph.shape(gate) != [n, 1, h, w] {
        return Err(Error::contract("gate must be single-channel at the feature scale"));
    }
    let [dn, _, dh, dw] = b.graph.shape(f_depth);
    if (dn, dh, dw) != (n, h, w) {
        return Err(Error::contract("depth features are at a different scale"));
    }
    let views = b.graph.blend(f_ref, f_other_warped, gate);
    fuse_views(b, f_ref, views, f_depth)
}

fn fuse_views(b: &mut Builder, f_ref: Var, views: Var, f_depth: Var) -> Result<(Var, Var)> {
    let c = b.channels(f_ref);
    let cat = b.graph.concat(&[f_ref, views, f_depth]);
    let fused = b.conv(cat, "fusion.fuse", c, ConvSpec::same(1, 1), Init::Identity { offset: 0 })?;
    Ok((fused, views))
}

/// Graph outputs of the full stereo forward pass.
#[derive(Debug, Clone)]
pub struct StereoVars {
    pub restored_left: Var,
    pub restored_right: Var,
    pub disp: DispOutput,
    pub gate_left: Var,
    pub gate_right: Var,
}

struct ViewInputs {
    image: Var,
    image_q: Var,
    enc: Encoded,
}

#[allow(clippy::too_many_arguments)]
fn fuse_view(
    b: &mut Builder,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
    view: View,
    own: &ViewInputs,
    other: &ViewInputs,
    disp_q: Var,
    f_d_q: Var,
) -> Result<(Var, Var)> {
    let sign = view.sample_sign();
    let warped_image = b.graph.warp(other.image_q, disp_q, sign);
    let mut gate = gate_map(b, cfg, own.image_q, warped_image)?;
    if let Some(g) = opts.gate {
        let t = crate::tensor::Tensor::full(b.graph.shape(gate), g);
        gate = b.input(t);
    }
    let mut f_depth = depth_aware(b, cfg, disp_q, f_d_q, view, DepthStack::of(view))?;
    if opts.zero_depth {
        f_depth = b.input(crate::tensor::Tensor::zeros(b.graph.shape(f_depth)));
    }
    let fused = if opts.no_view_aggregation {
        fuse_views(b, own.enc.features, own.enc.features, f_depth)?.0
    } else {
        let warped = b.graph.warp(other.enc.features, disp_q, sign);
        fuse(b, own.enc.features, warped, gate, f_depth)?.0
    };
    let restored = deblur_decode(b, cfg, own.image, fused, &own.enc)?;
    Ok((restored, gate))
}

/// Full stereo pass: shared-weight encoders, bidirectional disparities,
/// per-view fusion at 1/4 scale (right view mirrored) and decoding.
pub fn davanet_forward(b: &mut Builder, cfg: &ModelConfig, left: Var, right: Var, opts: &ForwardOptions) -> Result<StereoVars> {
    if b.graph.shape(left) != b.graph.shape(right) {
        return Err(Error::contract("left and right images differ in shape"));
    }
    check_spatial(b, left, 8, "stereo network")?;
    let enc_l = deblur_encode(b, cfg, left)?;
    let enc_r = deblur_encode(b, cfg, right)?;
    let disp = dispbinet_forward(b, cfg, left, right)?;
    let quarter = |b: &mut Builder, x: Var| b.graph.avg_pool(x, 4);
    let f_d_q = quarter(b, disp.features);
    let dl = quarter(b, disp.left[0]);
    let dl = b.graph.scale(dl, 0.25);
    let dr = quarter(b, disp.right[0]);
    let dr = b.graph.scale(dr, 0.25);
    let views = [
        ViewInputs {
            image: left,
            image_q: quarter(b, left),
            enc: enc_l,
        },
        ViewInputs {
            image: right,
            image_q: quarter(b, right),
            enc: enc_r,
        },
    ];
    let (restored_left, gate_left) = fuse_view(b, cfg, opts, View::Left, &views[0], &views[1], dl, f_d_q)?;
    let (restored_right, gate_right) = fuse_view(b, cfg, opts, View::Right, &views[1], &views[0], dr, f_d_q)?;
    Ok(StereoVars {
        restored_left,
        restored_right,
        disp,
        gate_left,
        gate_right,
    })
}
