//! Restoration and disparity objectives, built on the autograd tape.
//!
//! All losses average over the batch dimension; the formulas below are per
//! stereo pair.
//!
//! * MSE: `1/(2CHW) Σ_k ‖Î^k − I^k‖²`.
//! * Perceptual: `1/(2 C_j H_j W_j) Σ_k ‖Φ(Î^k) − Φ(I^k)‖²` for a fixed extractor `Φ`.
//! * Deblurring: `w1 · MSE + w2 · perceptual`.
//! * Disparity: `Σ_k Σ_i 1/(H_i W_i) Σ_pixels M_i ⊙ (D̂_i − D_i)²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: 1.0, w2: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// A fixed mapping from images to feature maps.
pub trait FeatureExtractor: Send + Sync {
    /// `[C_j, H_j, W_j]` for an `[N, C, H, W]` input, or a contract error.
    fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 3]>;
    /// Append the mapping to the graph. The extractor's own weights are constants.
    fn apply(&self, g: &mut Graph, x: Var) -> Var;
}

/// `Φ = id`; turns the perceptual loss into the MSE loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 3]> {
        Ok([input[1], input[2], input[3]])
    }

    fn apply(&self, _g: &mut Graph, x: Var) -> Var {
        x
    }
}

/// Deterministic stand-in for a pretrained feature network: three stride-2
/// 3x3 convolutions (3 → 8 → 16 → 16 channels), each followed by a leaky
/// rectifier, with weights drawn from a fixed seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatures {
    layers: Vec<(Tensor, Tensor)>,
}

impl ConvFeatures {
    pub const DEFAULT_SEED: u64 = 0x5eed_f00d;
    const WIDTHS: [usize; 4] = [3, 8, 16, 16];
    const SLOPE: f64 = 0.1;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::WIDTHS
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let a = (3.0 / (cin * 9) as f64).sqrt();
                let weight = Tensor::from_fn([cout, cin, 3, 3], |_, _, _, _| rng.random_range(-a..=a));
                let bias = Tensor::from_fn([cout, 1, 1, 1], |_, _, _, _| rng.random_range(-0.1..=0.1));
                (weight, bias)
            })
            .collect();
        ConvFeatures { layers }
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn slope(&self) -> f64 {
        Self::SLOPE
    }
}

impl Default for ConvFeatures {
    fn default() -> Self {
        ConvFeatures::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for ConvFeatures {
    fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 3]> {
        if input[1] != 3 {
            return Err(Error::contract(format!("feature extractor expects 3 channels, got {}", input[1])));
        }
        let spec = ConvSpec::down();
        let (mut h, mut w) = (input[2], input[3]);
        for _ in &self.layers {
            if h == 0 || w == 0 {
                return Err(Error::contract("image too small for the feature extractor"));
            }
            h = spec.out_dim(h);
            w = spec.out_dim(w);
        }
        Ok([*Self::WIDTHS.last().expect("non-empty"), h, w])
    }

    fn apply(&self, g: &mut Graph, mut x: Var) -> Var {
        for (w, b) in &self.layers {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let y = g.conv(x, wv, Some(bv), ConvSpec::down());
            x = g.leaky_relu(y, Self::SLOPE);
        }
        x
    }
}

fn check_pairs(g: &Graph, restored: [Var; 2], sharp: [Var; 2]) -> Result<[usize; 4]> {
    let shape = g.shape(restored[0]);
    for v in [restored[1], sharp[0], sharp[1]] {
        if g.shape(v) != shape {
            return Err(Error::contract(format!(
                "loss operands differ in shape: {shape:?} vs {:?}",
                g.shape(v)
            )));
        }
    }
    Ok(shape)
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

/// Per-view sum of squared differences over both views.
fn view_sq_sum(g: &mut Graph, a: [Var; 2], b: [Var; 2]) -> Var {
    let terms: Vec<Var> = (0..2)
        .map(|k| {
            let d = g.sub(a[k], b[k]);
            g.sum_sq(d)
        })
        .collect();
    sum_all(g, &terms)
}

/// Restoration MSE over a (left, right) pair.
pub fn mse_loss(g: &mut Graph, restored: [Var; 2], sharp: [Var; 2]) -> Result<Var> {
    let [n, c, h, w] = check_pairs(g, restored, sharp)?;
    let s = view_sq_sum(g, restored, sharp);
    Ok(g.scale(s, 1.0 / (2 * n * c * h * w) as f64))
}

/// Feature-space MSE under `extractor`.
pub fn perceptual_loss(g: &mut Graph, restored: [Var; 2], sharp: [Var; 2], extractor: &dyn FeatureExtractor) -> Result<Var> {
    let shape = check_pairs(g, restored, sharp)?;
    let [cj, hj, wj] = extractor.output_dims(shape)?;
    let fr = [extractor.apply(g, restored[0]), extractor.apply(g, restored[1])];
    let fs = [extractor.apply(g, sharp[0]), extractor.apply(g, sharp[1])];
    let s = view_sq_sum(g, fr, fs);
    Ok(g.scale(s, 1.0 / (2 * shape[0] * cj * hj * wj) as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct DeblurLoss {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
}

/// `w1 · MSE + w2 · perceptual`, with the view sum counted once unless
/// `double_view_sum` asks for the literal per-view summation (which doubles
/// the value).
pub fn deblur_loss(
    g: &mut Graph,
    restored: [Var; 2],
    sharp: [Var; 2],
    weights: LossWeights,
    extractor: &dyn FeatureExtractor,
    double_view_sum: bool,
) -> Result<DeblurLoss> {
    let mse = mse_loss(g, restored, sharp)?;
    let perceptual = perceptual_loss(g, restored, sharp, extractor)?;
    let a = g.scale(mse, weights.w1);
    let b = g.scale(perceptual, weights.w2);
    let mut total = g.add(a, b);
    if double_view_sum {
        total = g.scale(total, 2.0);
    }
    Ok(DeblurLoss { total, mse, perceptual })
}

/// Masked multiscale disparity loss. `pred[k][i]` is view `k` at pyramid
/// level `i`, shaped `[N, 1, H_i, W_i]`; `gt` and `masks` match it. Each
/// level is normalised by `H_i W_i`, or by its valid-pixel count when
/// `masked_mean` is set.
pub fn disparity_loss(
    g: &mut Graph,
    pred: [&[Var]; 2],
    gt: [&[Tensor]; 2],
    masks: [&[Tensor]; 2],
    masked_mean: bool,
) -> Result<Var> {
    let mut terms = Vec::new();
    for k in 0..2 {
        if pred[k].len() != gt[k].len() || pred[k].len() != masks[k].len() || pred[k].is_empty() {
            return Err(Error::contract(format!(
                "pyramid depth mismatch: {} predictions, {} targets, {} masks",
                pred[k].len(),
                gt[k].len(),
                masks[k].len()
            )));
        }
        for ((&p, d), m) in pred[k].iter().zip(gt[k]).zip(masks[k]) {
            let shape = g.shape(p);
            if d.shape() != shape || m.shape() != shape || shape[1] != 1 {
                return Err(Error::contract(format!(
                    "disparity level shapes differ: {shape:?}, {:?}, {:?}",
                    d.shape(),
                    m.shape()
                )));
            }
            let [n, _, h, w] = shape;
            let norm = if masked_mean {
                let valid = m.sum();
                if valid == 0.0 {
                    0.0
                } else {
                    1.0 / valid
                }
            } else {
                1.0 / (n * h * w) as f64
            };
            let dv = g.input(d.clone());
            let diff = g.sub(p, dv);
            let masked = g.mul_const(diff, m.clone());
            let s = g.sum_sq(masked);
            terms.push(g.scale(s, norm));
        }
    }
    Ok(sum_all(g, &terms))
}

/// Coarse-scale supervision from a full-resolution disparity and mask
/// (`[N, 1, H, W]`): disparities are averaged over the valid pixels of each
/// block and rescaled to the coarse grid; a coarse pixel is valid only if
/// its whole block is. Returns `levels` entries, full resolution first.
pub fn gt_pyramid(disp: &Tensor, mask: &Tensor, levels: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let [n, c, h, w] = disp.shape();
    if c != 1 || mask.shape() != disp.shape() {
        return Err(Error::contract("disparity and mask must be matching single-channel tensors"));
    }
    let mut ds = vec![disp.clone()];
    let mut ms = vec![mask.clone()];
    for level in 1..levels {
        let f = 1 << level;
        if h % f != 0 || w % f != 0 {
            return Err(Error::contract(format!("{w}x{h} is not divisible by {f}")));
        }
        let (ho, wo) = (h / f, w / f);
        let mut d = Tensor::zeros([n, 1, ho, wo]);
        let mut m = Tensor::zeros([n, 1, ho, wo]);
        for b in 0..n {
            for yo in 0..ho {
                for xo in 0..wo {
                    let (mut sum, mut count) = (0.0, 0usize);
                    for y in yo * f..(yo + 1) * f {
                        for x in xo * f..(xo + 1) * f {
                            if mask.at(b, 0, y, x) != 0.0 {
                                sum += disp.at(b, 0, y, x);
                                count += 1;
                            }
                        }
                    }
                    if count > 0 {
                        d.set(b, 0, yo, xo, sum / count as f64 / f as f64);
                    }
                    m.set(b, 0, yo, xo, if count == f * f { 1.0 } else { 0.0 });
                }
            }
        }
        ds.push(d);
        ms.push(m);
    }
    Ok((ds, ms))
}
