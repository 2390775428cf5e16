//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the tape in reverse and accumulates gradients only for nodes that
//! transitively depend on a gradient-tracking leaf. Shape errors inside the
//! tape are programming errors and panic; public entry points validate
//! shapes before building a graph.

use crate::kernels::{self, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    MulConst {
        x: Var,
        mask: Tensor,
    },
    Blend {
        a: Var,
        b: Var,
        gate: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Upsample {
        x: Var,
        f: usize,
    },
    AvgPool {
        x: Var,
        f: usize,
    },
    Warp {
        src: Var,
        disp: Var,
        sign: f64,
    },
    SumSq {
        x: Var,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; gradients are not propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A leaf whose gradient is recorded by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(Op::Conv { x, w, b, spec }, value, tracked)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let tracked = self.tracked(x);
        self.push(Op::LeakyRelu { x, slope }, value, tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let tracked = self.tracked(x);
        self.push(Op::Sigmoid { x }, value, tracked)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let tracked = self.tracked(x);
        self.push(Op::Abs { x }, value, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Add { a, b }, value, tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub { a, b }, value, tracked)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let tracked = self.tracked(x);
        self.push(Op::Scale { x, s }, value, tracked)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Var {
        let value = self.value(x).zip_map(&mask, |a, m| a * m);
        let tracked = self.tracked(x);
        self.push(Op::MulConst { x, mask }, value, tracked)
    }

    /// `a * (1 - gate) + b * gate` with a single-channel gate broadcast over channels.
    pub fn blend(&mut self, a: Var, b: Var, gate: Var) -> Var {
        let (av, bv, gv) = (self.value(a), self.value(b), self.value(gate));
        let [n, c, h, w] = av.shape();
        assert_eq!(bv.shape(), av.shape(), "blend operand shapes");
        assert_eq!(gv.shape(), [n, 1, h, w], "blend gate shape");
        let value = Tensor::from_fn([n, c, h, w], |bn, ch, y, x| {
            let g = gv.at(bn, 0, y, x);
            av.at(bn, ch, y, x) * (1.0 - g) + bv.at(bn, ch, y, x) * g
        });
        let tracked = self.tracked(a) || self.tracked(b) || self.tracked(gate);
        self.push(Op::Blend { a, b, gate }, value, tracked)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let [n, _, h, w] = self.shape(xs[0]);
        let total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut out = Tensor::zeros([n, total, h, w]);
        for bn in 0..n {
            let mut offset = 0;
            for &v in xs {
                let t = self.value(v);
                assert_eq!([t.batch(), t.height(), t.width()], [n, h, w], "concat shapes");
                for c in 0..t.channels() {
                    out.plane_mut(bn, offset + c).copy_from_slice(t.plane(bn, c));
                }
                offset += t.channels();
            }
        }
        let tracked = xs.iter().any(|&v| self.tracked(v));
        self.push(Op::Concat { xs: xs.to_vec() }, out, tracked)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).channel_range(start, len);
        let tracked = self.tracked(x);
        self.push(Op::Slice { x, start, len }, value, tracked)
    }

    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let value = kernels::upsample_nearest(self.value(x), f);
        let tracked = self.tracked(x);
        self.push(Op::Upsample { x, f }, value, tracked)
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        if f == 1 {
            return x;
        }
        let value = kernels::avg_pool(self.value(x), f);
        let tracked = self.tracked(x);
        self.push(Op::AvgPool { x, f }, value, tracked)
    }

    /// Row-wise backward warp; `sign` is -1 when the target is the left view.
    pub fn warp(&mut self, src: Var, disp: Var, sign: f64) -> Var {
        let value = kernels::warp_forward(self.value(src), self.value(disp), sign);
        let tracked = self.tracked(src) || self.tracked(disp);
        self.push(Op::Warp { src, disp, sign }, value, tracked)
    }

    /// Sum of squares, as a `[1, 1, 1, 1]` scalar.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let tracked = self.tracked(x);
        self.push(Op::SumSq { x }, Tensor::scalar(s), tracked)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.data()[0]
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, spec } => {
                    let xv = self.value(*x);
                    if self.tracked(*x) {
                        let gin = kernels::conv2d_backward_input(&g, self.value(*w), xv.shape(), *spec);
                        acc(&mut grads, *x, gin);
                    }
                    let need_b = b.is_some_and(|b| self.tracked(b));
                    if self.tracked(*w) || need_b {
                        let (gw, gb) = kernels::conv2d_backward_params(&g, xv, self.value(*w).shape(), *spec);
                        if self.tracked(*w) {
                            acc(&mut grads, *w, gw);
                        }
                        if let Some(b) = b.filter(|_| need_b) {
                            acc(&mut grads, b, gb);
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = self.value(*x).zip_map(&g, |v, gv| if v > 0.0 { gv } else { slope * gv });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let gx = node.value.zip_map(&g, |s, gv| gv * s * (1.0 - s));
                    acc(&mut grads, *x, gx);
                }
                Op::Abs { x } => {
                    let gx = self.value(*x).zip_map(&g, |v, gv| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.tracked(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale { x, s } => acc(&mut grads, *x, g.map(|v| v * s)),
                Op::MulConst { x, mask } => acc(&mut grads, *x, g.zip_map(mask, |a, m| a * m)),
                Op::Blend { a, b, gate } => {
                    let (av, bv, gv) = (self.value(*a), self.value(*b), self.value(*gate));
                    let [n, c, h, w] = av.shape();
                    if self.tracked(*a) {
                        let ga = Tensor::from_fn([n, c, h, w], |bn, ch, y, x| g.at(bn, ch, y, x) * (1.0 - gv.at(bn, 0, y, x)));
                        acc(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = Tensor::from_fn([n, c, h, w], |bn, ch, y, x| g.at(bn, ch, y, x) * gv.at(bn, 0, y, x));
                        acc(&mut grads, *b, gb);
                    }
                    if self.tracked(*gate) {
                        let gg = Tensor::from_fn([n, 1, h, w], |bn, _, y, x| {
                            (0..c)
                                .map(|ch| g.at(bn, ch, y, x) * (bv.at(bn, ch, y, x) - av.at(bn, ch, y, x)))
                                .sum()
                        });
                        acc(&mut grads, *gate, gg);
                    }
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &v in xs {
                        let c = self.shape(v)[1];
                        if self.tracked(v) {
                            acc(&mut grads, v, g.channel_range(offset, c));
                        }
                        offset += c;
                    }
                }
                Op::Slice { x, start, len } => {
                    let [n, c, h, w] = self.shape(*x);
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for bn in 0..n {
                        for ch in 0..*len {
                            gx.plane_mut(bn, start + ch).copy_from_slice(g.plane(bn, ch));
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Upsample { x, f } => acc(&mut grads, *x, kernels::upsample_nearest_backward(&g, *f)),
                Op::AvgPool { x, f } => acc(&mut grads, *x, kernels::avg_pool_backward(&g, *f)),
                Op::Warp { src, disp, sign } => {
                    let (gs, gd) = kernels::warp_backward(&g, self.value(*src), self.value(*disp), *sign);
                    if self.tracked(*src) {
                        acc(&mut grads, *src, gs);
                    }
                    if self.tracked(*disp) {
                        acc(&mut grads, *disp, gd);
                    }
                }
                Op::SumSq { x } => {
                    let s = g.data()[0];
                    acc(&mut grads, *x, self.value(*x).map(|v| 2.0 * v * s));
                }
            }
        }
        Grads { grads }
    }
}
