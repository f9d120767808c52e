//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Graph` is built per forward pass (one clip, one frame, or one loss
//! evaluation), values are computed eagerly, and `backward` walks the tape
//! in reverse. The op set is exactly what the codec pipeline needs; heavy
//! kernels live in `kernels` and are shared with the inference path, so
//! training and coding run the same arithmetic.
//!
//! Quantization ops follow the two-path training convention: the rate path
//! sees additive-noise surrogates supplied as leaves, while `ste_round`
//! rounds in the forward pass and passes gradients through unchanged.

use crate::dmath;
use crate::kernels::{self, Scalar};
use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, Ix4, IxDyn};
use std::collections::HashMap;

/// Probability floor for rate terms; keeps -log2(p) finite and bounds the
/// gradient. Gradients still pass when they push the probability upward.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3 { x: NodeId, w: NodeId, stride: usize },
    ConvT3 { x: NodeId, w: NodeId },
    BiasAdd { x: NodeId, b: NodeId },
    ScaleChan { x: NodeId, s: NodeId },
    Recip { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    Silu { x: NodeId },
    Exp { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Reshape { x: NodeId },
    Concat { parts: Vec<NodeId> },
    SliceChan { x: NodeId, from: usize, to: usize },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    Warp { src: NodeId, flow: NodeId },
    Blur11 { x: NodeId },
    SteRound { x: NodeId },
    ClampMin { x: NodeId, c: f64 },
    PowConst { x: NodeId, c: f64 },
    GaussianBits { t: NodeId, mu: NodeId, sigma: NodeId },
    ChanLinear { x: NodeId, w: NodeId, b: NodeId },
    NegLog2 { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MseLoss { a: NodeId, b: NodeId },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<usize, NodeId>,
    param_of_node: HashMap<usize, usize>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            param_of_node: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap().to_f64()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<F>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Leaf backed by a named parameter slot; deduplicated per graph so a
    /// parameter used by many layers accumulates one gradient.
    pub fn param_leaf(&mut self, param_id: usize, value: ArrayD<F>, trainable: bool) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&param_id) {
            return id;
        }
        let id = self.push(value, Op::Leaf, trainable);
        self.param_nodes.insert(param_id, id);
        self.param_of_node.insert(id.0, param_id);
        id
    }

    pub fn conv3(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let xv = self.view3(x);
        let wv = self.view4(w);
        let out = kernels::conv3_fwd(&xv, &wv, stride).into_dyn();
        let ng = self.any_grad(&[x, w]);
        self.push(out, Op::Conv3 { x, w, stride }, ng)
    }

    pub fn convt3(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.view3(x);
        let wv = self.view4(w);
        let out = kernels::convt3_fwd(&xv, &wv).into_dyn();
        let ng = self.any_grad(&[x, w]);
        self.push(out, Op::ConvT3 { x, w }, ng)
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let c = self.nodes[x.0].value.shape()[0];
        assert_eq!(self.nodes[b.0].value.len(), c, "bias length mismatch");
        let mut out = self.nodes[x.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let bs = bv.as_slice().unwrap();
        for (ci, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
            lane.mapv_inplace(|v| v + bs[ci]);
        }
        let ng = self.any_grad(&[x, b]);
        self.push(out, Op::BiasAdd { x, b }, ng)
    }

    /// Per-channel scaling: x (C, ...) * s (C).
    pub fn scale_chan(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let c = self.nodes[x.0].value.shape()[0];
        assert_eq!(self.nodes[s.0].value.len(), c, "scale length mismatch");
        let mut out = self.nodes[x.0].value.clone();
        let sv = self.nodes[s.0].value.clone();
        let ss = sv.as_slice().unwrap();
        for (ci, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
            lane.mapv_inplace(|v| v * ss[ci]);
        }
        let ng = self.any_grad(&[x, s]);
        self.push(out, Op::ScaleChan { x, s }, ng)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| F::one() / v);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Recip { x }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Mul { a, b }, ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Div { a, b }, ng)
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let out = self.nodes[x.0].value.mapv(|v| v * cf);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::ScaleConst { x, c }, ng)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let out = self.nodes[x.0].value.mapv(|v| v + cf);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::AddConst { x }, ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v * sigmoid_f(v));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Silu { x }, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.exp());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Exp { x }, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.tanh());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Tanh { x }, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(sigmoid_f);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(softplus_f);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Softplus { x }, ng)
    }

    /// Reinterpret x with a new shape of identical element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x.0].value.as_standard_layout().into_owned();
        let n: usize = shape.iter().product();
        assert_eq!(v.len(), n, "reshape element count mismatch");
        let out = v.into_shape_with_order(IxDyn(shape)).expect("reshape");
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, Op::Reshape { x }, ng)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<F>> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat shape mismatch");
        let ng = self.any_grad(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_chan(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let out = self.nodes[x.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(from..to))
            .to_owned();
        let ng = self.any_grad(&[x]);
        self.push(out, Op::SliceChan { x, from, to }, ng)
    }

    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.view3(x);
        let out = kernels::avgpool2_fwd(&xv).into_dyn();
        let ng = self.any_grad(&[x]);
        self.push(out, Op::AvgPool2 { x }, ng)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.view3(x);
        let out = kernels::upsample2_fwd(&xv).into_dyn();
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Upsample2 { x }, ng)
    }

    pub fn warp(&mut self, src: NodeId, flow: NodeId) -> NodeId {
        let sv = self.view3(src);
        let fv = self.view3(flow);
        let out = kernels::warp_fwd(&sv, &fv).into_dyn();
        let ng = self.any_grad(&[src, flow]);
        self.push(out, Op::Warp { src, flow }, ng)
    }

    /// Forward rounding, identity gradient.
    /// Depthwise 11-tap Gaussian blur (sigma 1.5, zero padding).
    pub fn blur11(&mut self, x: NodeId) -> NodeId {
        let xv = self.view3(x);
        let out = kernels::blur11_fwd(&xv).into_dyn();
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Blur11 { x }, ng)
    }

    pub fn ste_round(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.round());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::SteRound { x }, ng)
    }

    /// Lower bound with the pass-up rule: below the bound, gradients that
    /// would increase x still pass so the value can recover.
    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let out = self.nodes[x.0].value.mapv(|v| if v < cf { cf } else { v });
        let ng = self.any_grad(&[x]);
        self.push(out, Op::ClampMin { x, c }, ng)
    }

    /// x^c for strictly positive x.
    pub fn pow_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let out = self.nodes[x.0].value.mapv(|v| v.powf(cf));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::PowConst { x, c }, ng)
    }

    /// Elementwise coding cost in bits of the unit-width bin centred at t
    /// under N(mu, sigma^2): -log2(Phi(hi) - Phi(lo)) with a probability
    /// floor. t may be continuous (noise-relaxed training) or integer
    /// symbols (evaluation).
    pub fn gaussian_bits(&mut self, t: NodeId, mu: NodeId, sigma: NodeId) -> NodeId {
        let shape = self.nodes[t.0].value.raw_dim();
        assert_eq!(shape, self.nodes[mu.0].value.raw_dim());
        assert_eq!(shape, self.nodes[sigma.0].value.raw_dim());
        let tv = &self.nodes[t.0].value;
        let mv = &self.nodes[mu.0].value;
        let sv = &self.nodes[sigma.0].value;
        let mut out = ArrayD::<F>::zeros(shape);
        ndarray::Zip::from(&mut out)
            .and(tv)
            .and(mv)
            .and(sv)
            .for_each(|o, &t, &m, &s| {
                let p = gaussian_bin_prob(t.to_f64(), m.to_f64(), s.to_f64());
                // f64::max drops NaN; keep it so a poisoned latent poisons the rate
                let bits = if p.is_nan() { f64::NAN } else { -dmath::det_log2(p.max(PROB_FLOOR)) };
                *o = F::from_f64(bits);
            });
        let ng = self.any_grad(&[t, mu, sigma]);
        self.push(out, Op::GaussianBits { t, mu, sigma }, ng)
    }

    /// Batched per-channel linear map: x (C, din, N), w (C, dout, din),
    /// b (C, dout) -> (C, dout, N). Used by the factorized CDF network.
    pub fn chan_linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xd = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let wd = self.nodes[w.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bd = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (c, din, n) = xd.dim();
        let (cw, dout, dinw) = wd.dim();
        assert!(c == cw && din == dinw, "chan_linear shape mismatch");
        let mut out = ndarray::Array3::<F>::zeros((c, dout, n));
        for ci in 0..c {
            let mut oc = out.index_axis_mut(Axis(0), ci);
            ndarray::linalg::general_mat_mul(
                F::one(),
                &wd.index_axis(Axis(0), ci),
                &xd.index_axis(Axis(0), ci),
                F::zero(),
                &mut oc,
            );
            for (j, mut row) in oc.axis_iter_mut(Axis(0)).enumerate() {
                let bv = bd[(ci, j)];
                row.mapv_inplace(|v| v + bv);
            }
        }
        let ng = self.any_grad(&[x, w, b]);
        self.push(out.into_dyn(), Op::ChanLinear { x, w, b }, ng)
    }

    pub fn neg_log2(&mut self, x: NodeId) -> NodeId {
        let inv_ln2 = F::from_f64(1.0 / std::f64::consts::LN_2);
        let out = self.nodes[x.0].value.mapv(|v| -(v.ln() * inv_ln2));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::NegLog2 { x }, ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        let ng = self.any_grad(&[x]);
        self.push(scalar_arr(s), Op::SumAll { x }, ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len();
        let s = self.nodes[x.0].value.sum() / F::from_f64(n as f64);
        let ng = self.any_grad(&[x]);
        self.push(scalar_arr(s), Op::MeanAll { x }, ng)
    }

    /// Scalar mean squared error between same-shaped tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.raw_dim(), bv.raw_dim(), "mse shape mismatch");
        let n = F::from_f64(av.len() as f64);
        let mut s = F::zero();
        ndarray::Zip::from(av).and(bv).for_each(|&x, &y| {
            let d = x - y;
            s = s + d * d;
        });
        let ng = self.any_grad(&[a, b]);
        self.push(scalar_arr(s / n), Op::MseLoss { a, b }, ng)
    }

    fn view3(&self, id: NodeId) -> ndarray::ArrayView3<'_, F> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected 3-d tensor")
    }

    fn view4(&self, id: NodeId) -> ndarray::ArrayView4<'_, F> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected 4-d tensor")
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Grads<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs scalar root");
        let mut g: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            F::one(),
        ));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                g[i] = None;
                continue;
            }
            let gi = match g[i].take() {
                Some(v) => v,
                None => continue,
            };
            self.backprop_node(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { by_node: g }
    }

    fn backprop_node(&self, i: usize, gi: &ArrayD<F>, g: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3 { x, w, stride } => {
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                if self.nodes[x.0].needs_grad {
                    let wv = self.view4(*w);
                    let (_, h, wd) = self.view3(*x).dim();
                    let dx = kernels::conv3_dx(&gv, &wv, *stride, (h, wd)).into_dyn();
                    accumulate(&mut g[x.0], dx);
                }
                if self.nodes[w.0].needs_grad {
                    let xv = self.view3(*x);
                    let dw = kernels::conv3_dw(&xv, &gv, *stride).into_dyn();
                    accumulate(&mut g[w.0], dw);
                }
            }
            Op::ConvT3 { x, w } => {
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                if self.nodes[x.0].needs_grad {
                    let wv = self.view4(*w);
                    let dx = kernels::convt3_dx(&gv, &wv).into_dyn();
                    accumulate(&mut g[x.0], dx);
                }
                if self.nodes[w.0].needs_grad {
                    let xv = self.view3(*x);
                    let dw = kernels::convt3_dw(&xv, &gv).into_dyn();
                    accumulate(&mut g[w.0], dw);
                }
            }
            Op::BiasAdd { x, b } => {
                if self.nodes[x.0].needs_grad {
                    accumulate(&mut g[x.0], gi.clone());
                }
                if self.nodes[b.0].needs_grad {
                    let c = gi.shape()[0];
                    let mut db = ndarray::Array1::<F>::zeros(c);
                    for (ci, lane) in gi.axis_iter(Axis(0)).enumerate() {
                        db[ci] = lane.sum();
                    }
                    accumulate(&mut g[b.0], db.into_dyn());
                }
            }
            Op::ScaleChan { x, s } => {
                let sv = self.nodes[s.0].value.as_slice().unwrap().to_vec();
                if self.nodes[x.0].needs_grad {
                    let mut dx = gi.clone();
                    for (ci, mut lane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let sc = sv[ci];
                        lane.mapv_inplace(|v| v * sc);
                    }
                    accumulate(&mut g[x.0], dx);
                }
                if self.nodes[s.0].needs_grad {
                    let xv = &self.nodes[x.0].value;
                    let c = xv.shape()[0];
                    let mut ds = ndarray::Array1::<F>::zeros(c);
                    for ci in 0..c {
                        let gl = gi.index_axis(Axis(0), ci);
                        let xl = xv.index_axis(Axis(0), ci);
                        let mut acc = F::zero();
                        ndarray::Zip::from(&gl).and(&xl).for_each(|&a, &b| {
                            acc = acc + a * b;
                        });
                        ds[ci] = acc;
                    }
                    accumulate(&mut g[s.0], ds.into_dyn());
                }
            }
            Op::Recip { x } => {
                if self.nodes[x.0].needs_grad {
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(gi).and(xv).map_collect(|&gv, &x| {
                        -gv / (x * x)
                    });
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].needs_grad {
                    accumulate(&mut g[a.0], gi.clone());
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(&mut g[b.0], gi.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].needs_grad {
                    accumulate(&mut g[a.0], gi.clone());
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(&mut g[b.0], gi.mapv(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    accumulate(&mut g[a.0], gi * &self.nodes[b.0].value);
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(&mut g[b.0], gi * &self.nodes[a.0].value);
                }
            }
            Op::Div { a, b } => {
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].needs_grad {
                    accumulate(&mut g[a.0], gi / bv);
                }
                if self.nodes[b.0].needs_grad {
                    let av = &self.nodes[a.0].value;
                    let db = ndarray::Zip::from(gi).and(av).and(bv).map_collect(
                        |&gv, &a, &b| -gv * a / (b * b),
                    );
                    accumulate(&mut g[b.0], db);
                }
            }
            Op::ScaleConst { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let cf = F::from_f64(*c);
                    accumulate(&mut g[x.0], gi.mapv(|v| v * cf));
                }
            }
            Op::AddConst { x } => {
                if self.nodes[x.0].needs_grad {
                    accumulate(&mut g[x.0], gi.clone());
                }
            }
            Op::Silu { x } => {
                if self.nodes[x.0].needs_grad {
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(gi).and(xv).map_collect(|&gv, &x| {
                        let s = sigmoid_f(x);
                        gv * s * (F::one() + x * (F::one() - s))
                    });
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Exp { x } => {
                if self.nodes[x.0].needs_grad {
                    let yv = &node.value;
                    let dx = ndarray::Zip::from(gi).and(yv).map_collect(|&gv, &y| gv * y);
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Reshape { x } => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let dx = gi
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&xs))
                        .expect("reshape grad");
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Tanh { x } => {
                if self.nodes[x.0].needs_grad {
                    let yv = &node.value;
                    let dx = ndarray::Zip::from(gi)
                        .and(yv)
                        .map_collect(|&gv, &y| gv * (F::one() - y * y));
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[x.0].needs_grad {
                    let yv = &node.value;
                    let dx = ndarray::Zip::from(gi)
                        .and(yv)
                        .map_collect(|&gv, &y| gv * y * (F::one() - y));
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Softplus { x } => {
                if self.nodes[x.0].needs_grad {
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(gi)
                        .and(xv)
                        .map_collect(|&gv, &x| gv * sigmoid_f(x));
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::Concat { parts } => {
                let mut from = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[0];
                    if self.nodes[p.0].needs_grad {
                        let slice = gi
                            .slice_axis(Axis(0), ndarray::Slice::from(from..from + c))
                            .to_owned();
                        accumulate(&mut g[p.0], slice);
                    }
                    from += c;
                }
            }
            Op::SliceChan { x, from, to } => {
                if self.nodes[x.0].needs_grad {
                    let mut dx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                    dx.slice_axis_mut(Axis(0), ndarray::Slice::from(*from..*to))
                        .assign(gi);
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::AvgPool2 { x } => {
                if self.nodes[x.0].needs_grad {
                    let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                    accumulate(&mut g[x.0], kernels::avgpool2_bwd(&gv).into_dyn());
                }
            }
            Op::Upsample2 { x } => {
                if self.nodes[x.0].needs_grad {
                    let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                    accumulate(&mut g[x.0], kernels::upsample2_bwd(&gv).into_dyn());
                }
            }
            Op::Warp { src, flow } => {
                let sv = self.view3(*src);
                let fv = self.view3(*flow);
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let (d_src, d_flow) = kernels::warp_bwd(&sv, &fv, &gv);
                if self.nodes[src.0].needs_grad {
                    accumulate(&mut g[src.0], d_src.into_dyn());
                }
                if self.nodes[flow.0].needs_grad {
                    accumulate(&mut g[flow.0], d_flow.into_dyn());
                }
            }
            Op::SteRound { x } => {
                if self.nodes[x.0].needs_grad {
                    accumulate(&mut g[x.0], gi.clone());
                }
            }
            Op::Blur11 { x } => {
                if self.nodes[x.0].needs_grad {
                    // symmetric kernel with zero padding: self-adjoint
                    let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                    accumulate(&mut g[x.0], kernels::blur11_fwd(&gv).into_dyn());
                }
            }
            Op::ClampMin { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let cf = F::from_f64(*c);
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(gi).and(xv).map_collect(|&gv, &x| {
                        if x >= cf || gv < F::zero() {
                            gv
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::PowConst { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let cf = F::from_f64(*c);
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(gi).and(xv).map_collect(|&gv, &x| {
                        gv * cf * x.powf(cf - F::one())
                    });
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::GaussianBits { t, mu, sigma } => {
                let tv = &self.nodes[t.0].value;
                let mv = &self.nodes[mu.0].value;
                let sv = &self.nodes[sigma.0].value;
                let need_t = self.nodes[t.0].needs_grad;
                let need_m = self.nodes[mu.0].needs_grad;
                let need_s = self.nodes[sigma.0].needs_grad;
                let mut dt = ArrayD::<F>::zeros(gi.raw_dim());
                let mut dm = ArrayD::<F>::zeros(gi.raw_dim());
                let mut ds = ArrayD::<F>::zeros(gi.raw_dim());
                let gs = gi.as_slice().unwrap();
                let ts = tv.as_slice().unwrap();
                let ms = mv.as_slice().unwrap();
                let ss = sv.as_slice().unwrap();
                {
                    let dts = dt.as_slice_mut().unwrap();
                    let dms = dm.as_slice_mut().unwrap();
                    let dss = ds.as_slice_mut().unwrap();
                    for k in 0..gs.len() {
                        let (gt, gm, gsig) = gaussian_bits_grad(
                            gs[k].to_f64(),
                            ts[k].to_f64(),
                            ms[k].to_f64(),
                            ss[k].to_f64(),
                        );
                        dts[k] = F::from_f64(gt);
                        dms[k] = F::from_f64(gm);
                        dss[k] = F::from_f64(gsig);
                    }
                }
                if need_t {
                    accumulate(&mut g[t.0], dt);
                }
                if need_m {
                    accumulate(&mut g[mu.0], dm);
                }
                if need_s {
                    accumulate(&mut g[sigma.0], ds);
                }
            }
            Op::ChanLinear { x, w, b } => {
                let xd = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let wd = self.nodes[w.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let gd = gi.view().into_dimensionality::<Ix3>().unwrap();
                let (c, din, _n) = xd.dim();
                let (_, dout, _) = wd.dim();
                if self.nodes[x.0].needs_grad {
                    let mut dx = ndarray::Array3::<F>::zeros(xd.dim());
                    for ci in 0..c {
                        let mut dxc = dx.index_axis_mut(Axis(0), ci);
                        let wt = wd.index_axis(Axis(0), ci);
                        ndarray::linalg::general_mat_mul(
                            F::one(),
                            &wt.t(),
                            &gd.index_axis(Axis(0), ci),
                            F::zero(),
                            &mut dxc,
                        );
                    }
                    accumulate(&mut g[x.0], dx.into_dyn());
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = ndarray::Array3::<F>::zeros((c, dout, din));
                    for ci in 0..c {
                        let mut dwc = dw.index_axis_mut(Axis(0), ci);
                        ndarray::linalg::general_mat_mul(
                            F::one(),
                            &gd.index_axis(Axis(0), ci),
                            &xd.index_axis(Axis(0), ci).t(),
                            F::zero(),
                            &mut dwc,
                        );
                    }
                    accumulate(&mut g[w.0], dw.into_dyn());
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = ndarray::Array2::<F>::zeros((c, dout));
                    for ci in 0..c {
                        for j in 0..dout {
                            db[(ci, j)] = gd.index_axis(Axis(0), ci).row(j).sum();
                        }
                    }
                    accumulate(&mut g[b.0], db.into_dyn());
                }
            }
            Op::NegLog2 { x } => {
                if self.nodes[x.0].needs_grad {
                    let inv_ln2 = F::from_f64(1.0 / std::f64::consts::LN_2);
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(gi)
                        .and(xv)
                        .map_collect(|&gv, &x| -gv * inv_ln2 / x);
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::SumAll { x } => {
                if self.nodes[x.0].needs_grad {
                    let gv = gi.iter().next().copied().unwrap();
                    let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::MeanAll { x } => {
                if self.nodes[x.0].needs_grad {
                    let n = self.nodes[x.0].value.len();
                    let gv = gi.iter().next().copied().unwrap() / F::from_f64(n as f64);
                    let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                    accumulate(&mut g[x.0], dx);
                }
            }
            Op::MseLoss { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let n = F::from_f64(av.len() as f64);
                let gv = gi.iter().next().copied().unwrap();
                let two = F::from_f64(2.0);
                if self.nodes[a.0].needs_grad {
                    let da = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| gv * two * (x - y) / n);
                    accumulate(&mut g[a.0], da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| -gv * two * (x - y) / n);
                    accumulate(&mut g[b.0], db);
                }
            }
        }
    }
}

pub struct Grads<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter id for every parameter leaf that
    /// received one.
    pub fn into_param_grads(mut self, graph: &Graph<F>) -> HashMap<usize, ArrayD<F>> {
        let mut out = HashMap::new();
        for (node_idx, pid) in &graph.param_of_node {
            if let Some(g) = self.by_node[*node_idx].take() {
                out.insert(*pid, g);
            }
        }
        out
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<ArrayD<F>>, add: ArrayD<F>) {
    match slot {
        Some(acc) => *acc += &add,
        None => *slot = Some(add),
    }
}

fn scalar_arr<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn sigmoid_f<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn softplus_f<F: Scalar>(x: F) -> F {
    let hi = F::from_f64(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

fn gaussian_bin_prob(t: f64, mu: f64, sigma: f64) -> f64 {
    let lo = (t - 0.5 - mu) / sigma;
    let hi = (t + 0.5 - mu) / sigma;
    if lo.is_nan() || hi.is_nan() {
        // must surface as NaN bits, not a panic or a floored probability,
        // so the trainer's NaN-loss abort can see it
        return f64::NAN;
    }
    dmath::normal_interval_prob(lo, hi)
}

/// Analytic gradient of -log2(max(p, floor)) w.r.t. (t, mu, sigma) scaled
/// by the upstream gradient g. Below the floor only updates that raise p
/// pass, mirroring ClampMin.
fn gaussian_bits_grad(g: f64, t: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let lo = (t - 0.5 - mu) / sigma;
    let hi = (t + 0.5 - mu) / sigma;
    if lo.is_nan() || hi.is_nan() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let p = dmath::normal_interval_prob(lo, hi);
    // d bits / d p at the clamped value.
    let dbits_dp = -1.0 / (p.max(PROB_FLOOR) * std::f64::consts::LN_2);
    // Upstream g with descent raises p only if g > 0 here (bits shrink).
    if p < PROB_FLOOR && g <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let pdf_hi = dmath::normal_pdf(hi);
    let pdf_lo = dmath::normal_pdf(lo);
    let dp_dt = (pdf_hi - pdf_lo) / sigma;
    let dp_dmu = -dp_dt;
    let dp_dsigma = -(pdf_hi * hi - pdf_lo * lo) / sigma;
    (
        g * dbits_dp * dp_dt,
        g * dbits_dp * dp_dmu,
        g * dbits_dp * dp_dsigma,
    )
}

/// Report from the finite-difference gradient oracle.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central-difference verification of reverse-mode gradients.
///
/// `build` must deterministically construct a scalar loss from the given
/// leaves. For each input, `coords_per_input` coordinates are sampled and
/// perturbed by +-h; the relative error uses max(|fd|, |analytic|) as the
/// scale with an absolute floor so near-zero pairs do not inflate it.
pub fn check_gradients<F: Scalar>(
    inputs: &[ArrayD<F>],
    build: &dyn Fn(&mut Graph<F>, &[NodeId]) -> NodeId,
    h: f64,
    coords_per_input: usize,
    seed: u64,
) -> FdReport {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut graph = Graph::<F>::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|v| graph.leaf(v.clone(), true))
        .collect();
    let root = build(&mut graph, &ids);
    let grads = graph.backward(root);

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        let analytic = grads.get(ids[i]);
        for _ in 0..coords_per_input {
            let flat = rng.random_range(0..n);
            let an = analytic
                .map(|a| a.as_slice().map(|s| s[flat]).unwrap_or_else(|| {
                    *a.iter().nth(flat).unwrap()
                }))
                .unwrap_or(F::zero())
                .to_f64();

            let eval = |delta: f64| -> f64 {
                let mut g2 = Graph::<F>::new();
                let ids2: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let mut vv = v.clone();
                        if j == i {
                            let s = vv.as_slice_mut().unwrap();
                            s[flat] = s[flat] + F::from_f64(delta);
                        }
                        g2.leaf(vv, false)
                    })
                    .collect();
                let r = build(&mut g2, &ids2);
                g2.scalar(r)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = fd.abs().max(an.abs());
            let rel = if scale < 1e-7 {
                0.0
            } else {
                (fd - an).abs() / scale
            };
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    FdReport {
        max_rel_err: max_rel,
        checked,
    }
}
