//! Parameter storage, initialization, layer wrappers, and the optimizer.
//!
//! Parameters live in a flat `ParamSet` keyed by hierarchical names
//! ("analysis.s0.w"). Layers hold parameter ids, not values, so the same
//! layer object can serve many graphs; checkpoints round-trip by name.

use crate::autodiff::{Graph, NodeId};
use crate::kernels::Scalar;
use ndarray::{Array1, Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<F>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &ArrayD<F> {
        &self.values[id]
    }

    pub fn set(&mut self, id: usize, value: ArrayD<F>) {
        assert_eq!(
            self.values[id].raw_dim(),
            value.raw_dim(),
            "shape change for parameter {}",
            self.names[id]
        );
        self.values[id] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Emit this parameter as a (deduplicated) graph leaf.
    pub fn leaf(&self, g: &mut Graph<F>, id: usize, trainable: bool) -> NodeId {
        g.param_leaf(id, self.values[id].clone(), trainable)
    }
}

/// He-uniform fan-in initialization for a 3x3 conv weight (Co, Ci, 3, 3).
pub fn init_conv_weight<F: Scalar>(rng: &mut ChaCha8Rng, co: usize, ci: usize) -> ArrayD<F> {
    let fan_in = (ci * 9) as f64;
    let limit = (6.0 / fan_in).sqrt();
    Array4::from_shape_fn((co, ci, 3, 3), |_| {
        F::from_f64(rng.random_range(-limit..limit))
    })
    .into_dyn()
}

/// Transposed-conv weight (Ci, Co, 3, 3); fan-in counts the contributing
/// input taps per output (k*k/stride^2 on average).
pub fn init_convt_weight<F: Scalar>(rng: &mut ChaCha8Rng, ci: usize, co: usize) -> ArrayD<F> {
    let fan_in = (ci * 9) as f64 / 4.0;
    let limit = (6.0 / fan_in).sqrt();
    Array4::from_shape_fn((ci, co, 3, 3), |_| {
        F::from_f64(rng.random_range(-limit..limit))
    })
    .into_dyn()
}

pub fn zeros1<F: Scalar>(n: usize) -> ArrayD<F> {
    Array1::<F>::zeros(n).into_dyn()
}

/// 3x3 convolution layer (stride 1 or 2) with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), init_conv_weight(rng, co, ci));
        let b = ps.add(&format!("{name}.b"), zeros1(co));
        Conv2d { w, b, stride }
    }

    /// Zero-initialized variant; used for flow-refinement heads so the
    /// untrained estimator predicts zero motion.
    pub fn zeroed<F: Scalar>(
        ps: &mut ParamSet<F>,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            Array4::<F>::zeros((co, ci, 3, 3)).into_dyn(),
        );
        let b = ps.add(&format!("{name}.b"), zeros1(co));
        Conv2d { w, b, stride }
    }

    /// He init shrunk by `scale`; used for reconstruction output layers
    /// so the untrained decoder emits small values instead of amplified
    /// noise (keeps the first optimizer steps off the rd-loss cliff, and
    /// stays nonzero so finite-difference checks exercise the layer).
    pub fn scaled<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
        scale: f64,
    ) -> Self {
        let s = F::from_f64(scale);
        let mut init = init_conv_weight::<F>(rng, co, ci);
        init.mapv_inplace(|v| v * s);
        let w = ps.add(&format!("{name}.w"), init);
        let b = ps.add(&format!("{name}.b"), zeros1(co));
        Conv2d { w, b, stride }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let w = ps.leaf(g, self.w, train);
        let b = ps.leaf(g, self.b, train);
        let y = g.conv3(x, w, self.stride);
        g.bias_add(y, b)
    }
}

/// 3x3 stride-2 transposed convolution with bias; doubles spatial dims.
#[derive(Clone, Copy, Debug)]
pub struct ConvT2d {
    pub w: usize,
    pub b: usize,
}

impl ConvT2d {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), init_convt_weight(rng, ci, co));
        let b = ps.add(&format!("{name}.b"), zeros1(co));
        ConvT2d { w, b }
    }

    /// He init shrunk by `scale`; see Conv2d::scaled.
    pub fn scaled<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        scale: f64,
    ) -> Self {
        let s = F::from_f64(scale);
        let mut init = init_convt_weight::<F>(rng, ci, co);
        init.mapv_inplace(|v| v * s);
        let w = ps.add(&format!("{name}.w"), init);
        let b = ps.add(&format!("{name}.b"), zeros1(co));
        ConvT2d { w, b }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let w = ps.leaf(g, self.w, train);
        let b = ps.leaf(g, self.b, train);
        let y = g.convt3(x, w);
        g.bias_add(y, b)
    }
}

/// Two-conv residual block with SiLU, identity skip.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResBlock {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        ResBlock {
            c1: Conv2d::new(ps, rng, &format!("{name}.c1"), ch, ch, 1),
            c2: Conv2d::new(ps, rng, &format!("{name}.c2"), ch, ch, 1),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let h = self.c1.apply(ps, g, x, train);
        let h = g.silu(h);
        let h = self.c2.apply(ps, g, h, train);
        g.add(x, h)
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut HashMap<usize, ArrayD<F>>, max_norm: f64) -> f64 {
    // accumulate in id order; map order would make the norm run-dependent
    // in the last ulp and break bit-exact training resume
    let mut ids: Vec<usize> = grads.keys().copied().collect();
    ids.sort_unstable();
    let mut sq = 0.0f64;
    for id in ids {
        for v in grads[&id].iter() {
            let x = (*v).to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Only parameters that received a
/// gradient this step are updated or decayed.
pub struct AdamW<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(ps: &ParamSet<F>, lr: f64) -> Self {
        let m = (0..ps.len())
            .map(|i| ArrayD::zeros(ps.get(i).raw_dim()))
            .collect();
        let v = (0..ps.len())
            .map(|i| ArrayD::zeros(ps.get(i).raw_dim()))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m,
            v,
        }
    }

    pub fn apply(&mut self, ps: &mut ParamSet<F>, grads: &HashMap<usize, ArrayD<F>>) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let wd = F::from_f64(self.lr * self.weight_decay);
        let inv_bc1 = F::from_f64(1.0 / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        for (&pid, grad) in grads {
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let mut value = ps.get(pid).clone();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv * inv_bc1;
                    let vhat = vv * inv_bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps) - wd * *p;
                });
            ps.set(pid, value);
        }
    }

    /// Moment tensors for checkpointing, in parameter order.
    pub fn state(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    pub fn load_state(&mut self, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>, step: u64) {
        assert_eq!(m.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state size mismatch");
        for (a, b) in self.m.iter().zip(&m) {
            assert_eq!(a.raw_dim(), b.raw_dim(), "optimizer moment shape mismatch");
        }
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
