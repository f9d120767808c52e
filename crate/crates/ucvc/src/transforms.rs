//! Analysis/synthesis transform stacks, hyper codec, Gaussian parameter
//! heads, frame generation, variable-rate gain vectors, and the factorized
//! prior for hyper-latents.
//!
//! Everything here is a thin assembly of autodiff ops over a `ParamSet`;
//! the same structs drive training (trainable leaves) and inference
//! (frozen leaves). Channel counts are uniform within one codec: latent
//! and hyper-latent share the configured channel number.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix3};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, PROB_FLOOR};
use crate::entropy::{self, SIGMA_MIN};
use crate::kernels::Scalar;
use crate::nn::{Conv2d, ConvT2d, ParamSet, ResBlock};
use crate::{Error, Result};

/// Raw bias of the sigma half of an entropy head at init; yields
/// sigma = SIGMA_MIN + softplus(0.41) ~= 1.029 on zero input.
const SIGMA_BIAS_INIT: f64 = 0.41;

/// Multi-scale conditioning tensors: full, half, and quarter resolution,
/// all with the contextual codec's channel count.
#[derive(Clone, Copy, Debug)]
pub struct ContextNodes {
    pub c0: NodeId,
    pub c1: NodeId,
    pub c2: NodeId,
}

fn res_stack<F: Scalar>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    ch: usize,
    blocks: usize,
) -> Vec<ResBlock> {
    (0..blocks)
        .map(|i| ResBlock::new(ps, rng, &format!("{name}.rb{i}"), ch))
        .collect()
}

fn apply_stack<F: Scalar>(
    rbs: &[ResBlock],
    ps: &ParamSet<F>,
    g: &mut Graph<F>,
    mut h: NodeId,
    train: bool,
) -> NodeId {
    for rb in rbs {
        h = rb.apply(ps, g, h, train);
    }
    h
}

// ---------------------------------------------------------------------------
// Plain (context-free) transforms: image codec (3ch) and motion codec (4ch)
// ---------------------------------------------------------------------------

/// Four stride-2 stages to a 1/16-resolution latent.
#[derive(Clone, Debug)]
pub struct PlainAnalysis {
    convs: [Conv2d; 4],
    rbs: Vec<Vec<ResBlock>>,
}

impl PlainAnalysis {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        ch: usize,
        blocks: usize,
    ) -> Self {
        let convs = [
            Conv2d::new(ps, rng, &format!("{name}.d0"), in_ch, ch, 2),
            Conv2d::new(ps, rng, &format!("{name}.d1"), ch, ch, 2),
            Conv2d::new(ps, rng, &format!("{name}.d2"), ch, ch, 2),
            Conv2d::new(ps, rng, &format!("{name}.d3"), ch, ch, 2),
        ];
        let rbs = (0..3)
            .map(|i| res_stack(ps, rng, &format!("{name}.s{i}"), ch, blocks))
            .collect();
        PlainAnalysis { convs, rbs }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let mut h = x;
        for i in 0..3 {
            h = self.convs[i].apply(ps, g, h, train);
            h = g.silu(h);
            h = apply_stack(&self.rbs[i], ps, g, h, train);
        }
        // final projection stays linear so the latent is unbounded
        self.convs[3].apply(ps, g, h, train)
    }
}

/// Mirror of `PlainAnalysis`: four stride-2 upsampling stages.
#[derive(Clone, Debug)]
pub struct PlainSynthesis {
    convs: [ConvT2d; 4],
    rbs: Vec<Vec<ResBlock>>,
}

impl PlainSynthesis {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        out_ch: usize,
        blocks: usize,
    ) -> Self {
        let convs = [
            ConvT2d::new(ps, rng, &format!("{name}.u0"), ch, ch),
            ConvT2d::new(ps, rng, &format!("{name}.u1"), ch, ch),
            ConvT2d::new(ps, rng, &format!("{name}.u2"), ch, ch),
            // Damped output projection: an untrained decoder then emits
            // near-zero samples or flow instead of +-50 garbage, which
            // keeps the initial rd loss (and its gradients) bounded.
            ConvT2d::scaled(ps, rng, &format!("{name}.u3"), ch, out_ch, 0.05),
        ];
        let rbs = (0..3)
            .map(|i| res_stack(ps, rng, &format!("{name}.s{i}"), ch, blocks))
            .collect();
        PlainSynthesis { convs, rbs }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        y: NodeId,
        train: bool,
    ) -> NodeId {
        let mut h = y;
        for i in 0..3 {
            h = self.convs[i].apply(ps, g, h, train);
            h = g.silu(h);
            h = apply_stack(&self.rbs[i], ps, g, h, train);
        }
        self.convs[3].apply(ps, g, h, train)
    }
}

// ---------------------------------------------------------------------------
// Contextual transforms (inter frames)
// ---------------------------------------------------------------------------

/// Analysis with context injection: the frame is concatenated with the
/// full-resolution context, intermediate activations with the half- and
/// quarter-resolution contexts.
#[derive(Clone, Debug)]
pub struct CtxAnalysis {
    convs: [Conv2d; 4],
    rbs: Vec<Vec<ResBlock>>,
}

impl CtxAnalysis {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        ch: usize,
        blocks: usize,
    ) -> Self {
        let convs = [
            Conv2d::new(ps, rng, &format!("{name}.d0"), in_ch + ch, ch, 2),
            Conv2d::new(ps, rng, &format!("{name}.d1"), ch + ch, ch, 2),
            Conv2d::new(ps, rng, &format!("{name}.d2"), ch + ch, ch, 2),
            Conv2d::new(ps, rng, &format!("{name}.d3"), ch, ch, 2),
        ];
        let rbs = (0..3)
            .map(|i| res_stack(ps, rng, &format!("{name}.s{i}"), ch, blocks))
            .collect();
        CtxAnalysis { convs, rbs }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        ctx: &ContextNodes,
        train: bool,
    ) -> NodeId {
        let mut h = g.concat(&[x, ctx.c0]);
        h = self.convs[0].apply(ps, g, h, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs[0], ps, g, h, train);

        h = g.concat(&[h, ctx.c1]);
        h = self.convs[1].apply(ps, g, h, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs[1], ps, g, h, train);

        h = g.concat(&[h, ctx.c2]);
        h = self.convs[2].apply(ps, g, h, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs[2], ps, g, h, train);

        self.convs[3].apply(ps, g, h, train)
    }
}

/// Synthesis with context re-filling at the quarter and half scales.
/// Produces a full-resolution feature tensor; the frame generator turns
/// it into pixels.
#[derive(Clone, Debug)]
pub struct CtxSynthesis {
    convs: [ConvT2d; 4],
    fuse1: Conv2d,
    fuse2: Conv2d,
    rbs: Vec<Vec<ResBlock>>,
}

impl CtxSynthesis {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        blocks: usize,
    ) -> Self {
        let convs = [
            ConvT2d::new(ps, rng, &format!("{name}.u0"), ch, ch),
            ConvT2d::new(ps, rng, &format!("{name}.u1"), ch, ch),
            ConvT2d::new(ps, rng, &format!("{name}.u2"), ch, ch),
            ConvT2d::new(ps, rng, &format!("{name}.u3"), ch, ch),
        ];
        let fuse1 = Conv2d::new(ps, rng, &format!("{name}.f1"), ch + ch, ch, 1);
        let fuse2 = Conv2d::new(ps, rng, &format!("{name}.f2"), ch + ch, ch, 1);
        let rbs = (0..3)
            .map(|i| res_stack(ps, rng, &format!("{name}.s{i}"), ch, blocks))
            .collect();
        CtxSynthesis {
            convs,
            fuse1,
            fuse2,
            rbs,
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        y: NodeId,
        ctx: &ContextNodes,
        train: bool,
    ) -> NodeId {
        let mut h = self.convs[0].apply(ps, g, y, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs[0], ps, g, h, train);

        h = self.convs[1].apply(ps, g, h, train);
        h = g.concat(&[h, ctx.c2]);
        h = self.fuse1.apply(ps, g, h, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs[1], ps, g, h, train);

        h = self.convs[2].apply(ps, g, h, train);
        h = g.concat(&[h, ctx.c1]);
        h = self.fuse2.apply(ps, g, h, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs[2], ps, g, h, train);

        self.convs[3].apply(ps, g, h, train)
    }
}

/// Turns the synthesis feature plus the full-resolution context into the
/// reconstructed frame and the feature propagated to future frames.
#[derive(Clone, Debug)]
pub struct FrameGenerator {
    fuse: Conv2d,
    rbs: Vec<ResBlock>,
    head: Conv2d,
}

impl FrameGenerator {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        blocks: usize,
    ) -> Self {
        FrameGenerator {
            fuse: Conv2d::new(ps, rng, &format!("{name}.fuse"), ch + ch, ch, 1),
            rbs: res_stack(ps, rng, name, ch, blocks),
            // Damped like the synthesis output projection, and for the
            // same reason: bounded first reconstructions.
            head: Conv2d::scaled(ps, rng, &format!("{name}.head"), ch, 3, 1, 0.05),
        }
    }

    /// Returns (reconstructed frame, propagated feature).
    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        feat: NodeId,
        c0: NodeId,
        train: bool,
    ) -> (NodeId, NodeId) {
        let mut h = g.concat(&[feat, c0]);
        h = self.fuse.apply(ps, g, h, train);
        h = g.silu(h);
        h = apply_stack(&self.rbs, ps, g, h, train);
        let frame = self.head.apply(ps, g, h, train);
        (frame, h)
    }
}

/// Produces the propagated feature for intra frames, where no synthesis
/// feature exists: a single conv on the reconstruction.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    conv: Conv2d,
}

impl FeatureExtractor {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        FeatureExtractor {
            conv: Conv2d::new(ps, rng, name, 3, ch, 1),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        self.conv.apply(ps, g, x, train)
    }
}

// ---------------------------------------------------------------------------
// Hyper codec and entropy parameter heads
// ---------------------------------------------------------------------------

/// Two stride-2 stages each way; the synthesis widens to 2x channels so
/// the head can split mean and scale.
#[derive(Clone, Debug)]
pub struct HyperCodec {
    a1: Conv2d,
    a2: Conv2d,
    s1: ConvT2d,
    s2: ConvT2d,
}

impl HyperCodec {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        HyperCodec {
            a1: Conv2d::new(ps, rng, &format!("{name}.a1"), ch, ch, 2),
            a2: Conv2d::new(ps, rng, &format!("{name}.a2"), ch, ch, 2),
            s1: ConvT2d::new(ps, rng, &format!("{name}.s1"), ch, ch),
            s2: ConvT2d::new(ps, rng, &format!("{name}.s2"), ch, 2 * ch),
        }
    }

    pub fn analyze<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        y: NodeId,
        train: bool,
    ) -> NodeId {
        let h = self.a1.apply(ps, g, y, train);
        let h = g.silu(h);
        self.a2.apply(ps, g, h, train)
    }

    pub fn synthesize<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        zhat: NodeId,
        train: bool,
    ) -> NodeId {
        let h = self.s1.apply(ps, g, zhat, train);
        let h = g.silu(h);
        self.s2.apply(ps, g, h, train)
    }
}

/// Maps the quarter-resolution fused context to latent resolution so the
/// entropy head can condition on temporal structure.
#[derive(Clone, Debug)]
pub struct TemporalPrior {
    p1: Conv2d,
    p2: Conv2d,
}

impl TemporalPrior {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        TemporalPrior {
            p1: Conv2d::new(ps, rng, &format!("{name}.p1"), ch, ch, 2),
            p2: Conv2d::new(ps, rng, &format!("{name}.p2"), ch, ch, 2),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        c2: NodeId,
        train: bool,
    ) -> NodeId {
        let h = self.p1.apply(ps, g, c2, train);
        let h = g.silu(h);
        self.p2.apply(ps, g, h, train)
    }
}

/// Projects hyper features (plus an optional temporal prior) to per-symbol
/// mean and scale. Scale = SIGMA_MIN + softplus(raw) stays above the
/// range-coder floor by construction.
#[derive(Clone, Debug)]
pub struct EntropyHead {
    proj: Conv2d,
    ch: usize,
}

impl EntropyHead {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        with_temporal: bool,
    ) -> Self {
        let in_ch = if with_temporal { 3 * ch } else { 2 * ch };
        let proj = Conv2d::new(ps, rng, name, in_ch, 2 * ch, 1);
        let mut b = Array1::<F>::zeros(2 * ch);
        for i in ch..2 * ch {
            b[i] = F::from_f64(SIGMA_BIAS_INIT);
        }
        ps.set(proj.b, b.into_dyn());
        EntropyHead { proj, ch }
    }

    /// Returns (mu, sigma), both shaped like the latent.
    pub fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        hyper: NodeId,
        temporal: Option<NodeId>,
        train: bool,
    ) -> (NodeId, NodeId) {
        let inp = match temporal {
            Some(t) => g.concat(&[hyper, t]),
            None => hyper,
        };
        let h = self.proj.apply(ps, g, inp, train);
        let mu = g.slice_chan(h, 0, self.ch);
        let raw = g.slice_chan(h, self.ch, 2 * self.ch);
        let sp = g.softplus(raw);
        let sigma = g.add_const(sp, SIGMA_MIN);
        (mu, sigma)
    }
}

// ---------------------------------------------------------------------------
// Variable-rate gains
// ---------------------------------------------------------------------------

/// Per-lambda, per-channel scaling factors applied to the latent (and its
/// hyper-latent) before quantization. Stored in log domain so positivity
/// holds for free; initialized to sqrt(lambda_l / lambda_0) so higher-rate
/// levels start with finer quantization.
#[derive(Clone, Debug)]
pub struct GainTable {
    log_y: usize,
    log_z: usize,
    levels: usize,
    ch: usize,
}

impl GainTable {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        name: &str,
        lambdas: &[f64],
        ch: usize,
    ) -> Self {
        assert!(!lambdas.is_empty(), "need at least one lambda");
        let levels = lambdas.len();
        let mut init = Array2::<F>::zeros((levels, ch));
        for (l, &lam) in lambdas.iter().enumerate() {
            let v = F::from_f64(0.5 * (lam / lambdas[0]).ln());
            init.row_mut(l).fill(v);
        }
        let log_y = ps.add(&format!("{name}.log_y"), init.clone().into_dyn());
        let log_z = ps.add(&format!("{name}.log_z"), init.into_dyn());
        GainTable {
            log_y,
            log_z,
            levels,
            ch,
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Scale vectors (latent, hyper-latent) for one rate level, shape (ch,).
    pub fn scales<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        level: usize,
        train: bool,
    ) -> Result<(NodeId, NodeId)> {
        if level >= self.levels {
            return Err(Error::invalid(format!(
                "lambda index {level} out of range (have {})",
                self.levels
            )));
        }
        let mut pick = |pid: usize| {
            let full = ps.leaf(g, pid, train);
            let row = g.slice_chan(full, level, level + 1);
            let flat = g.reshape(row, &[self.ch]);
            g.exp(flat)
        };
        let sy = pick(self.log_y);
        let sz = pick(self.log_z);
        Ok((sy, sz))
    }
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Hard rounding outside the graph; produces integer symbols for coding.
    Eval,
    /// Additive uniform noise on the rate path, straight-through rounding on
    /// the reconstruction path.
    Train,
    /// No rounding at all; keeps the whole pipeline smooth for
    /// finite-difference checks.
    Passthrough,
}

pub struct Quantized {
    /// Node the rate model should price: symbols (Eval), noisy scaled latent
    /// (Train), or the scaled latent itself (Passthrough).
    pub rate_in: NodeId,
    /// Dequantized latent fed to synthesis.
    pub recon: NodeId,
    /// Pre-quantization scaled latent y*s; the hyper encoder reads this.
    pub scaled: NodeId,
    /// Integer symbols, Eval mode only.
    pub symbols: Option<Array3<i32>>,
}

/// Scale-then-round quantization: symbols = round(y * s), recon = symbols / s.
pub fn quantize<F: Scalar>(
    g: &mut Graph<F>,
    y: NodeId,
    s: NodeId,
    mode: QuantMode,
    noise: Option<&ArrayD<F>>,
) -> Result<Quantized> {
    if g.value(s).iter().any(|v| (*v).to_f64() <= 0.0) {
        return Err(Error::invalid("quantization scale must be positive"));
    }
    let ys = g.scale_chan(y, s);
    match mode {
        QuantMode::Eval => {
            let sym_f = g.value(ys).mapv(|v| F::from_f64(v.to_f64().round()));
            let symbols = sym_f
                .view()
                .into_dimensionality::<Ix3>()
                .map_err(|_| Error::invalid("latent must be 3-d"))?
                .mapv(|v| v.to_f64() as i32);
            let lf = g.leaf(sym_f, false);
            let inv = g.recip(s);
            let recon = g.scale_chan(lf, inv);
            Ok(Quantized {
                rate_in: lf,
                recon,
                scaled: ys,
                symbols: Some(symbols),
            })
        }
        QuantMode::Train => {
            let n = noise.ok_or_else(|| Error::invalid("train-mode quantize needs noise"))?;
            if n.shape() != g.value(ys).shape() {
                return Err(Error::invalid("noise shape mismatch"));
            }
            let nl = g.leaf(n.clone(), false);
            let rate_in = g.add(ys, nl);
            let r = g.ste_round(ys);
            let inv = g.recip(s);
            let recon = g.scale_chan(r, inv);
            Ok(Quantized {
                rate_in,
                recon,
                scaled: ys,
                symbols: None,
            })
        }
        QuantMode::Passthrough => {
            let inv = g.recip(s);
            let recon = g.scale_chan(ys, inv);
            Ok(Quantized {
                rate_in: ys,
                recon,
                scaled: ys,
                symbols: None,
            })
        }
    }
}

/// Decoder-side entry: wrap received symbols as a non-grad leaf.
pub fn symbols_leaf<F: Scalar>(g: &mut Graph<F>, sym: &Array3<i32>) -> NodeId {
    let arr = sym.mapv(|v| F::from_f64(v as f64)).into_dyn();
    g.leaf(arr, false)
}

/// recon = symbols / s, matching the encoder's dequantization exactly.
pub fn dequantize<F: Scalar>(g: &mut Graph<F>, sym: NodeId, s: NodeId) -> NodeId {
    let inv = g.recip(s);
    g.scale_chan(sym, inv)
}

// ---------------------------------------------------------------------------
// Factorized prior (trainable side)
// ---------------------------------------------------------------------------

/// Trainable per-channel monotone CDF (1 -> 3 -> 3 -> 1 with softplus
/// weights and bounded tanh gates). Mirrors `entropy::FactorizedParams`
/// exactly so coding tables and training rate agree.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    w1: usize,
    b1: usize,
    a1: usize,
    w2: usize,
    b2: usize,
    a2: usize,
    w3: usize,
    b3: usize,
    ch: usize,
}

impl FactorizedPrior {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, name: &str, ch: usize) -> Self {
        // softplus^-1(1) and softplus^-1(1/3): unit end-to-end slope at init
        let w_unit = (1f64.exp() - 1.0).ln();
        let w_third = ((1f64 / 3.0).exp() - 1.0).ln();
        let mut w1 = Array3::<F>::zeros((ch, 3, 1));
        w1.fill(F::from_f64(w_unit));
        let mut b1 = Array2::<F>::zeros((ch, 3));
        for c in 0..ch {
            b1[[c, 0]] = F::from_f64(-1.0);
            b1[[c, 2]] = F::from_f64(1.0);
        }
        let mut w2 = Array3::<F>::zeros((ch, 3, 3));
        w2.fill(F::from_f64(w_third));
        let mut w3 = Array3::<F>::zeros((ch, 1, 3));
        w3.fill(F::from_f64(w_third));
        FactorizedPrior {
            w1: ps.add(&format!("{name}.w1"), w1.into_dyn()),
            b1: ps.add(&format!("{name}.b1"), b1.into_dyn()),
            a1: ps.add(&format!("{name}.a1"), Array2::<F>::zeros((ch, 3)).into_dyn()),
            w2: ps.add(&format!("{name}.w2"), w2.into_dyn()),
            b2: ps.add(&format!("{name}.b2"), Array2::<F>::zeros((ch, 3)).into_dyn()),
            a2: ps.add(&format!("{name}.a2"), Array2::<F>::zeros((ch, 3)).into_dyn()),
            w3: ps.add(&format!("{name}.w3"), w3.into_dyn()),
            b3: ps.add(&format!("{name}.b3"), Array2::<F>::zeros((ch, 1)).into_dyn()),
            ch,
        }
    }

    fn gate<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        h: NodeId,
        a_pid: usize,
        train: bool,
    ) -> NodeId {
        let dims: Vec<usize> = g.value(h).shape().to_vec();
        let (c, d, m) = (dims[0], dims[1], dims[2]);
        let th = g.tanh(h);
        let thr = g.reshape(th, &[c * d, m, 1]);
        let a = ps.leaf(g, a_pid, train);
        let ta = g.tanh(a);
        let tar = g.reshape(ta, &[c * d]);
        let scaled = g.scale_chan(thr, tar);
        let back = g.reshape(scaled, &[c, d, m]);
        g.add(h, back)
    }

    /// CDF evaluated at every element of x, which must be (ch, 1, m).
    fn cdf_node<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let lin = |g: &mut Graph<F>, x, w_pid, b_pid, train| {
            let wr = ps.leaf(g, w_pid, train);
            let w = g.softplus(wr);
            let b = ps.leaf(g, b_pid, train);
            g.chan_linear(x, w, b)
        };
        let h = lin(g, x, self.w1, self.b1, train);
        let h = self.gate(ps, g, h, self.a1, train);
        let h = lin(g, h, self.w2, self.b2, train);
        let h = self.gate(ps, g, h, self.a2, train);
        let z = lin(g, h, self.w3, self.b3, train);
        g.sigmoid(z)
    }

    /// Elementwise bits of the factorized model for values x (ch, H, W):
    /// -log2(cdf(x + 0.5) - cdf(x - 0.5)), floored to keep gradients sane.
    pub fn bits<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let dims: Vec<usize> = g.value(x).shape().to_vec();
        assert_eq!(dims.len(), 3, "factorized bits expect (C,H,W)");
        let (c, hh, ww) = (dims[0], dims[1], dims[2]);
        assert_eq!(c, self.ch, "channel mismatch");
        let xr = g.reshape(x, &[c, 1, hh * ww]);
        let hi_in = g.add_const(xr, 0.5);
        let lo_in = g.add_const(xr, -0.5);
        let hi = self.cdf_node(ps, g, hi_in, train);
        let lo = self.cdf_node(ps, g, lo_in, train);
        let p = g.sub(hi, lo);
        let pc = g.clamp_min(p, PROB_FLOOR);
        let bits = g.neg_log2(pc);
        g.reshape(bits, &[c, hh, ww])
    }

    /// Snapshot raw weights as f64 for deterministic table construction.
    pub fn to_coding<F: Scalar>(&self, ps: &ParamSet<F>) -> entropy::FactorizedParams {
        let ch = self.ch;
        let g2 = |pid: usize| -> Vec<[f64; 3]> {
            let a = ps.get(pid);
            (0..ch)
                .map(|c| {
                    let mut row = [0.0; 3];
                    for (i, r) in row.iter_mut().enumerate() {
                        *r = a[[c, i]].to_f64();
                    }
                    row
                })
                .collect()
        };
        let w1a = ps.get(self.w1);
        let w1 = (0..ch)
            .map(|c| {
                let mut row = [0.0; 3];
                for (i, r) in row.iter_mut().enumerate() {
                    *r = w1a[[c, i, 0]].to_f64();
                }
                row
            })
            .collect();
        let w2a = ps.get(self.w2);
        let w2 = (0..ch)
            .map(|c| {
                let mut m = [[0.0; 3]; 3];
                for (i, mr) in m.iter_mut().enumerate() {
                    for (j, v) in mr.iter_mut().enumerate() {
                        *v = w2a[[c, i, j]].to_f64();
                    }
                }
                m
            })
            .collect();
        let w3a = ps.get(self.w3);
        let w3 = (0..ch)
            .map(|c| {
                let mut row = [0.0; 3];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = w3a[[c, 0, j]].to_f64();
                }
                row
            })
            .collect();
        let b3a = ps.get(self.b3);
        let b3 = (0..ch).map(|c| b3a[[c, 0]].to_f64()).collect();
        entropy::FactorizedParams {
            w1,
            b1: g2(self.b1),
            a1: g2(self.a1),
            w2,
            b2: g2(self.b2),
            a2: g2(self.a2),
            w3,
            b3,
        }
    }
}
