//! Joint P/B training: Single and Cascaded sample construction, the
//! per-frame rate-distortion loss, and the stage-scheduled optimizer loop.
//!
//! Both sample structures code I-frames through the live image codec
//! inside the graph, so gradients reach every module from every loss
//! term. Cascaded samples reference reconstructed intermediates, which
//! exposes the model to its own coding error during training.

use std::collections::HashMap;
use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::evaluation::ms_ssim_graph;
use crate::kernels::Scalar;
use crate::model::{save_checkpoint, OptState, VideoModel};
use crate::nn::{clip_global_norm, AdamW};
use crate::scheduler::FrameType;
use crate::transforms::{quantize, QuantMode, Quantized};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Stage {
    Single,
    Cascaded,
}

/// One coding action inside a training sample. `refs` point at earlier
/// steps (not display indices), which stays unambiguous when the same
/// frame is coded twice in different roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodingStep {
    pub frame: usize,
    pub ftype: FrameType,
    pub refs: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct TrainingSample<F: Scalar> {
    pub stage: Stage,
    pub frames: Vec<Array3<F>>,
    pub steps: Vec<CodingStep>,
}

impl<F: Scalar> TrainingSample<F> {
    /// Inter-frame view as (coded frame, type, reference display indices).
    pub fn sub_samples(&self) -> Vec<(usize, FrameType, (usize, usize))> {
        self.steps
            .iter()
            .filter_map(|s| {
                s.refs.map(|(a, b)| {
                    (s.frame, s.ftype, (self.steps[a].frame, self.steps[b].frame))
                })
            })
            .collect()
    }

    pub fn has_both_types(&self) -> bool {
        let subs = self.sub_samples();
        subs.iter().any(|s| s.1 == FrameType::P) && subs.iter().any(|s| s.1 == FrameType::B)
    }
}

/// Three-frame structure: frames 0 and 2 coded as I to bracket B(1);
/// frames 0 and 1 coded as I to feed P(2).
pub fn build_single_sample<F: Scalar>(frames: Vec<Array3<F>>) -> Result<TrainingSample<F>> {
    if frames.len() != 3 {
        return Err(Error::invalid(format!(
            "single-stage sample needs exactly 3 frames, got {}",
            frames.len()
        )));
    }
    let steps = vec![
        CodingStep { frame: 0, ftype: FrameType::I, refs: None },
        CodingStep { frame: 2, ftype: FrameType::I, refs: None },
        CodingStep { frame: 1, ftype: FrameType::B, refs: Some((0, 1)) },
        CodingStep { frame: 1, ftype: FrameType::I, refs: None },
        CodingStep { frame: 2, ftype: FrameType::P, refs: Some((3, 0)) },
    ];
    Ok(TrainingSample { stage: Stage::Single, frames, steps })
}

/// Seven-frame structure. B chain: B(2|I0,I4), then B(1) and B(3) against
/// the reconstructed midpoint. P chain: P(4|I3,I2), then P(5) and P(6)
/// against reconstructed predecessors.
pub fn build_cascaded_sample<F: Scalar>(frames: Vec<Array3<F>>) -> Result<TrainingSample<F>> {
    if frames.len() != 7 {
        return Err(Error::invalid(format!(
            "cascaded sample needs exactly 7 frames, got {}",
            frames.len()
        )));
    }
    let steps = vec![
        CodingStep { frame: 0, ftype: FrameType::I, refs: None }, // 0
        CodingStep { frame: 4, ftype: FrameType::I, refs: None }, // 1
        CodingStep { frame: 2, ftype: FrameType::B, refs: Some((0, 1)) }, // 2
        CodingStep { frame: 1, ftype: FrameType::B, refs: Some((0, 2)) }, // 3
        CodingStep { frame: 3, ftype: FrameType::B, refs: Some((2, 1)) }, // 4
        CodingStep { frame: 2, ftype: FrameType::I, refs: None }, // 5
        CodingStep { frame: 3, ftype: FrameType::I, refs: None }, // 6
        CodingStep { frame: 4, ftype: FrameType::P, refs: Some((6, 5)) }, // 7
        CodingStep { frame: 5, ftype: FrameType::P, refs: Some((7, 6)) }, // 8
        CodingStep { frame: 6, ftype: FrameType::P, refs: Some((8, 7)) }, // 9
    ];
    Ok(TrainingSample { stage: Stage::Cascaded, frames, steps })
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub enum DistortionMetric {
    Mse,
    /// D = 1 - MS-SSIM over as many dyadic scales as the crop allows.
    MsSsim,
}

/// Per-frame loss accounting. The identity total = rate + lambda_eff * D
/// holds exactly because `total` is computed from the parts in f64.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub rate_bits_per_pixel: f64,
    pub distortion: f64,
    pub lambda_effective: f64,
    pub total: f64,
}

/// Assemble the per-frame breakdown. Intra frames weight distortion five
/// times heavier so reference quality survives the inter-frame cascade.
pub fn rd_loss(
    rate_bits_per_pixel: f64,
    distortion: f64,
    lambda: f64,
    ftype: FrameType,
) -> LossBreakdown {
    let lambda_effective = if ftype == FrameType::I { 5.0 * lambda } else { lambda };
    LossBreakdown {
        rate_bits_per_pixel,
        distortion,
        lambda_effective,
        total: rate_bits_per_pixel + lambda_effective * distortion,
    }
}

/// Loss graph for one sample plus the f64 accounting per coded frame.
pub struct SampleLoss {
    /// Scalar node: mean of the per-frame losses; backward target.
    pub node: NodeId,
    pub frames: Vec<LossBreakdown>,
}

impl SampleLoss {
    pub fn mean_total(&self) -> f64 {
        self.frames.iter().map(|f| f.total).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_rate(&self) -> f64 {
        self.frames.iter().map(|f| f.rate_bits_per_pixel).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_distortion(&self) -> f64 {
        self.frames.iter().map(|f| f.distortion).sum::<f64>() / self.frames.len() as f64
    }
}

fn draw_noise<F: Scalar>(g: &Graph<F>, like: NodeId, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let shape: Vec<usize> = g.value(like).shape().to_vec();
    ArrayD::from_shape_simple_fn(IxDyn(&shape), || F::from_f64(rng.random_range(-0.5..0.5)))
}

fn train_quantize<F: Scalar>(
    g: &mut Graph<F>,
    y: NodeId,
    s: NodeId,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<Quantized> {
    match mode {
        QuantMode::Train => {
            let n = draw_noise(g, y, rng);
            quantize(g, y, s, QuantMode::Train, Some(&n))
        }
        m => quantize(g, y, s, m, None),
    }
}

struct CodedNodes {
    recon: NodeId,
    feat: NodeId,
    rate_bits: NodeId,
}

fn code_intra_graph<F: Scalar>(
    model: &VideoModel<F>,
    g: &mut Graph<F>,
    x: NodeId,
    level: usize,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<CodedNodes> {
    let ps = &model.ps;
    let cdc = &model.image;
    let y = cdc.analysis.apply(ps, g, x, true);
    let (sy, sz) = cdc.gains.scales(ps, g, level, true)?;
    let qy = train_quantize(g, y, sy, mode, rng)?;
    let z = cdc.hyper.analyze(ps, g, qy.scaled, true);
    let qz = train_quantize(g, z, sz, mode, rng)?;
    let hf = cdc.hyper.synthesize(ps, g, qz.recon, true);
    let (mu, sigma) = cdc.head.apply(ps, g, hf, None, true);
    let by = g.gaussian_bits(qy.rate_in, mu, sigma);
    let bz = cdc.prior.bits(ps, g, qz.rate_in, true);
    let sby = g.sum_all(by);
    let sbz = g.sum_all(bz);
    let rate_bits = g.add(sby, sbz);
    let xr = cdc.synthesis.apply(ps, g, qy.recon, true);
    let feat = model.feat_ext.apply(ps, g, xr, true);
    Ok(CodedNodes { recon: xr, feat, rate_bits })
}

fn code_inter_graph<F: Scalar>(
    model: &VideoModel<F>,
    g: &mut Graph<F>,
    x: NodeId,
    ref1: (NodeId, NodeId),
    ref2: (NodeId, NodeId),
    level: usize,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<CodedNodes> {
    let ps = &model.ps;
    let f1e = model.flow.estimate(ps, g, x, ref1.0, true)?;
    let f2e = model.flow.estimate(ps, g, x, ref2.0, true)?;
    let mo = g.concat(&[f1e, f2e]);

    let mdc = &model.motion;
    let my = mdc.analysis.apply(ps, g, mo, true);
    let (msy, msz) = mdc.gains.scales(ps, g, level, true)?;
    let qmy = train_quantize(g, my, msy, mode, rng)?;
    let mz = mdc.hyper.analyze(ps, g, qmy.scaled, true);
    let qmz = train_quantize(g, mz, msz, mode, rng)?;
    let mhf = mdc.hyper.synthesize(ps, g, qmz.recon, true);
    let (mmu, msig) = mdc.head.apply(ps, g, mhf, None, true);
    let bmy = g.gaussian_bits(qmy.rate_in, mmu, msig);
    let bmz = mdc.prior.bits(ps, g, qmz.rate_in, true);
    let mo_hat = mdc.synthesis.apply(ps, g, qmy.recon, true);
    let f1 = g.slice_chan(mo_hat, 0, 2);
    let f2 = g.slice_chan(mo_hat, 2, 4);

    let ctx = model.miner.mine(ps, g, ref1.1, ref2.1, f1, f2, true)?;

    let cdc = &model.inter;
    let y = cdc.analysis.apply(ps, g, x, &ctx, true);
    let (sy, sz) = cdc.gains.scales(ps, g, level, true)?;
    let qy = train_quantize(g, y, sy, mode, rng)?;
    let z = cdc.hyper.analyze(ps, g, qy.scaled, true);
    let qz = train_quantize(g, z, sz, mode, rng)?;
    let hf = cdc.hyper.synthesize(ps, g, qz.recon, true);
    let tp = cdc.temporal.apply(ps, g, ctx.c2, true);
    let (mu, sigma) = cdc.head.apply(ps, g, hf, Some(tp), true);
    let by = g.gaussian_bits(qy.rate_in, mu, sigma);
    let bz = cdc.prior.bits(ps, g, qz.rate_in, true);
    let sfeat = cdc.synthesis.apply(ps, g, qy.recon, &ctx, true);
    let (frame, pfeat) = cdc.framegen.apply(ps, g, sfeat, ctx.c0, true);

    let s1 = g.sum_all(by);
    let s2 = g.sum_all(bz);
    let s3 = g.sum_all(bmy);
    let s4 = g.sum_all(bmz);
    let a = g.add(s1, s2);
    let b = g.add(s3, s4);
    let rate_bits = g.add(a, b);
    Ok(CodedNodes { recon: frame, feat: pfeat, rate_bits })
}

fn distortion_node<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    recon: NodeId,
    metric: DistortionMetric,
) -> Result<NodeId> {
    match metric {
        DistortionMetric::Mse => Ok(g.mse(x, recon)),
        DistortionMetric::MsSsim => {
            let dims = g.value(x).shape().to_vec();
            let mut scales = 1usize;
            while scales < 5 {
                let d = 1usize << scales;
                if dims[1] % d != 0 || dims[2] % d != 0 || dims[1] / d < 11 || dims[2] / d < 11 {
                    break;
                }
                scales += 1;
            }
            let s = ms_ssim_graph(g, x, recon, scales)?;
            let neg = g.scale_const(s, -1.0);
            Ok(g.add_const(neg, 1.0))
        }
    }
}

/// Build the full loss graph for one sample. The rate term prices every
/// coded latent including the hyper-latents; lambda_eff follows the frame
/// type. Per-frame breakdowns are computed from f64 readouts of the same
/// nodes, so their accounting identity is exact.
pub fn sample_loss<F: Scalar>(
    model: &VideoModel<F>,
    g: &mut Graph<F>,
    sample: &TrainingSample<F>,
    level: usize,
    metric: DistortionMetric,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLoss> {
    if level >= model.cfg.lambdas.len() {
        return Err(Error::invalid(format!(
            "lambda index {level} out of range (have {})",
            model.cfg.lambdas.len()
        )));
    }
    let lambda = model.cfg.lambdas[level];
    let (_, h, w) = sample.frames[0].dim();
    let pixels = (h * w) as f64;

    let frame_leaves: Vec<NodeId> = sample
        .frames
        .iter()
        .map(|f| g.leaf(f.clone().into_dyn(), false))
        .collect();

    let mut coded: Vec<(NodeId, NodeId)> = Vec::new();
    let mut breakdowns = Vec::new();
    let mut total: Option<NodeId> = None;

    for step in &sample.steps {
        let x = frame_leaves[step.frame];
        let nodes = match step.refs {
            None => code_intra_graph(model, g, x, level, mode, rng)?,
            Some((a, b)) => {
                if a >= coded.len() || b >= coded.len() {
                    return Err(Error::invalid("sample step references a later step"));
                }
                code_inter_graph(model, g, x, coded[a], coded[b], level, mode, rng)?
            }
        };
        let d = distortion_node(g, x, nodes.recon, metric)?;

        let lam_eff = if step.ftype == FrameType::I { 5.0 * lambda } else { lambda };
        let bpp = g.scale_const(nodes.rate_bits, 1.0 / pixels);
        let dl = g.scale_const(d, lam_eff);
        let frame_loss = g.add(bpp, dl);
        total = Some(match total {
            None => frame_loss,
            Some(t) => g.add(t, frame_loss),
        });

        breakdowns.push(rd_loss(g.scalar(bpp), g.scalar(d), lambda, step.ftype));
        coded.push((nodes.recon, nodes.feat));
    }

    let n = sample.steps.len() as f64;
    let node = g.scale_const(total.unwrap(), 1.0 / n);
    Ok(SampleLoss { node, frames: breakdowns })
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Square crop size; must be a multiple of 64.
    pub crop: usize,
    pub batch: usize,
    pub steps_single: usize,
    pub steps_cascaded: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Step at which the learning rate drops to `lr_final`.
    pub lr_drop_at: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub metric: DistortionMetric,
    /// Write a metrics row every this many steps (1 = every step).
    pub log_every: usize,
    /// Dataset selector for the CLI: "synthetic" or a directory of clips.
    pub dataset: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop: 64,
            batch: 8,
            steps_single: 1600,
            steps_cascaded: 400,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_drop_at: 1600,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 1,
            metric: DistortionMetric::Mse,
            log_every: 1,
            dataset: "synthetic".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.steps_single + self.steps_cascaded
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 64 != 0 {
            return Err(Error::Config("crop must be a positive multiple of 64".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.total_steps() == 0 {
            return Err(Error::Config("no training steps configured".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Parse the key-value training configuration. Lines are `key = value`;
/// `#` starts a comment; unknown keys are errors so typos do not silently
/// fall back to defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Config(format!("line {}: bad {what}: {value}", ln + 1));
        match key {
            "crop" => cfg.crop = value.parse().map_err(|_| bad("crop"))?,
            "batch" => cfg.batch = value.parse().map_err(|_| bad("batch"))?,
            "steps_single" => cfg.steps_single = value.parse().map_err(|_| bad("steps_single"))?,
            "steps_cascaded" => {
                cfg.steps_cascaded = value.parse().map_err(|_| bad("steps_cascaded"))?
            }
            "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
            "lr_final" => cfg.lr_final = value.parse().map_err(|_| bad("lr_final"))?,
            "lr_drop_at" => cfg.lr_drop_at = value.parse().map_err(|_| bad("lr_drop_at"))?,
            "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?,
            "grad_clip" => cfg.grad_clip = value.parse().map_err(|_| bad("grad_clip"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "log_every" => cfg.log_every = value.parse().map_err(|_| bad("log_every"))?,
            "dataset" => cfg.dataset = value.to_string(),
            "metric" => {
                cfg.metric = match value {
                    "mse" => DistortionMetric::Mse,
                    "msssim" => DistortionMetric::MsSsim,
                    _ => return Err(bad("metric (mse|msssim)")),
                }
            }
            _ => return Err(Error::Config(format!("line {}: unknown key {key}", ln + 1))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

/// Deterministic synthetic clips: drifting sinusoid plaids with a moving
/// high-contrast square, enough structure for motion and texture coding.
pub fn synthetic_clips<F: Scalar>(
    count: usize,
    frames_per_clip: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<Vec<Array3<F>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let fx = rng.random_range(0.03..0.12);
            let fy = rng.random_range(0.03..0.12);
            let vx = rng.random_range(-1.5..1.5f64);
            let vy = rng.random_range(-1.5..1.5f64);
            let phase = rng.random_range(0.0..6.28);
            let sq = rng.random_range(0.15..0.35);
            let sx = rng.random_range(0.1..0.6);
            let sy = rng.random_range(0.1..0.6);
            (0..frames_per_clip)
                .map(|t| {
                    let dx = vx * t as f64;
                    let dy = vy * t as f64;
                    let mut f = Array3::<F>::zeros((3, h, w));
                    for c in 0..3 {
                        let cph = phase + c as f64 * 1.1;
                        for i in 0..h {
                            for j in 0..w {
                                let val = 0.5
                                    + 0.35
                                        * ((i as f64 + dy) * fy * 6.28
                                            + (j as f64 + dx) * fx * 6.28
                                            + cph)
                                            .sin();
                                f[(c, i, j)] = F::from_f64(val);
                            }
                        }
                    }
                    // moving square occluder
                    let qx = ((sx * w as f64 + dx).rem_euclid(w as f64)) as usize;
                    let qy = ((sy * h as f64 + dy).rem_euclid(h as f64)) as usize;
                    let side = (sq * h.min(w) as f64) as usize;
                    for i in qy..(qy + side).min(h) {
                        for j in qx..(qx + side).min(w) {
                            f[(0, i, j)] = F::from_f64(0.9);
                            f[(1, i, j)] = F::from_f64(0.2);
                            f[(2, i, j)] = F::from_f64(0.3);
                        }
                    }
                    f
                })
                .collect()
        })
        .collect()
}

/// Random crop plus optional horizontal flip, shared by both stages.
fn crop_and_flip<F: Scalar>(
    frames: &[Array3<F>],
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Array3<F>>> {
    let (_, h, w) = frames[0].dim();
    if h < crop || w < crop {
        return Err(Error::invalid(format!(
            "clip {h}x{w} smaller than crop {crop}"
        )));
    }
    let oy = rng.random_range(0..=h - crop);
    let ox = rng.random_range(0..=w - crop);
    let flip = rng.random_range(0..2) == 1;
    Ok(frames
        .iter()
        .map(|f| {
            let c = f.slice(ndarray::s![.., oy..oy + crop, ox..ox + crop]);
            // owned result must be standard layout for the conv kernels
            let v = if flip {
                c.slice(ndarray::s![.., .., ..;-1]).as_standard_layout().into_owned()
            } else {
                c.as_standard_layout().into_owned()
            };
            v
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub rate_bpp: f64,
    pub distortion: f64,
    pub ema_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TrainReport {
    pub steps: usize,
    /// Mean smoothed loss over the first and last 5% of steps.
    pub first_window_mean: f64,
    pub last_window_mean: f64,
    pub final_ema: f64,
}

fn step_rng(seed: u64, step: usize, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// One optimizer step: `batch` samples, gradient accumulation, global-norm
/// clipping. Deterministic in (config seed, step), so training can resume
/// from a checkpoint and reproduce the continuation exactly.
pub fn train_step<F: Scalar>(
    model: &mut VideoModel<F>,
    opt: &mut AdamW<F>,
    clips: &[Vec<Array3<F>>],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLog> {
    let stage = if step < cfg.steps_single { Stage::Single } else { Stage::Cascaded };
    let span = match stage {
        Stage::Single => 3,
        Stage::Cascaded => 7,
    };
    let levels = model.cfg.lambdas.len();
    let mut pick_rng = step_rng(cfg.seed, step, 0);
    let lam_base = pick_rng.random_range(0..levels);

    let mut grads: HashMap<usize, ArrayD<F>> = HashMap::new();
    let mut loss_sum = 0.0;
    let mut rate_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut saw_p = false;
    let mut saw_b = false;

    for item in 0..cfg.batch {
        let mut rng = step_rng(cfg.seed, step, 1 + item as u64);
        let clip = &clips[rng.random_range(0..clips.len())];
        if clip.len() < span {
            return Err(Error::invalid(format!(
                "clip with {} frames cannot feed a {span}-frame sample",
                clip.len()
            )));
        }
        let start = rng.random_range(0..=clip.len() - span);
        let window = crop_and_flip(&clip[start..start + span], cfg.crop, &mut rng)?;
        let sample = match stage {
            Stage::Single => build_single_sample(window)?,
            Stage::Cascaded => build_cascaded_sample(window)?,
        };
        assert!(sample.has_both_types(), "sample lost a frame type");
        saw_p = true;
        saw_b = true;

        // lambda assignment covers every level within the batch
        let level = (lam_base + item) % levels;

        let mut g = Graph::<F>::new();
        let loss = sample_loss(model, &mut g, &sample, level, cfg.metric, QuantMode::Train, &mut rng)?;
        let total = loss.mean_total();
        if !total.is_finite() {
            return Err(Error::NanLoss {
                step,
                rate: loss.mean_rate(),
                distortion: loss.mean_distortion(),
            });
        }
        loss_sum += total;
        rate_sum += loss.mean_rate();
        dist_sum += loss.mean_distortion();

        let node_grads = g.backward(loss.node);
        let pg = node_grads.into_param_grads(&g);
        let scale = F::from_f64(1.0 / cfg.batch as f64);
        for (pid, grad) in pg {
            let e = grads
                .entry(pid)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *e).and(&grad).for_each(|a, &b| {
                *a = *a + b * scale;
            });
        }
    }
    assert!(saw_p && saw_b, "batch must contain both P and B sub-samples");

    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    opt.lr = if step >= cfg.lr_drop_at { cfg.lr_final } else { cfg.lr };
    opt.weight_decay = cfg.weight_decay;
    opt.apply(&mut model.ps, &grads);

    Ok(StepLog {
        step,
        stage,
        loss: loss_sum / cfg.batch as f64,
        rate_bpp: rate_sum / cfg.batch as f64,
        distortion: dist_sum / cfg.batch as f64,
        ema_loss: f64::NAN, // filled by the loop
        lr: opt.lr,
        grad_norm,
    })
}

/// Full run: SINGLE warm-up stage then CASCADED stage, metrics CSV rows to
/// `metrics`, stage-boundary and final checkpoints to `ckpt_dir` when set.
pub fn train<F: Scalar>(
    model: &mut VideoModel<F>,
    clips: &[Vec<Array3<F>>],
    cfg: &TrainConfig,
    metrics: &mut dyn IoWrite,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("no training clips"));
    }
    writeln!(metrics, "# ucvc-train-metrics-v1")?;
    writeln!(
        metrics,
        "step,stage,loss,rate_bpp,distortion,ema_loss,lr,grad_norm"
    )?;

    let mut opt = AdamW::new(&model.ps, cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let total = cfg.total_steps();
    let window = (total / 20).max(1);
    let mut ema = f64::NAN;
    let mut first: Vec<f64> = Vec::new();
    let mut last: std::collections::VecDeque<f64> = std::collections::VecDeque::new();

    for step in 0..total {
        let mut log = train_step(model, &mut opt, clips, cfg, step)?;
        ema = if ema.is_nan() { log.loss } else { 0.99 * ema + 0.01 * log.loss };
        log.ema_loss = ema;
        if first.len() < window {
            first.push(log.loss);
        }
        last.push_back(log.loss);
        if last.len() > window {
            last.pop_front();
        }
        if step % cfg.log_every == 0 || step + 1 == total {
            let stage = match log.stage {
                Stage::Single => "single",
                Stage::Cascaded => "cascaded",
            };
            writeln!(
                metrics,
                "{},{stage},{:.6},{:.6},{:.8},{:.6},{:.6e},{:.4}",
                log.step, log.loss, log.rate_bpp, log.distortion, log.ema_loss, log.lr, log.grad_norm
            )?;
        }
        if let Some(dir) = ckpt_dir {
            let boundary = step + 1 == cfg.steps_single || step + 1 == total;
            if boundary {
                let name = if step + 1 == total {
                    "final.uckp".to_string()
                } else {
                    "stage_single.uckp".to_string()
                };
                let opt_state = OptState {
                    m: opt.state().0.to_vec(),
                    v: opt.state().1.to_vec(),
                    step: opt.step,
                };
                save_checkpoint(&dir.join(name), model, Some(&opt_state))?;
            }
        }
    }

    Ok(TrainReport {
        steps: total,
        first_window_mean: first.iter().sum::<f64>() / first.len() as f64,
        last_window_mean: last.iter().sum::<f64>() / last.len() as f64,
        final_ema: ema,
    })
}
