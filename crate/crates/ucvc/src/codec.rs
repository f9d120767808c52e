//! Sequence encoding and decoding: frame packets, the container format,
//! and the bounded decoded-frame state shared by both directions.
//!
//! Everything the decoder computes is a function of decoded symbols and
//! model parameters only, and both sides run the identical kernel code on
//! identical values, so encoder-side reconstructions match decoder output
//! bit for bit. The encoder additionally runs motion estimation, but the
//! estimated flows reach the decoder only through the quantized motion
//! latent.

use std::collections::HashMap;

use ndarray::{Array3, ArrayD, Ix3};

use crate::autodiff::{Graph, NodeId};
use crate::entropy::{FactorizedParams, GaussianCoder};
use crate::evaluation::{self, Psnr};
use crate::kernels::Scalar;
use crate::model::VideoModel;
use crate::scheduler::{self, FramePlan, FrameType, GopStructure};
use crate::transforms::{dequantize, quantize, symbols_leaf, QuantMode};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"UCVC";
const VERSION: u8 = 1;
/// Spatial alignment required by the transform stack (4 latent strides plus
/// 2 hyper strides).
pub const PAD_MULTIPLE: usize = 64;
/// Container header length in bytes.
pub const HEADER_BYTES: usize = 25;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CodingMode {
    LowDelayP,
    HierarchicalB,
    /// Encode under both structures, keep the lower RD cost at the
    /// requested lambda.
    Optimal,
}

impl CodingMode {
    fn fixed(self) -> Option<GopStructure> {
        match self {
            CodingMode::LowDelayP => Some(GopStructure::LowDelayP),
            CodingMode::HierarchicalB => Some(GopStructure::HierarchicalB),
            CodingMode::Optimal => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameStats {
    pub display_index: usize,
    pub ftype: FrameType,
    /// Actual packet size in bits (flags, length fields, payloads).
    pub bits: usize,
    pub mse: f64,
    pub psnr: Psnr,
    pub ms_ssim: Option<f64>,
}

#[derive(Clone)]
pub struct EncodedSequence<F: Scalar> {
    pub container: Vec<u8>,
    /// Display-ordered per-frame stats.
    pub stats: Vec<FrameStats>,
    /// Encoder-side reconstructions in display order, cropped to the
    /// original dimensions. Decoding the container reproduces these
    /// exactly.
    pub recons: Vec<Array3<F>>,
    /// Structure actually coded (Optimal resolves to one of the two).
    pub structure: GopStructure,
    pub gop_size: usize,
    pub lambda_index: usize,
}

impl<F: Scalar> EncodedSequence<F> {
    pub fn total_bits(&self) -> usize {
        self.container.len() * 8
    }

    pub fn mean_bpp(&self, width: usize, height: usize) -> f64 {
        self.total_bits() as f64 / (width * height * self.stats.len()) as f64
    }

    pub fn mean_mse(&self) -> f64 {
        self.stats.iter().map(|s| s.mse).sum::<f64>() / self.stats.len() as f64
    }
}

pub struct DecodedSequence<F: Scalar> {
    pub frames: Vec<Array3<F>>,
    pub structure: GopStructure,
    pub gop_size: usize,
    pub lambda_index: usize,
}

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

/// Whole-sample symmetric index: 0 1 2 ... n-1 n-2 ... reflected with
/// period 2n-2, so any pad width is safe.
fn sym_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pad on the bottom/right to the next multiple. Returns the pad
/// widths so the decoder can crop.
pub fn pad_symmetric<F: Scalar>(x: &Array3<F>, multiple: usize) -> (Array3<F>, usize, usize) {
    let (c, h, w) = x.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return (x.clone(), 0, 0);
    }
    let mut out = Array3::<F>::zeros((c, ph, pw));
    for ci in 0..c {
        for i in 0..ph {
            let si = sym_index(i, h);
            for j in 0..pw {
                out[(ci, i, j)] = x[(ci, si, sym_index(j, w))];
            }
        }
    }
    (out, pw - w, ph - h)
}

fn crop<F: Scalar>(x: &Array3<F>, h: usize, w: usize) -> Array3<F> {
    x.slice(ndarray::s![.., ..h, ..w]).to_owned()
}

fn as3<F: Scalar>(v: &ArrayD<F>) -> Array3<F> {
    v.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a rank-3 tensor")
        .to_owned()
}

// ---------------------------------------------------------------------------
// Byte-level helpers
// ---------------------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::corrupt(format!(
                "container truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn type_code(t: FrameType) -> u8 {
    match t {
        FrameType::I => 0,
        FrameType::P => 1,
        FrameType::B => 2,
    }
}

fn code_type(v: u8) -> Result<FrameType> {
    match v {
        0 => Ok(FrameType::I),
        1 => Ok(FrameType::P),
        2 => Ok(FrameType::B),
        _ => Err(Error::corrupt(format!("unknown frame type code {v}"))),
    }
}

// ---------------------------------------------------------------------------
// Per-frame coding
// ---------------------------------------------------------------------------

/// Reconstruction plus the feature handed to future frames.
struct CodedFrame<F: Scalar> {
    payloads: Vec<Vec<u8>>,
    xhat: Array3<F>,
    feat: Array3<F>,
}

struct DecodedFrame<F: Scalar> {
    xhat: Array3<F>,
    feat: Array3<F>,
}

fn encode_intra<F: Scalar>(
    model: &VideoModel<F>,
    gc: &mut GaussianCoder,
    prior: &FactorizedParams,
    x: &Array3<F>,
    level: usize,
) -> Result<CodedFrame<F>> {
    let ps = &model.ps;
    let cdc = &model.image;
    let mut g = Graph::<F>::new();
    let xl = g.leaf(x.clone().into_dyn(), false);
    let y = cdc.analysis.apply(ps, &mut g, xl, false);
    let (sy, sz) = cdc.gains.scales(ps, &mut g, level, false)?;
    let qy = quantize(&mut g, y, sy, QuantMode::Eval, None)?;
    let z = cdc.hyper.analyze(ps, &mut g, qy.scaled, false);
    let qz = quantize(&mut g, z, sz, QuantMode::Eval, None)?;
    let hf = cdc.hyper.synthesize(ps, &mut g, qz.recon, false);
    let (mu, sigma) = cdc.head.apply(ps, &mut g, hf, None, false);
    let xr = cdc.synthesis.apply(ps, &mut g, qy.recon, false);
    let feat = model.feat_ext.apply(ps, &mut g, xr, false);

    let zsym = qz.symbols.as_ref().unwrap();
    let ysym = qy.symbols.as_ref().unwrap();
    let zpay = prior.encode_grid(&zsym.view());
    let mu3 = as3(g.value(mu));
    let sg3 = as3(g.value(sigma));
    let ypay = gc.encode_grid(&ysym.view(), &mu3.view(), &sg3.view());

    Ok(CodedFrame {
        payloads: vec![zpay, ypay],
        xhat: as3(g.value(xr)),
        feat: as3(g.value(feat)),
    })
}

fn decode_intra<F: Scalar>(
    model: &VideoModel<F>,
    gc: &mut GaussianCoder,
    prior: &FactorizedParams,
    payloads: &[Vec<u8>],
    dims: (usize, usize),
    level: usize,
) -> Result<DecodedFrame<F>> {
    let ps = &model.ps;
    let cdc = &model.image;
    let ch = model.cfg.image_channels;
    let (ph, pw) = dims;
    let mut g = Graph::<F>::new();
    let (sy, sz) = cdc.gains.scales(ps, &mut g, level, false)?;
    let zsym = prior.decode_grid(&payloads[0], (ch, ph / 64, pw / 64))?;
    let zl = symbols_leaf(&mut g, &zsym);
    let zhat = dequantize(&mut g, zl, sz);
    let hf = cdc.hyper.synthesize(ps, &mut g, zhat, false);
    let (mu, sigma) = cdc.head.apply(ps, &mut g, hf, None, false);
    let mu3 = as3(g.value(mu));
    let sg3 = as3(g.value(sigma));
    let ysym = gc.decode_grid(&payloads[1], &mu3.view(), &sg3.view())?;
    let yl = symbols_leaf(&mut g, &ysym);
    let yhat = dequantize(&mut g, yl, sy);
    let xr = cdc.synthesis.apply(ps, &mut g, yhat, false);
    let feat = model.feat_ext.apply(ps, &mut g, xr, false);
    Ok(DecodedFrame {
        xhat: as3(g.value(xr)),
        feat: as3(g.value(feat)),
    })
}

/// Shared tail of inter-frame coding: from decoded flows and the two
/// reference features to the reconstructed frame. Both directions call
/// this with bit-identical inputs.
#[allow(clippy::too_many_arguments)]
fn inter_tail<F: Scalar>(
    model: &VideoModel<F>,
    g: &mut Graph<F>,
    f1: NodeId,
    f2: NodeId,
    feat1: NodeId,
    feat2: NodeId,
) -> Result<crate::transforms::ContextNodes> {
    model
        .miner
        .mine(&model.ps, g, feat1, feat2, f1, f2, false)
}

fn encode_inter<F: Scalar>(
    model: &VideoModel<F>,
    gc: &mut GaussianCoder,
    mot_prior: &FactorizedParams,
    ctx_prior: &FactorizedParams,
    x: &Array3<F>,
    ref1: &(Array3<F>, Array3<F>),
    ref2: &(Array3<F>, Array3<F>),
    level: usize,
) -> Result<CodedFrame<F>> {
    let ps = &model.ps;
    let mut g = Graph::<F>::new();
    let xl = g.leaf(x.clone().into_dyn(), false);
    let r1 = g.leaf(ref1.0.clone().into_dyn(), false);
    let r2 = g.leaf(ref2.0.clone().into_dyn(), false);

    // motion: estimate, code, decode
    let f1e = model.flow.estimate(ps, &mut g, xl, r1, false)?;
    let f2e = model.flow.estimate(ps, &mut g, xl, r2, false)?;
    let mo = g.concat(&[f1e, f2e]);
    let mdc = &model.motion;
    let my = mdc.analysis.apply(ps, &mut g, mo, false);
    let (msy, msz) = mdc.gains.scales(ps, &mut g, level, false)?;
    let qmy = quantize(&mut g, my, msy, QuantMode::Eval, None)?;
    let mz = mdc.hyper.analyze(ps, &mut g, qmy.scaled, false);
    let qmz = quantize(&mut g, mz, msz, QuantMode::Eval, None)?;
    let mhf = mdc.hyper.synthesize(ps, &mut g, qmz.recon, false);
    let (mmu, msig) = mdc.head.apply(ps, &mut g, mhf, None, false);
    let mo_hat = mdc.synthesis.apply(ps, &mut g, qmy.recon, false);
    let f1 = g.slice_chan(mo_hat, 0, 2);
    let f2 = g.slice_chan(mo_hat, 2, 4);

    // context from warped reference features
    let feat1 = g.leaf(ref1.1.clone().into_dyn(), false);
    let feat2 = g.leaf(ref2.1.clone().into_dyn(), false);
    let ctx = inter_tail(model, &mut g, f1, f2, feat1, feat2)?;

    // conditional transform coding
    let cdc = &model.inter;
    let y = cdc.analysis.apply(ps, &mut g, xl, &ctx, false);
    let (sy, sz) = cdc.gains.scales(ps, &mut g, level, false)?;
    let qy = quantize(&mut g, y, sy, QuantMode::Eval, None)?;
    let z = cdc.hyper.analyze(ps, &mut g, qy.scaled, false);
    let qz = quantize(&mut g, z, sz, QuantMode::Eval, None)?;
    let hf = cdc.hyper.synthesize(ps, &mut g, qz.recon, false);
    let tp = cdc.temporal.apply(ps, &mut g, ctx.c2, false);
    let (mu, sigma) = cdc.head.apply(ps, &mut g, hf, Some(tp), false);
    let sfeat = cdc.synthesis.apply(ps, &mut g, qy.recon, &ctx, false);
    let (frame, pfeat) = cdc.framegen.apply(ps, &mut g, sfeat, ctx.c0, false);

    let mzpay = mot_prior.encode_grid(&qmz.symbols.as_ref().unwrap().view());
    let mmu3 = as3(g.value(mmu));
    let msg3 = as3(g.value(msig));
    let mypay = gc.encode_grid(&qmy.symbols.as_ref().unwrap().view(), &mmu3.view(), &msg3.view());
    let czpay = ctx_prior.encode_grid(&qz.symbols.as_ref().unwrap().view());
    let mu3 = as3(g.value(mu));
    let sg3 = as3(g.value(sigma));
    let cypay = gc.encode_grid(&qy.symbols.as_ref().unwrap().view(), &mu3.view(), &sg3.view());

    Ok(CodedFrame {
        payloads: vec![mzpay, mypay, czpay, cypay],
        xhat: as3(g.value(frame)),
        feat: as3(g.value(pfeat)),
    })
}

fn decode_inter<F: Scalar>(
    model: &VideoModel<F>,
    gc: &mut GaussianCoder,
    mot_prior: &FactorizedParams,
    ctx_prior: &FactorizedParams,
    payloads: &[Vec<u8>],
    ref1: &(Array3<F>, Array3<F>),
    ref2: &(Array3<F>, Array3<F>),
    dims: (usize, usize),
    level: usize,
) -> Result<DecodedFrame<F>> {
    let ps = &model.ps;
    let (ph, pw) = dims;
    let mut g = Graph::<F>::new();

    // motion
    let mdc = &model.motion;
    let mch = model.cfg.motion_channels;
    let (msy, msz) = mdc.gains.scales(ps, &mut g, level, false)?;
    let mzsym = mot_prior.decode_grid(&payloads[0], (mch, ph / 64, pw / 64))?;
    let mzl = symbols_leaf(&mut g, &mzsym);
    let mzhat = dequantize(&mut g, mzl, msz);
    let mhf = mdc.hyper.synthesize(ps, &mut g, mzhat, false);
    let (mmu, msig) = mdc.head.apply(ps, &mut g, mhf, None, false);
    let mmu3 = as3(g.value(mmu));
    let msg3 = as3(g.value(msig));
    let mysym = gc.decode_grid(&payloads[1], &mmu3.view(), &msg3.view())?;
    let myl = symbols_leaf(&mut g, &mysym);
    let myhat = dequantize(&mut g, myl, msy);
    let mo_hat = mdc.synthesis.apply(ps, &mut g, myhat, false);
    let f1 = g.slice_chan(mo_hat, 0, 2);
    let f2 = g.slice_chan(mo_hat, 2, 4);

    let feat1 = g.leaf(ref1.1.clone().into_dyn(), false);
    let feat2 = g.leaf(ref2.1.clone().into_dyn(), false);
    let ctx = inter_tail(model, &mut g, f1, f2, feat1, feat2)?;

    // contextual latent
    let cdc = &model.inter;
    let cch = model.cfg.context_channels;
    let (sy, sz) = cdc.gains.scales(ps, &mut g, level, false)?;
    let czsym = ctx_prior.decode_grid(&payloads[2], (cch, ph / 64, pw / 64))?;
    let czl = symbols_leaf(&mut g, &czsym);
    let czhat = dequantize(&mut g, czl, sz);
    let hf = cdc.hyper.synthesize(ps, &mut g, czhat, false);
    let tp = cdc.temporal.apply(ps, &mut g, ctx.c2, false);
    let (mu, sigma) = cdc.head.apply(ps, &mut g, hf, Some(tp), false);
    let mu3 = as3(g.value(mu));
    let sg3 = as3(g.value(sigma));
    let cysym = gc.decode_grid(&payloads[3], &mu3.view(), &sg3.view())?;
    let cyl = symbols_leaf(&mut g, &cysym);
    let cyhat = dequantize(&mut g, cyl, sy);
    let sfeat = cdc.synthesis.apply(ps, &mut g, cyhat, &ctx, false);
    let (frame, pfeat) = cdc.framegen.apply(ps, &mut g, sfeat, ctx.c0, false);

    Ok(DecodedFrame {
        xhat: as3(g.value(frame)),
        feat: as3(g.value(pfeat)),
    })
}

// ---------------------------------------------------------------------------
// Sequence encoding
// ---------------------------------------------------------------------------

fn check_frames<F: Scalar>(frames: &[Array3<F>]) -> Result<(usize, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot encode an empty sequence"))?;
    let (c, h, w) = first.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::shape("input frame", "(3, H>0, W>0)", format!("{:?}", first.dim())));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != first.dim() {
            return Err(Error::shape(
                format!("frame {i}"),
                format!("{:?}", first.dim()),
                format!("{:?}", f.dim()),
            ));
        }
    }
    Ok((h, w))
}

/// Last encode position at which each display index is used as a reference.
fn last_use(plan: &[FramePlan], order: &[usize]) -> Vec<usize> {
    let mut last = vec![0usize; plan.len()];
    for (pos, &t) in order.iter().enumerate() {
        for r in [plan[t].ref1, plan[t].ref2].into_iter().flatten() {
            last[r] = last[r].max(pos);
        }
    }
    last
}

fn reference_bound(structure: GopStructure, gop_size: usize) -> usize {
    match structure {
        GopStructure::LowDelayP => 2,
        GopStructure::HierarchicalB => (usize::BITS - gop_size.leading_zeros()) as usize + 2,
    }
}

fn encode_with_structure<F: Scalar>(
    model: &VideoModel<F>,
    frames: &[Array3<F>],
    gop_size: usize,
    structure: GopStructure,
    level: usize,
) -> Result<EncodedSequence<F>> {
    let (h, w) = check_frames(frames)?;
    let n = frames.len();
    let plan = scheduler::plan_sequence(n, gop_size, structure)?;
    let order = scheduler::encode_order(&plan);
    let last = last_use(&plan, &order);
    let bound = reference_bound(structure, gop_size);

    let mut gc = GaussianCoder::new();
    let img_prior = model.image.prior.to_coding(&model.ps);
    let mot_prior = model.motion.prior.to_coding(&model.ps);
    let ctx_prior = model.inter.prior.to_coding(&model.ps);

    let padded: Vec<Array3<F>> = frames
        .iter()
        .map(|f| pad_symmetric(f, PAD_MULTIPLE).0)
        .collect();
    let (pad_r, pad_b) = {
        let (_, r, b) = pad_symmetric(&frames[0], PAD_MULTIPLE);
        (r, b)
    };
    let (ph, pw) = (h + pad_b, w + pad_r);

    let mut container = Vec::new();
    container.extend_from_slice(MAGIC);
    container.push(VERSION);
    put_u32(&mut container, w as u32);
    put_u32(&mut container, h as u32);
    put_u32(&mut container, n as u32);
    put_u32(&mut container, gop_size as u32);
    container.push(match structure {
        GopStructure::LowDelayP => 0,
        GopStructure::HierarchicalB => 1,
    });
    container.push(level as u8);
    container.push(pad_r as u8);
    container.push(pad_b as u8);
    debug_assert_eq!(container.len(), HEADER_BYTES);

    let mut state: HashMap<usize, (Array3<F>, Array3<F>)> = HashMap::new();
    let mut stats: Vec<Option<FrameStats>> = vec![None; n];
    let mut recons: Vec<Option<Array3<F>>> = vec![None; n];

    for (pos, &t) in order.iter().enumerate() {
        let p = plan[t];
        let coded = match p.ftype {
            FrameType::I => encode_intra(model, &mut gc, &img_prior, &padded[t], level)?,
            FrameType::P | FrameType::B => {
                let get = |r: usize| {
                    state.get(&r).ok_or(Error::MissingReference {
                        frame: t,
                        reference: r,
                    })
                };
                let r1 = get(p.ref1.unwrap())?.clone();
                let r2 = get(p.ref2.unwrap())?.clone();
                encode_inter(
                    model, &mut gc, &mot_prior, &ctx_prior, &padded[t], &r1, &r2, level,
                )?
            }
        };

        let mut packet_bits = 8usize;
        container.push(type_code(p.ftype) | ((level as u8) << 2));
        for pay in &coded.payloads {
            put_u32(&mut container, pay.len() as u32);
            container.extend_from_slice(pay);
            packet_bits += 8 * (4 + pay.len());
        }

        let xc = crop(&coded.xhat, h, w);
        let m = evaluation::mse(&frames[t], &xc)?;
        stats[t] = Some(FrameStats {
            display_index: t,
            ftype: p.ftype,
            bits: packet_bits,
            mse: m,
            psnr: evaluation::psnr(&frames[t], &xc)?,
            ms_ssim: evaluation::ms_ssim_or_none(&frames[t], &xc),
        });
        recons[t] = Some(xc);

        state.insert(t, (coded.xhat, coded.feat));
        state.retain(|&k, _| last[k] > pos);
        debug_assert!(
            state.len() <= bound,
            "reference state {} exceeds bound {bound}",
            state.len()
        );
    }

    let stats: Vec<FrameStats> = stats.into_iter().map(|s| s.unwrap()).collect();
    let packet_bits: usize = stats.iter().map(|s| s.bits).sum();
    debug_assert_eq!(HEADER_BYTES * 8 + packet_bits, container.len() * 8);
    let _ = (ph, pw);

    Ok(EncodedSequence {
        container,
        stats,
        recons: recons.into_iter().map(|r| r.unwrap()).collect(),
        structure,
        gop_size,
        lambda_index: level,
    })
}

/// Encode a sequence. `Optimal` encodes under both structures and keeps
/// the one with the lower rate-distortion cost at the requested lambda;
/// the resolved structure is recorded in the container header.
pub fn encode_sequence<F: Scalar>(
    model: &VideoModel<F>,
    frames: &[Array3<F>],
    gop_size: usize,
    mode: CodingMode,
    lambda_index: usize,
) -> Result<EncodedSequence<F>> {
    if lambda_index >= model.cfg.lambdas.len() {
        return Err(Error::invalid(format!(
            "lambda index {lambda_index} out of range (have {})",
            model.cfg.lambdas.len()
        )));
    }
    if gop_size == 0 {
        return Err(Error::invalid("gop_size must be at least 1"));
    }
    if let Some(structure) = mode.fixed() {
        return encode_with_structure(model, frames, gop_size, structure, lambda_index);
    }
    let (h, w) = check_frames(frames)?;
    let p = encode_with_structure(model, frames, gop_size, GopStructure::LowDelayP, lambda_index)?;
    let b = encode_with_structure(
        model,
        frames,
        gop_size,
        GopStructure::HierarchicalB,
        lambda_index,
    )?;
    let lambda = model.cfg.lambdas[lambda_index];
    let pick = evaluation::select_by_rd_cost(
        (p.mean_bpp(w, h), p.mean_mse()),
        (b.mean_bpp(w, h), b.mean_mse()),
        lambda,
    );
    Ok(match pick {
        GopStructure::LowDelayP => p,
        GopStructure::HierarchicalB => b,
    })
}

// ---------------------------------------------------------------------------
// Sequence decoding
// ---------------------------------------------------------------------------

pub fn decode_sequence<F: Scalar>(
    model: &VideoModel<F>,
    container: &[u8],
) -> Result<DecodedSequence<F>> {
    let mut rd = Reader::new(container);
    if rd.bytes(4)? != MAGIC {
        return Err(Error::corrupt("bad magic"));
    }
    if rd.u8()? != VERSION {
        return Err(Error::corrupt("unsupported container version"));
    }
    let w = rd.u32()? as usize;
    let h = rd.u32()? as usize;
    let n = rd.u32()? as usize;
    let gop_size = rd.u32()? as usize;
    let structure = match rd.u8()? {
        0 => GopStructure::LowDelayP,
        1 => GopStructure::HierarchicalB,
        v => return Err(Error::corrupt(format!("unknown structure code {v}"))),
    };
    let level = rd.u8()? as usize;
    let pad_r = rd.u8()? as usize;
    let pad_b = rd.u8()? as usize;

    if w == 0 || h == 0 || n == 0 {
        return Err(Error::corrupt("empty dimensions in header"));
    }
    if level >= model.cfg.lambdas.len() {
        return Err(Error::corrupt(format!(
            "lambda index {level} outside the model's {} levels",
            model.cfg.lambdas.len()
        )));
    }
    let (ph, pw) = (h + pad_b, w + pad_r);
    if ph % PAD_MULTIPLE != 0 || pw % PAD_MULTIPLE != 0 {
        return Err(Error::corrupt("padded dimensions misaligned"));
    }

    let plan = scheduler::plan_sequence(n, gop_size, structure)
        .map_err(|e| Error::corrupt(format!("header does not yield a plan: {e}")))?;
    let violations = scheduler::validate_plan(&plan, n, gop_size);
    if !violations.is_empty() {
        return Err(Error::corrupt(format!(
            "rebuilt plan is invalid: {}",
            violations.join("; ")
        )));
    }
    let order = scheduler::encode_order(&plan);
    let last = last_use(&plan, &order);

    let mut gc = GaussianCoder::new();
    let img_prior = model.image.prior.to_coding(&model.ps);
    let mot_prior = model.motion.prior.to_coding(&model.ps);
    let ctx_prior = model.inter.prior.to_coding(&model.ps);

    let mut state: HashMap<usize, (Array3<F>, Array3<F>)> = HashMap::new();
    let mut out: Vec<Option<Array3<F>>> = vec![None; n];

    for (pos, &t) in order.iter().enumerate() {
        let p = plan[t];
        let flags = rd.u8()?;
        if flags & !0x3F != 0 {
            return Err(Error::corrupt("reserved flag bits set"));
        }
        let ftype = code_type(flags & 0x03)?;
        let plevel = (flags >> 2) as usize;
        if ftype != p.ftype {
            return Err(Error::corrupt(format!(
                "frame {t}: packet says {ftype}, plan says {}",
                p.ftype
            )));
        }
        if plevel != level {
            return Err(Error::corrupt(format!(
                "frame {t}: packet lambda {plevel} disagrees with header {level}"
            )));
        }
        let count = if ftype == FrameType::I { 2 } else { 4 };
        let mut payloads = Vec::with_capacity(count);
        for _ in 0..count {
            let len = rd.u32()? as usize;
            payloads.push(rd.bytes(len)?.to_vec());
        }

        let decoded = match ftype {
            FrameType::I => decode_intra(model, &mut gc, &img_prior, &payloads, (ph, pw), level)?,
            FrameType::P | FrameType::B => {
                let get = |r: usize| {
                    state.get(&r).ok_or(Error::MissingReference {
                        frame: t,
                        reference: r,
                    })
                };
                let r1 = get(p.ref1.unwrap())?.clone();
                let r2 = get(p.ref2.unwrap())?.clone();
                decode_inter(
                    model, &mut gc, &mot_prior, &ctx_prior, &payloads, &r1, &r2, (ph, pw), level,
                )?
            }
        };
        out[t] = Some(crop(&decoded.xhat, h, w));
        state.insert(t, (decoded.xhat, decoded.feat));
        state.retain(|&k, _| last[k] > pos);
    }
    if !rd.done() {
        return Err(Error::corrupt(format!(
            "{} trailing bytes after the last packet",
            container.len() - rd.pos
        )));
    }

    Ok(DecodedSequence {
        frames: out.into_iter().map(|f| f.unwrap()).collect(),
        structure,
        gop_size,
        lambda_index: level,
    })
}
