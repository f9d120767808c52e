//! Model assembly and persistence: configuration, construction of the
//! image/motion/contextual codecs plus flow estimator and context miner,
//! and the named-tensor checkpoint format (magic "UCKP").

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context::ContextMiner;
use crate::kernels::Scalar;
use crate::motion::FlowEstimator;
use crate::nn::ParamSet;
use crate::transforms::{
    CtxAnalysis, CtxSynthesis, EntropyHead, FactorizedPrior, FeatureExtractor, FrameGenerator,
    GainTable, HyperCodec, PlainAnalysis, PlainSynthesis, TemporalPrior,
};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"UCKP";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width of the intra image codec.
    pub image_channels: usize,
    /// Channel width of the joint two-flow motion codec.
    pub motion_channels: usize,
    /// Channel width of the contextual codec, context pyramid, and
    /// propagated features.
    pub context_channels: usize,
    /// Residual blocks per stride stage.
    pub res_blocks: usize,
    /// Pyramid levels in the flow estimator.
    pub flow_levels: usize,
    /// Hidden width of each flow refinement block.
    pub flow_hidden: usize,
    /// Rate-distortion tradeoffs, ascending; index selects the bitrate.
    pub lambdas: Vec<f64>,
}

impl ModelConfig {
    /// Small configuration that trains on a single desktop core.
    pub fn desk() -> Self {
        ModelConfig {
            image_channels: 64,
            motion_channels: 48,
            context_channels: 48,
            res_blocks: 2,
            flow_levels: 3,
            flow_hidden: 16,
            lambdas: vec![85.0, 210.0, 425.0, 840.0],
        }
    }

    /// Full-scale configuration (192/128/128 channels).
    pub fn full() -> Self {
        ModelConfig {
            image_channels: 192,
            motion_channels: 128,
            context_channels: 128,
            res_blocks: 2,
            flow_levels: 3,
            flow_hidden: 32,
            lambdas: vec![85.0, 210.0, 425.0, 840.0],
        }
    }

    /// Minimal configuration for tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_channels: 8,
            motion_channels: 6,
            context_channels: 6,
            res_blocks: 1,
            flow_levels: 2,
            flow_hidden: 6,
            lambdas: vec![85.0, 425.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0
            || self.motion_channels == 0
            || self.context_channels == 0
            || self.flow_hidden == 0
        {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.flow_levels == 0 || self.flow_levels > 6 {
            return Err(Error::invalid("flow_levels must be in 1..=6"));
        }
        if self.lambdas.is_empty() || self.lambdas.len() > 16 {
            return Err(Error::invalid("need 1..=16 lambdas"));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lambdas must be positive and finite"));
        }
        if self.lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("lambdas must be strictly ascending"));
        }
        Ok(())
    }
}

/// Context-free codec: image (3ch) or motion (4ch).
#[derive(Clone, Debug)]
pub struct PlainCodec {
    pub analysis: PlainAnalysis,
    pub synthesis: PlainSynthesis,
    pub hyper: HyperCodec,
    pub head: EntropyHead,
    pub gains: GainTable,
    pub prior: FactorizedPrior,
}

impl PlainCodec {
    fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        io_ch: usize,
        ch: usize,
        res_blocks: usize,
        lambdas: &[f64],
    ) -> Self {
        PlainCodec {
            analysis: PlainAnalysis::new(ps, rng, &format!("{name}.an"), io_ch, ch, res_blocks),
            synthesis: PlainSynthesis::new(ps, rng, &format!("{name}.sy"), ch, io_ch, res_blocks),
            hyper: HyperCodec::new(ps, rng, &format!("{name}.hy"), ch),
            head: EntropyHead::new(ps, rng, &format!("{name}.eh"), ch, false),
            gains: GainTable::new(ps, &format!("{name}.gain"), lambdas, ch),
            prior: FactorizedPrior::new(ps, &format!("{name}.fp"), ch),
        }
    }
}

/// Conditional codec for inter frames.
#[derive(Clone, Debug)]
pub struct ContextCodec {
    pub analysis: CtxAnalysis,
    pub synthesis: CtxSynthesis,
    pub hyper: HyperCodec,
    pub temporal: TemporalPrior,
    pub head: EntropyHead,
    pub gains: GainTable,
    pub prior: FactorizedPrior,
    pub framegen: FrameGenerator,
}

impl ContextCodec {
    fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        res_blocks: usize,
        lambdas: &[f64],
    ) -> Self {
        ContextCodec {
            analysis: CtxAnalysis::new(ps, rng, &format!("{name}.an"), 3, ch, res_blocks),
            synthesis: CtxSynthesis::new(ps, rng, &format!("{name}.sy"), ch, res_blocks),
            hyper: HyperCodec::new(ps, rng, &format!("{name}.hy"), ch),
            temporal: TemporalPrior::new(ps, rng, &format!("{name}.tp"), ch),
            head: EntropyHead::new(ps, rng, &format!("{name}.eh"), ch, true),
            gains: GainTable::new(ps, &format!("{name}.gain"), lambdas, ch),
            prior: FactorizedPrior::new(ps, &format!("{name}.fp"), ch),
            framegen: FrameGenerator::new(ps, rng, &format!("{name}.fg"), ch, res_blocks),
        }
    }
}

/// The whole trainable system. Parameter construction is deterministic in
/// (config, seed), which the checkpoint loader relies on.
pub struct VideoModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub ps: ParamSet<F>,
    pub image: PlainCodec,
    pub motion: PlainCodec,
    pub inter: ContextCodec,
    pub flow: FlowEstimator,
    pub miner: ContextMiner,
    pub feat_ext: FeatureExtractor,
}

impl<F: Scalar> VideoModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = PlainCodec::new(
            &mut ps,
            &mut rng,
            "img",
            3,
            cfg.image_channels,
            cfg.res_blocks,
            &cfg.lambdas,
        );
        let motion = PlainCodec::new(
            &mut ps,
            &mut rng,
            "mot",
            4,
            cfg.motion_channels,
            cfg.res_blocks,
            &cfg.lambdas,
        );
        let inter = ContextCodec::new(
            &mut ps,
            &mut rng,
            "ctx",
            cfg.context_channels,
            cfg.res_blocks,
            &cfg.lambdas,
        );
        let flow = FlowEstimator::new(&mut ps, &mut rng, "flow", cfg.flow_levels, cfg.flow_hidden);
        let miner = ContextMiner::new(&mut ps, &mut rng, "mine", cfg.context_channels);
        let feat_ext = FeatureExtractor::new(&mut ps, &mut rng, "fext", cfg.context_channels);
        Ok(VideoModel {
            cfg,
            ps,
            image,
            motion,
            inter,
            flow,
            miner,
            feat_ext,
        })
    }

    pub fn lambda_count(&self) -> usize {
        self.cfg.lambdas.len()
    }
}

/// Optimizer slice of a checkpoint: first and second moments plus the
/// step count, in parameter-id order.
pub struct OptState<F: Scalar> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub step: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::corrupt("checkpoint truncated"))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn write_tensor<F: Scalar>(w: &mut impl Write, t: &ArrayD<F>) -> Result<()> {
    let dims = t.shape();
    if dims.len() > u8::MAX as usize {
        return Err(Error::invalid("tensor rank too large"));
    }
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        write_u32(w, d as u32)?;
    }
    for v in t.iter() {
        w.write_all(&(*v).to_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<F: Scalar>(r: &mut impl Read) -> Result<ArrayD<F>> {
    let rank = read_exact::<1>(r)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    if n > 1 << 28 {
        return Err(Error::corrupt("tensor unreasonably large"));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(F::from_f64(read_f64(r)?));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| Error::corrupt("bad tensor shape"))
}

/// Serialize config, all named parameters, and optionally optimizer state.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &VideoModel<F>,
    opt: Option<&OptState<F>>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let cfg = &model.cfg;
    write_u32(&mut w, cfg.image_channels as u32)?;
    write_u32(&mut w, cfg.motion_channels as u32)?;
    write_u32(&mut w, cfg.context_channels as u32)?;
    write_u32(&mut w, cfg.res_blocks as u32)?;
    write_u32(&mut w, cfg.flow_levels as u32)?;
    write_u32(&mut w, cfg.flow_hidden as u32)?;
    write_u32(&mut w, cfg.lambdas.len() as u32)?;
    for &l in &cfg.lambdas {
        w.write_all(&l.to_le_bytes())?;
    }

    write_u32(&mut w, model.ps.len() as u32)?;
    for id in 0..model.ps.len() {
        let name = model.ps.name(id);
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid("parameter name too long"));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(&mut w, model.ps.get(id))?;
    }

    match opt {
        None => w.write_all(&[0u8])?,
        Some(st) => {
            if st.m.len() != model.ps.len() || st.v.len() != model.ps.len() {
                return Err(Error::invalid("optimizer state length mismatch"));
            }
            w.write_all(&[1u8])?;
            write_u64(&mut w, st.step)?;
            for t in &st.m {
                write_tensor(&mut w, t)?;
            }
            for t in &st.v {
                write_tensor(&mut w, t)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild the model structure from the stored config, then overwrite
/// every parameter from the archive. Names and order must match exactly.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(VideoModel<F>, Option<OptState<F>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::corrupt("bad checkpoint magic"));
    }
    let ver = read_exact::<1>(&mut r)?[0];
    if ver != VERSION {
        return Err(Error::corrupt(format!("unsupported checkpoint version {ver}")));
    }
    let image_channels = read_u32(&mut r)? as usize;
    let motion_channels = read_u32(&mut r)? as usize;
    let context_channels = read_u32(&mut r)? as usize;
    let res_blocks = read_u32(&mut r)? as usize;
    let flow_levels = read_u32(&mut r)? as usize;
    let flow_hidden = read_u32(&mut r)? as usize;
    let nl = read_u32(&mut r)? as usize;
    if nl == 0 || nl > 16 {
        return Err(Error::corrupt("bad lambda count"));
    }
    let mut lambdas = Vec::with_capacity(nl);
    for _ in 0..nl {
        lambdas.push(read_f64(&mut r)?);
    }
    let cfg = ModelConfig {
        image_channels,
        motion_channels,
        context_channels,
        res_blocks,
        flow_levels,
        flow_hidden,
        lambdas,
    };
    let mut model = VideoModel::<F>::new(cfg, 0)?;

    let count = read_u32(&mut r)? as usize;
    if count != model.ps.len() {
        return Err(Error::corrupt(format!(
            "checkpoint has {count} tensors, model expects {}",
            model.ps.len()
        )));
    }
    for id in 0..count {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::corrupt("checkpoint truncated"))?;
        let name = String::from_utf8(name).map_err(|_| Error::corrupt("bad parameter name"))?;
        if name != model.ps.name(id) {
            return Err(Error::corrupt(format!(
                "parameter {id} is {name}, expected {}",
                model.ps.name(id)
            )));
        }
        let t = read_tensor::<F>(&mut r)?;
        if t.shape() != model.ps.get(id).shape() {
            return Err(Error::corrupt(format!("shape mismatch for {name}")));
        }
        model.ps.set(id, t);
    }

    let flag = read_exact::<1>(&mut r)?[0];
    let opt = match flag {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(count);
            for id in 0..count {
                let t = read_tensor::<F>(&mut r)?;
                if t.shape() != model.ps.get(id).shape() {
                    return Err(Error::corrupt("optimizer moment shape mismatch"));
                }
                m.push(t);
            }
            let mut v = Vec::with_capacity(count);
            for id in 0..count {
                let t = read_tensor::<F>(&mut r)?;
                if t.shape() != model.ps.get(id).shape() {
                    return Err(Error::corrupt("optimizer moment shape mismatch"));
                }
                v.push(t);
            }
            Some(OptState { m, v, step })
        }
        other => return Err(Error::corrupt(format!("bad optimizer flag {other}"))),
    };
    let mut probe = [0u8; 1];
    if r.read(&mut probe).unwrap_or(0) != 0 {
        return Err(Error::corrupt("trailing bytes after checkpoint"));
    }
    Ok((model, opt))
}
