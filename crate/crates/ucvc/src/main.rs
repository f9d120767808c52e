//! Command-line front end: encode, decode, train, eval, bdrate, plan, plot.
//!
//! Every command is deterministic given its flags; `--seed` pins model
//! initialization when no checkpoint is supplied, so an encode/decode pair
//! must agree on either the checkpoint or the (model, seed) pair.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use ucvc::codec::{decode_sequence, encode_sequence, CodingMode, EncodedSequence};
use ucvc::evaluation::{bd_rate, RdPoint};
use ucvc::io::{ingest, write_image_dir, ColorMatrix, SequenceSource};
use ucvc::model::{load_checkpoint, ModelConfig, VideoModel};
use ucvc::scheduler::{plan_sequence, GopStructure};
use ucvc::training::{parse_train_config, synthetic_clips, train, TrainConfig};
use ucvc::{Error, Result};

#[derive(Parser)]
#[command(name = "ucvc", version, about = "Unified contextual video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    P,
    B,
    Optimal,
}

impl ModeArg {
    fn coding(self) -> CodingMode {
        match self {
            ModeArg::P => CodingMode::LowDelayP,
            ModeArg::B => CodingMode::HierarchicalB,
            ModeArg::Optimal => CodingMode::Optimal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Tiny,
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatrixArg {
    Bt601,
    Bt709,
}

#[derive(Args)]
struct ModelOpts {
    /// Checkpoint to load; overrides --model/--seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model scale for a freshly initialized network.
    #[arg(long, value_enum, default_value = "desk")]
    model: ModelArg,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl ModelOpts {
    fn load(&self) -> Result<VideoModel<f32>> {
        match &self.checkpoint {
            Some(p) => Ok(load_checkpoint::<f32>(p)?.0),
            None => {
                let cfg = match self.model {
                    ModelArg::Tiny => ModelConfig::tiny(),
                    ModelArg::Desk => ModelConfig::desk(),
                    ModelArg::Full => ModelConfig::full(),
                };
                VideoModel::new(cfg, self.seed)
            }
        }
    }
}

#[derive(Args)]
struct SourceOpts {
    /// PNG directory or raw .yuv file.
    input: PathBuf,
    /// Raw YUV420 dimensions as WxH (required for .yuv inputs).
    #[arg(long)]
    raw_size: Option<String>,
    /// Frame count for raw input (default: whole file).
    #[arg(long)]
    raw_frames: Option<usize>,
    /// YUV to RGB conversion matrix.
    #[arg(long, value_enum, default_value = "bt601")]
    color_matrix: MatrixArg,
}

impl SourceOpts {
    fn source(&self) -> Result<SequenceSource> {
        source_for(
            &self.input,
            self.raw_size.as_deref(),
            self.raw_frames,
            self.color_matrix,
        )
    }
}

fn source_for(
    input: &Path,
    raw_size: Option<&str>,
    raw_frames: Option<usize>,
    matrix: MatrixArg,
) -> Result<SequenceSource> {
    if input.is_dir() {
        return Ok(SequenceSource::ImageDir { path: input.to_path_buf() });
    }
    let size = raw_size.ok_or_else(|| {
        Error::invalid(format!(
            "{} is not a directory; raw YUV input needs --raw-size WxH",
            input.display()
        ))
    })?;
    let (w, h) = size
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::invalid(format!("bad --raw-size {size}, expected WxH")))?;
    Ok(SequenceSource::RawYuv420 {
        path: input.to_path_buf(),
        width: w,
        height: h,
        frames: raw_frames,
        matrix: match matrix {
            MatrixArg::Bt601 => ColorMatrix::Bt601,
            MatrixArg::Bt709 => ColorMatrix::Bt709,
        },
    })
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a sequence to a .ucvc bitstream.
    Encode {
        #[command(flatten)]
        src: SourceOpts,
        /// Output bitstream path.
        #[arg(long, short)]
        output: PathBuf,
        /// Per-frame stats CSV path.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        #[arg(long, value_enum, default_value = "p")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        lambda_index: usize,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Decompress a .ucvc bitstream to PNG frames.
    Decode {
        input: PathBuf,
        /// Directory for decoded frames.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Train a model; writes checkpoints and a metrics CSV.
    Train {
        /// key = value configuration file (see docs for keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out_dir: PathBuf,
        /// Clip source: "synthetic" or a directory whose subdirectories
        /// are PNG sequences. Overrides the config file.
        #[arg(long)]
        data: Option<String>,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Encode sources at several lambda indices and emit an RD CSV.
    Eval {
        /// PNG frame directories, one per sequence.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        #[arg(long, value_enum, default_value = "optimal")]
        mode: ModeArg,
        /// Comma-separated lambda indices (default: all).
        #[arg(long)]
        lambdas: Option<String>,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// BD-rate report comparing two RD CSVs produced by eval.
    Bdrate {
        /// Anchor RD CSV.
        anchor: PathBuf,
        /// Test RD CSV.
        test: PathBuf,
        /// Optional CSV report path (default: print only).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the GoP coding plan for a sequence length.
    Plan {
        #[arg(long, default_value_t = 8)]
        gop: usize,
        /// p or b (optimal has no fixed plan).
        #[arg(long, value_enum, default_value = "b")]
        mode: ModeArg,
        #[arg(long, default_value_t = 9)]
        frames: usize,
    },
    /// Render an RD CSV as a self-contained SVG plot.
    Plot {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn main() {
    if let Ok(n) = std::env::var("UCVC_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Encode { src, output, stats, gop, mode, lambda_index, model } => {
            cmd_encode(&src, &output, stats.as_deref(), gop, mode, lambda_index, &model)
        }
        Cmd::Decode { input, out_dir, model } => cmd_decode(&input, &out_dir, &model),
        Cmd::Train { config, out_dir, data, model } => {
            cmd_train(config.as_deref(), &out_dir, data.as_deref(), &model)
        }
        Cmd::Eval { inputs, output, gop, mode, lambdas, model } => {
            cmd_eval(&inputs, &output, gop, mode, lambdas.as_deref(), &model)
        }
        Cmd::Bdrate { anchor, test, output } => cmd_bdrate(&anchor, &test, output.as_deref()),
        Cmd::Plan { gop, mode, frames } => cmd_plan(gop, mode, frames),
        Cmd::Plot { input, output } => cmd_plot(&input, &output),
    }
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

fn stats_csv(enc: &EncodedSequence<f32>, w: usize, h: usize) -> String {
    let mut out = String::from("# ucvc-stats-v1\n");
    out.push_str("display_index,type,bits,bpp,mse,psnr_db,msssim\n");
    let pixels = (w * h) as f64;
    for s in &enc.stats {
        let db = s.psnr.db();
        let psnr = if db.is_finite() { format!("{db:.4}") } else { "inf".to_string() };
        let ms = s.ms_ssim.map_or("-".to_string(), |m| format!("{m:.6}"));
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.8e},{psnr},{ms}",
            s.display_index,
            s.ftype,
            s.bits,
            s.bits as f64 / pixels,
            s.mse
        );
    }
    out
}

fn cmd_encode(
    src: &SourceOpts,
    output: &Path,
    stats: Option<&Path>,
    gop: usize,
    mode: ModeArg,
    lambda_index: usize,
    model_opts: &ModelOpts,
) -> Result<()> {
    let model = model_opts.load()?;
    let frames = ingest::<f32>(&src.source()?)?;
    let (_, h, w) = frames[0].dim();
    let enc = encode_sequence(&model, &frames, gop, mode.coding(), lambda_index)?;
    fs::write(output, &enc.container)?;
    if let Some(p) = stats {
        fs::write(p, stats_csv(&enc, w, h))?;
    }
    let structure = match enc.structure {
        GopStructure::LowDelayP => "P",
        GopStructure::HierarchicalB => "B",
    };
    println!(
        "{} frames, structure {structure}, lambda {}, {:.4} bpp, mean MSE {:.6e}, {} bytes",
        frames.len(),
        enc.lambda_index,
        enc.mean_bpp(w, h),
        enc.mean_mse(),
        enc.container.len()
    );
    Ok(())
}

fn cmd_decode(input: &Path, out_dir: &Path, model_opts: &ModelOpts) -> Result<()> {
    let model = model_opts.load()?;
    let container = fs::read(input)?;
    let dec = decode_sequence(&model, &container)?;
    write_image_dir(out_dir, &dec.frames)?;
    println!("{} frames -> {}", dec.frames.len(), out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(
    config: Option<&Path>,
    out_dir: &Path,
    data: Option<&str>,
    model_opts: &ModelOpts,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => parse_train_config(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = data {
        cfg.dataset = d.to_string();
    }
    let clips = if cfg.dataset == "synthetic" {
        synthetic_clips::<f32>(16, 7, cfg.crop, cfg.crop, cfg.seed)
    } else {
        let mut clips = Vec::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&cfg.dataset)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::invalid(format!("no clip directories in {}", cfg.dataset)));
        }
        for d in dirs {
            clips.push(ingest::<f32>(&SequenceSource::ImageDir { path: d })?);
        }
        clips
    };
    for (i, c) in clips.iter().enumerate() {
        if c.len() < 7 {
            return Err(Error::invalid(format!(
                "clip {i} has {} frames; training needs at least 7",
                c.len()
            )));
        }
    }

    let mut model = model_opts.load()?;
    fs::create_dir_all(out_dir)?;
    let mut metrics = fs::File::create(out_dir.join("metrics.csv"))?;
    let report = train(&mut model, &clips, &cfg, &mut metrics, Some(out_dir))?;
    println!(
        "{} steps, smoothed loss {:.4} -> {:.4} (final EMA {:.4})",
        report.steps, report.first_window_mean, report.last_window_mean, report.final_ema
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / bdrate / plot
// ---------------------------------------------------------------------------

struct RdRow {
    sequence: String,
    mode: String,
    lambda_index: usize,
    frames: usize,
    bpp: f64,
    mse: f64,
    psnr_db: f64,
    msssim: Option<f64>,
}

impl RdRow {
    fn from_encoded(seq: &str, enc: &EncodedSequence<f32>, w: usize, h: usize) -> RdRow {
        let n = enc.stats.len();
        let mean_psnr = enc.stats.iter().map(|s| s.psnr.db()).sum::<f64>() / n as f64;
        let ms: Vec<f64> = enc.stats.iter().filter_map(|s| s.ms_ssim).collect();
        RdRow {
            sequence: seq.to_string(),
            mode: match enc.structure {
                GopStructure::LowDelayP => "p".into(),
                GopStructure::HierarchicalB => "b".into(),
            },
            lambda_index: enc.lambda_index,
            frames: n,
            bpp: enc.mean_bpp(w, h),
            mse: enc.mean_mse(),
            psnr_db: mean_psnr,
            msssim: if ms.len() == n {
                Some(ms.iter().sum::<f64>() / n as f64)
            } else {
                None
            },
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.8e},{:.4},{}\n",
            self.sequence,
            self.mode,
            self.lambda_index,
            self.frames,
            self.bpp,
            self.mse,
            self.psnr_db,
            self.msssim.map_or("-".to_string(), |m| format!("{m:.6}"))
        )
    }
}

fn cmd_eval(
    inputs: &[PathBuf],
    output: &Path,
    gop: usize,
    mode: ModeArg,
    lambdas: Option<&str>,
    model_opts: &ModelOpts,
) -> Result<()> {
    let model = model_opts.load()?;
    let levels: Vec<usize> = match lambdas {
        None => (0..model.cfg.lambdas.len()).collect(),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad lambda index {t}")))
            })
            .collect::<Result<_>>()?,
    };

    // one result vector per input, in input order; sequences run in
    // parallel, the lambda sweep inside each stays sequential
    let rows: Result<Vec<Vec<RdRow>>> = inputs
        .par_iter()
        .map(|input| {
            let name = input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| input.display().to_string());
            let frames = ingest::<f32>(&SequenceSource::ImageDir { path: input.clone() })?;
            let (_, h, w) = frames[0].dim();
            let mut rows = Vec::new();
            for &l in &levels {
                let enc = encode_sequence(&model, &frames, gop, mode.coding(), l)?;
                rows.push(RdRow::from_encoded(&name, &enc, w, h));
            }
            Ok(rows)
        })
        .collect();

    let mut csv = String::from("# ucvc-rd-v1\n");
    csv.push_str("sequence,mode,lambda_index,frames,bpp,mse,psnr_db,msssim\n");
    for seq_rows in rows? {
        for r in seq_rows {
            csv.push_str(&r.csv_line());
        }
    }
    fs::write(output, csv)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn parse_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("sequence,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::invalid(format!(
                "{}:{}: expected 8 fields, got {}",
                path.display(),
                i + 1,
                f.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::invalid(format!("{}:{}: bad {what}: {s}", path.display(), i + 1)))
        };
        rows.push(RdRow {
            sequence: f[0].to_string(),
            mode: f[1].to_string(),
            lambda_index: parse(f[2], "lambda index")? as usize,
            frames: parse(f[3], "frame count")? as usize,
            bpp: parse(f[4], "bpp")?,
            mse: parse(f[5], "mse")?,
            psnr_db: parse(f[6], "psnr")?,
            msssim: if f[7] == "-" { None } else { Some(parse(f[7], "msssim")?) },
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn curves_by_sequence(rows: &[RdRow]) -> BTreeMap<String, Vec<RdPoint>> {
    let mut map: BTreeMap<String, Vec<RdPoint>> = BTreeMap::new();
    for r in rows {
        map.entry(r.sequence.clone())
            .or_default()
            .push(RdPoint { rate: r.bpp, quality: r.psnr_db });
    }
    for pts in map.values_mut() {
        pts.sort_by(|a, b| a.quality.total_cmp(&b.quality));
    }
    map
}

fn cmd_bdrate(anchor: &Path, test: &Path, output: Option<&Path>) -> Result<()> {
    let a = curves_by_sequence(&parse_rd_csv(anchor)?);
    let t = curves_by_sequence(&parse_rd_csv(test)?);
    let mut report = String::from("# ucvc-bdrate-v1\nsequence,bd_rate_percent\n");
    let mut values = Vec::new();
    println!("{:<24} BD-rate vs anchor", "sequence");
    for (seq, apts) in &a {
        let Some(tpts) = t.get(seq) else {
            return Err(Error::invalid(format!("sequence {seq} missing from test CSV")));
        };
        let bd = bd_rate(apts, tpts)?;
        for wmsg in &bd.warnings {
            eprintln!("warning: {seq}: {wmsg}");
        }
        println!("{seq:<24} {:+.4}%", bd.percent);
        let _ = writeln!(report, "{seq},{:.6}", bd.percent);
        values.push(bd.percent);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    println!("{:<24} {mean:+.4}%", "aggregate(mean)");
    let _ = writeln!(report, "aggregate_mean,{mean:.6}");
    if let Some(p) = output {
        fs::write(p, report)?;
    }
    Ok(())
}

fn cmd_plan(gop: usize, mode: ModeArg, frames: usize) -> Result<()> {
    let structure = match mode {
        ModeArg::P => GopStructure::LowDelayP,
        ModeArg::B => GopStructure::HierarchicalB,
        ModeArg::Optimal => {
            return Err(Error::invalid(
                "optimal mode picks a structure per sequence; plan needs p or b",
            ))
        }
    };
    let plan = plan_sequence(frames, gop, structure)?;
    println!("index,type,ref1,ref2,encode_order");
    for p in &plan {
        let r = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
        println!("{},{},{},{},{}", p.index, p.ftype, r(p.ref1), r(p.ref2), p.encode_order);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-9);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(mag * 10.0);
    let first = (lo / step).ceil() * step;
    let mut t = Vec::new();
    let mut v = first;
    while v <= hi + step * 1e-9 {
        t.push(v);
        v += step;
    }
    t
}

/// RD curves as a standalone SVG: one polyline per (sequence, mode), bpp
/// on x, PSNR on y.
fn cmd_plot(input: &Path, output: &Path) -> Result<()> {
    let rows = parse_rd_csv(input)?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry(format!("{}/{}", r.sequence, r.mode))
            .or_default()
            .push((r.bpp, r.psnr_db));
    }
    for pts in groups.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.bpp).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
    let (x0, x1) = if x1 - x0 < 1e-9 { (x0 - 0.5, x1 + 0.5) } else { (x0, x1) };
    let (y0, y1) = if y1 - y0 < 1e-9 { (y0 - 0.5, y1 + 0.5) } else { (y0, y1) };

    let (width, height, ml, mr, mt, mb) = (640.0, 420.0, 60.0, 160.0, 20.0, 45.0);
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (width - ml - mr);
    let py = |y: f64| height - mb - (y - y0) / (y1 - y0) * (height - mt - mb);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = px(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t:.3}</text>\n",
            py(y1), py(y0), height - mb + 16.0
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = py(t);
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.1}</text>\n",
            ml, width - mr, ml - 6.0, y + 4.0
        );
    }
    let _ = write!(
        svg,
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">bpp</text>\n\
         <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">PSNR (dB)</text>\n",
        width - ml - mr,
        height - mt - mb,
        ml + (width - ml - mr) / 2.0,
        height - 8.0,
        (height - mb + mt) / 2.0,
        (height - mb + mt) / 2.0
    );
    for (gi, (name, pts)) in groups.iter().enumerate() {
        let color = palette[gi % palette.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        );
        for (x, y) in pts {
            let _ = write!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                px(*x), py(*y)
            );
        }
        let ly = mt + 14.0 + gi as f64 * 16.0;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{name}</text>\n",
            width - mr + 8.0, width - mr + 28.0, width - mr + 34.0, ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    fs::write(output, svg)?;
    println!("wrote {}", output.display());
    Ok(())
}
