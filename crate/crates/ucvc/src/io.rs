//! Dataset ingestion (PNG image directories and raw YUV420), color
//! conversion, and frame export.
//!
//! Everything is converted to RGB in [0, 1] at ingest time; distortion is
//! always measured in RGB space regardless of the source format.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use image::ImageReader;
use ndarray::{Array2, Array3};

use crate::kernels::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMatrix {
    Bt601,
    Bt709,
}

impl ColorMatrix {
    /// (cr_to_r, cb_to_g, cr_to_g, cb_to_b) coefficients of the full-range
    /// inverse matrix.
    fn coeffs(self) -> (f64, f64, f64, f64) {
        match self {
            ColorMatrix::Bt601 => (1.402, 0.344136, 0.714136, 1.772),
            ColorMatrix::Bt709 => (1.5748, 0.1873, 0.4681, 1.8556),
        }
    }
}

#[derive(Clone, Debug)]
pub enum SequenceSource {
    /// Directory of PNG frames, ordered by file name.
    ImageDir { path: PathBuf },
    /// Planar YUV420 (I420), full range, 8 bit.
    RawYuv420 {
        path: PathBuf,
        width: usize,
        height: usize,
        /// None reads every whole frame in the file.
        frames: Option<usize>,
        matrix: ColorMatrix,
    },
}

/// Read a source into RGB frames in [0, 1], shape (3, H, W).
pub fn ingest<F: Scalar>(source: &SequenceSource) -> Result<Vec<Array3<F>>> {
    match source {
        SequenceSource::ImageDir { path } => read_image_dir(path),
        SequenceSource::RawYuv420 { path, width, height, frames, matrix } => {
            read_raw_yuv420(path, *width, *height, *frames, *matrix)
        }
    }
}

fn io_err(msg: String) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg))
}

// ---------------------------------------------------------------------------
// PNG directories
// ---------------------------------------------------------------------------

/// Digit runs compared by numeric value, everything else byte-wise. Used
/// only to detect orderings that lexicographic sorting would get wrong.
fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    let (mut ai, mut bi) = (a.as_bytes(), b.as_bytes());
    loop {
        match (ai.first(), bi.first()) {
            (None, None) => return std::cmp::Ordering::Equal,
            (None, Some(_)) => return std::cmp::Ordering::Less,
            (Some(_), None) => return std::cmp::Ordering::Greater,
            (Some(&ca), Some(&cb)) => {
                if ca.is_ascii_digit() && cb.is_ascii_digit() {
                    let la = ai.iter().take_while(|c| c.is_ascii_digit()).count();
                    let lb = bi.iter().take_while(|c| c.is_ascii_digit()).count();
                    let na: u128 = std::str::from_utf8(&ai[..la]).unwrap().parse().unwrap_or(0);
                    let nb: u128 = std::str::from_utf8(&bi[..lb]).unwrap().parse().unwrap_or(0);
                    match na.cmp(&nb) {
                        std::cmp::Ordering::Equal => {}
                        o => return o,
                    }
                    ai = &ai[la..];
                    bi = &bi[lb..];
                } else {
                    match ca.cmp(&cb) {
                        std::cmp::Ordering::Equal => {
                            ai = &ai[1..];
                            bi = &bi[1..];
                        }
                        o => return o,
                    }
                }
            }
        }
    }
}

/// Load every .png in the directory, sorted lexicographically by name.
/// Frame numbers must be zero-padded; names whose numeric order disagrees
/// with the lexicographic one are rejected rather than silently reordered.
pub fn read_image_dir<F: Scalar>(dir: &Path) -> Result<Vec<Array3<F>>> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(Error::invalid(format!("no .png frames in {}", dir.display())));
    }
    names.sort();
    for w in names.windows(2) {
        if natural_cmp(&w[0], &w[1]) == std::cmp::Ordering::Greater {
            return Err(Error::invalid(format!(
                "frame names must be zero-padded: {} sorts before {} lexicographically \
                 but after it numerically",
                w[0], w[1]
            )));
        }
    }

    let mut frames = Vec::with_capacity(names.len());
    let mut dims: Option<(usize, usize)> = None;
    for name in &names {
        let path = dir.join(name);
        let img = ImageReader::open(&path)?
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::shape(
                    format!("frame {name}"),
                    format!("{}x{}", d.1, d.0),
                    format!("{w}x{h}"),
                ));
            }
            _ => {}
        }
        let mut f = Array3::<F>::zeros((3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                f[(c, y as usize, x as usize)] = F::from_f64(p.0[c] as f64 / 255.0);
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Write frames as zero-padded PNGs (frame_0000.png, ...) into `dir`,
/// creating it if needed. Values are clamped to [0, 1] and rounded to 8 bit.
pub fn write_image_dir<F: Scalar>(dir: &Path, frames: &[Array3<F>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:04}.png")), f)?;
    }
    Ok(())
}

pub fn write_png<F: Scalar>(path: &Path, frame: &Array3<F>) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::shape("png frame", "(3, H, W)", format!("({c}, {h}, {w})")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = frame[(ch, y, x)].to_f64().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Raw YUV420
// ---------------------------------------------------------------------------

/// Bilinear 2x chroma upsampling. Chroma sample (i, j) sits at luma
/// coordinates (2i + 0.5, 2j + 0.5), the center of its 2x2 block; borders
/// clamp.
fn upsample_chroma(c: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (hc, wc) = c.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let fy = ((y as f64 - 0.5) / 2.0).clamp(0.0, (hc - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(hc - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 - 0.5) / 2.0).clamp(0.0, (wc - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(wc - 1);
            let tx = fx - x0 as f64;
            let top = c[(y0, x0)] * (1.0 - tx) + c[(y0, x1)] * tx;
            let bot = c[(y1, x0)] * (1.0 - tx) + c[(y1, x1)] * tx;
            out[(y, x)] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Read planar 8-bit YUV420 and convert to RGB in [0, 1] using the
/// full-range inverse matrix. Chroma is upsampled bilinearly before the
/// matrix is applied, so distortion downstream is measured on dense RGB.
pub fn read_raw_yuv420<F: Scalar>(
    path: &Path,
    width: usize,
    height: usize,
    frames: Option<usize>,
    matrix: ColorMatrix,
) -> Result<Vec<Array3<F>>> {
    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::invalid(format!(
            "YUV420 needs positive even dimensions, got {width}x{height}"
        )));
    }
    let frame_bytes = width * height * 3 / 2;
    let size = fs::metadata(path)?.len() as usize;
    let count = match frames {
        Some(n) if n == 0 => return Err(Error::invalid("frame count must be at least 1")),
        Some(n) => n,
        None => {
            if size == 0 || size % frame_bytes != 0 {
                return Err(io_err(format!(
                    "{}: size {size} is not a whole number of {width}x{height} frames \
                     ({frame_bytes} bytes each); wrong dimensions?",
                    path.display()
                )));
            }
            size / frame_bytes
        }
    };

    let mut file = fs::File::open(path)?;
    let (c2r, c2g_b, c2g_r, c2b) = matrix.coeffs();
    let (wc, hc) = (width / 2, height / 2);
    let mut buf = vec![0u8; frame_bytes];
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        if let Err(e) = file.read_exact(&mut buf) {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                return Err(io_err(format!(
                    "{}: truncated at frame {k} (have {count} frames' worth of reads, \
                     file holds {size} bytes)",
                    path.display()
                )));
            }
            return Err(e.into());
        }
        let yp = &buf[..width * height];
        let up = &buf[width * height..width * height + wc * hc];
        let vp = &buf[width * height + wc * hc..];

        let u_small = Array2::from_shape_fn((hc, wc), |(i, j)| up[i * wc + j] as f64 - 128.0);
        let v_small = Array2::from_shape_fn((hc, wc), |(i, j)| vp[i * wc + j] as f64 - 128.0);
        let u = upsample_chroma(&u_small, height, width);
        let v = upsample_chroma(&v_small, height, width);

        let mut f = Array3::<F>::zeros((3, height, width));
        for i in 0..height {
            for j in 0..width {
                let y = yp[i * width + j] as f64;
                let (cb, cr) = (u[(i, j)], v[(i, j)]);
                let r = y + c2r * cr;
                let g = y - c2g_b * cb - c2g_r * cr;
                let b = y + c2b * cb;
                f[(0, i, j)] = F::from_f64((r / 255.0).clamp(0.0, 1.0));
                f[(1, i, j)] = F::from_f64((g / 255.0).clamp(0.0, 1.0));
                f[(2, i, j)] = F::from_f64((b / 255.0).clamp(0.0, 1.0));
            }
        }
        out.push(f);
    }
    Ok(out)
}
