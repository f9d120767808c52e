//! Quality metrics (PSNR, MS-SSIM), a differentiable MS-SSIM for training,
//! Bjontegaard BD-rate over fitted RD curves, and frame-type selection.

use ndarray::Array3;

use crate::autodiff::{Graph, NodeId};
use crate::kernels::{gauss11, Scalar};
use crate::scheduler::GopStructure;
use crate::{Error, Result};

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = 1e-4; // (0.01)^2 on unit range
const C2: f64 = 9e-4; // (0.03)^2
/// 5 dyadic scales with an 11-tap window require at least this many pixels.
pub const MSSSIM_MIN_DIM: usize = 176;

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    /// Identical inputs; infinite PSNR is reported out-of-band.
    Lossless,
    Db(f64),
}

impl Psnr {
    /// Finite dB value, mapping Lossless to +inf for comparisons.
    pub fn db(&self) -> f64 {
        match self {
            Psnr::Lossless => f64::INFINITY,
            Psnr::Db(v) => *v,
        }
    }
}

pub fn mse<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "psnr inputs",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let n = a.len() as f64;
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x).to_f64() - (*y).to_f64();
        acc += d * d;
    }
    Ok(acc / n)
}

/// -10 log10(MSE) over all channels, inputs in [0, 1].
pub fn psnr<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Result<Psnr> {
    let m = mse(a, b)?;
    if m == 0.0 {
        Ok(Psnr::Lossless)
    } else {
        Ok(Psnr::Db(-10.0 * m.log10()))
    }
}

// ---------------------------------------------------------------------------
// MS-SSIM (metric, valid-window, f64)
// ---------------------------------------------------------------------------

fn to64<F: Scalar>(a: &Array3<F>) -> Array3<f64> {
    a.mapv(|v| v.to_f64())
}

/// Separable valid-region Gaussian filtering: (C, H, W) -> (C, H-10, W-10).
fn blur_valid(x: &Array3<f64>) -> Array3<f64> {
    let w = gauss11();
    let (c, h, ww) = x.dim();
    assert!(h >= 11 && ww >= 11);
    let mut tmp = Array3::<f64>::zeros((c, h, ww - 10));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..ww - 10 {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    acc += wk * x[(ci, i, j + k)];
                }
                tmp[(ci, i, j)] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h - 10, ww - 10));
    for ci in 0..c {
        for i in 0..h - 10 {
            for j in 0..ww - 10 {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    acc += wk * tmp[(ci, i + k, j)];
                }
                out[(ci, i, j)] = acc;
            }
        }
    }
    out
}

/// Mean luminance-contrast product and mean contrast term at one scale.
fn ssim_scale(a: &Array3<f64>, b: &Array3<f64>) -> (f64, f64) {
    let mu_a = blur_valid(a);
    let mu_b = blur_valid(b);
    let a2 = a.mapv(|v| v * v);
    let b2 = b.mapv(|v| v * v);
    let ab = a * b;
    let mu_a2 = blur_valid(&a2);
    let mu_b2 = blur_valid(&b2);
    let mu_ab = blur_valid(&ab);

    let mut sum_lcs = 0.0;
    let mut sum_cs = 0.0;
    let n = mu_a.len() as f64;
    for i in 0..mu_a.len() {
        let ma = mu_a.as_slice().unwrap()[i];
        let mb = mu_b.as_slice().unwrap()[i];
        let va = mu_a2.as_slice().unwrap()[i] - ma * ma;
        let vb = mu_b2.as_slice().unwrap()[i] - mb * mb;
        let cab = mu_ab.as_slice().unwrap()[i] - ma * mb;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let cs = (2.0 * cab + C2) / (va + vb + C2);
        sum_lcs += l * cs;
        sum_cs += cs;
    }
    (sum_lcs / n, sum_cs / n)
}

fn halve(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                out[(ci, i, j)] = 0.25
                    * (x[(ci, 2 * i, 2 * j)]
                        + x[(ci, 2 * i, 2 * j + 1)]
                        + x[(ci, 2 * i + 1, 2 * j)]
                        + x[(ci, 2 * i + 1, 2 * j + 1)]);
            }
        }
    }
    out
}

/// Five-scale MS-SSIM in [0, 1]; symmetric in its arguments.
pub fn ms_ssim<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "ms_ssim inputs",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let (_, h, w) = a.dim();
    if h < MSSSIM_MIN_DIM || w < MSSSIM_MIN_DIM {
        return Err(Error::invalid(format!(
            "ms_ssim needs at least {MSSSIM_MIN_DIM}px per side, got {h}x{w}"
        )));
    }
    let mut ca = to64(a);
    let mut cb = to64(b);
    let mut score = 1.0f64;
    for (s, &wgt) in MSSSIM_WEIGHTS.iter().enumerate() {
        let (lcs, cs) = ssim_scale(&ca, &cb);
        let term = if s == MSSSIM_WEIGHTS.len() - 1 { lcs } else { cs };
        score *= term.max(1e-12).powf(wgt);
        if s + 1 < MSSSIM_WEIGHTS.len() {
            ca = halve(&ca);
            cb = halve(&cb);
        }
    }
    Ok(score)
}

/// Lenient wrapper for per-frame stats on frames below the size floor.
pub fn ms_ssim_or_none<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Option<f64> {
    ms_ssim(a, b).ok()
}

// ---------------------------------------------------------------------------
// Differentiable MS-SSIM (training loss)
// ---------------------------------------------------------------------------

/// Graph MS-SSIM with a configurable scale count (weights renormalized).
/// Uses zero-padded blurring, so border handling differs slightly from the
/// valid-window metric; identical inputs still score exactly 1.
pub fn ms_ssim_graph<F: Scalar>(
    g: &mut Graph<F>,
    a: NodeId,
    b: NodeId,
    scales: usize,
) -> Result<NodeId> {
    if scales == 0 || scales > 5 {
        return Err(Error::invalid("ms_ssim_graph scales must be 1..=5"));
    }
    let dims = g.value(a).shape().to_vec();
    if dims != g.value(b).shape() {
        return Err(Error::shape(
            "ms_ssim_graph inputs",
            format!("{dims:?}"),
            format!("{:?}", g.value(b).shape()),
        ));
    }
    let div = 1usize << (scales - 1);
    if dims[1] % div != 0 || dims[2] % div != 0 || dims[1] / div < 11 || dims[2] / div < 11 {
        return Err(Error::invalid(format!(
            "dims {}x{} unsuitable for {scales} dyadic scales",
            dims[1], dims[2]
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let mut xa = a;
    let mut xb = b;
    let mut acc: Option<NodeId> = None;
    for s in 0..scales {
        let mu_a = g.blur11(xa);
        let mu_b = g.blur11(xb);
        let a2 = g.mul(xa, xa);
        let b2 = g.mul(xb, xb);
        let ab = g.mul(xa, xb);
        let mu_a2 = g.blur11(a2);
        let mu_b2 = g.blur11(b2);
        let mu_ab = g.blur11(ab);
        let ma2 = g.mul(mu_a, mu_a);
        let mb2 = g.mul(mu_b, mu_b);
        let mab = g.mul(mu_a, mu_b);
        let va = g.sub(mu_a2, ma2);
        let vb = g.sub(mu_b2, mb2);
        let cab = g.sub(mu_ab, mab);

        let cs_num = g.scale_const(cab, 2.0);
        let cs_num = g.add_const(cs_num, C2);
        let vsum = g.add(va, vb);
        let cs_den = g.add_const(vsum, C2);
        let cs = g.div(cs_num, cs_den);

        let term = if s == scales - 1 {
            let l_num = g.scale_const(mab, 2.0);
            let l_num = g.add_const(l_num, C1);
            let msum = g.add(ma2, mb2);
            let l_den = g.add_const(msum, C1);
            let l = g.div(l_num, l_den);
            g.mul(l, cs)
        } else {
            cs
        };
        let m = g.mean_all(term);
        let m = g.clamp_min(m, 1e-4);
        let p = g.pow_const(m, MSSSIM_WEIGHTS[s] / wsum);
        acc = Some(match acc {
            None => p,
            Some(prev) => g.mul(prev, p),
        });
        if s + 1 < scales {
            xa = g.avgpool2(xa);
            xb = g.avgpool2(xb);
        }
    }
    Ok(acc.unwrap())
}

// ---------------------------------------------------------------------------
// RD curves and BD-rate
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    /// Bits per pixel (or any positive rate unit; BD-rate is scale-free).
    pub rate: f64,
    /// PSNR dB or MS-SSIM.
    pub quality: f64,
}

#[derive(Clone, Debug)]
pub struct BdRate {
    /// Percent rate difference of `test` vs `anchor`; negative = savings.
    pub percent: f64,
    /// Quality interval the curves were integrated over.
    pub overlap: (f64, f64),
    pub warnings: Vec<String>,
}

/// Fitted log10(rate) as a function of quality.
pub enum RdFit {
    /// Coefficients in centered coordinates: y = c0 + c1 t + c2 t^2 + c3 t^3,
    /// t = q - center.
    Cubic { c: [f64; 4], center: f64 },
    /// Monotone piecewise cubic Hermite through the points.
    Pchip {
        q: Vec<f64>,
        y: Vec<f64>,
        m: Vec<f64>,
    },
}

impl RdFit {
    pub fn eval(&self, quality: f64) -> f64 {
        match self {
            RdFit::Cubic { c, center } => {
                let t = quality - center;
                ((c[3] * t + c[2]) * t + c[1]) * t + c[0]
            }
            RdFit::Pchip { q, y, m } => {
                let n = q.len();
                let i = match q.iter().position(|&v| v >= quality) {
                    Some(0) => 0,
                    Some(k) => k - 1,
                    None => n - 2,
                };
                let h = q[i + 1] - q[i];
                let s = ((quality - q[i]) / h).clamp(0.0, 1.0);
                let (a3, a2, a1, a0) = hermite_coeffs(y[i], y[i + 1], m[i] * h, m[i + 1] * h);
                ((a3 * s + a2) * s + a1) * s + a0
            }
        }
    }

    /// Exact integral of the fitted curve over [lo, hi].
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        match self {
            RdFit::Cubic { c, center } => {
                let anti = |t: f64| {
                    (((c[3] / 4.0 * t + c[2] / 3.0) * t + c[1] / 2.0) * t + c[0]) * t
                };
                anti(hi - center) - anti(lo - center)
            }
            RdFit::Pchip { q, y, m } => {
                let n = q.len();
                let mut acc = 0.0;
                for i in 0..n - 1 {
                    let (a, b) = (q[i], q[i + 1]);
                    let (sa, sb) = (lo.max(a), hi.min(b));
                    if sb <= sa {
                        continue;
                    }
                    let h = b - a;
                    let (a3, a2, a1, a0) = hermite_coeffs(y[i], y[i + 1], m[i] * h, m[i + 1] * h);
                    let anti = |s: f64| (((a3 / 4.0 * s + a2 / 3.0) * s + a1 / 2.0) * s + a0) * s;
                    let s0 = (sa - a) / h;
                    let s1 = (sb - a) / h;
                    acc += h * (anti(s1) - anti(s0));
                }
                acc
            }
        }
    }
}

fn hermite_coeffs(y0: f64, y1: f64, hm0: f64, hm1: f64) -> (f64, f64, f64, f64) {
    (
        2.0 * y0 + hm0 - 2.0 * y1 + hm1,
        -3.0 * y0 - 2.0 * hm0 + 3.0 * y1 - hm1,
        hm0,
        y0,
    )
}

/// Solve the 4x4 normal equations for a least-squares cubic.
fn solve4(mut a: [[f64; 5]; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        let d = a[col][col];
        for k in col..5 {
            a[col][k] /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col];
                for k in col..5 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    Some([a[0][4], a[1][4], a[2][4], a[3][4]])
}

fn pchip_slopes(q: &[f64], y: &[f64]) -> Vec<f64> {
    let n = q.len();
    let h: Vec<f64> = (0..n - 1).map(|i| q[i + 1] - q[i]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    // one-sided endpoint slopes, clamped per Fritsch-Carlson
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| -> f64 {
        let t = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if t.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && t.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            t
        }
    };
    m[0] = end(h[0], h[1], d[0], d[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    for i in 1..n - 1 {
        if d[i - 1] * d[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    m
}

/// Fit log10(rate) over quality; falls back to monotone PCHIP when the
/// least-squares cubic is non-monotone inside the data range.
pub fn fit_log_rate(points: &[RdPoint]) -> Result<RdFit> {
    if points.len() < 4 {
        return Err(Error::invalid("need at least 4 RD points"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.quality.total_cmp(&b.quality));
    for w in pts.windows(2) {
        if w[1].quality - w[0].quality < 1e-12 {
            return Err(Error::invalid("duplicate quality values"));
        }
    }
    for p in &pts {
        if !(p.rate > 0.0) || !p.rate.is_finite() || !p.quality.is_finite() {
            return Err(Error::invalid("rates must be positive and finite"));
        }
    }
    let q: Vec<f64> = pts.iter().map(|p| p.quality).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.rate.log10()).collect();
    let center = q.iter().sum::<f64>() / q.len() as f64;

    let mut normal = [[0.0f64; 5]; 4];
    for (qi, yi) in q.iter().zip(y.iter()) {
        let t = qi - center;
        let basis = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            for c in 0..4 {
                normal[r][c] += basis[r] * basis[c];
            }
            normal[r][4] += basis[r] * yi;
        }
    }
    if let Some(c) = solve4(normal) {
        // derivative sign-sampled over the data range
        let lo = q[0];
        let hi = q[q.len() - 1];
        let mut monotone = true;
        for k in 0..=64 {
            let t = lo + (hi - lo) * k as f64 / 64.0 - center;
            let d = (3.0 * c[3] * t + 2.0 * c[2]) * t + c[1];
            if d < 0.0 {
                monotone = false;
                break;
            }
        }
        if monotone {
            return Ok(RdFit::Cubic { c, center });
        }
    }
    let m = pchip_slopes(&q, &y);
    Ok(RdFit::Pchip { q, y, m })
}

/// Bjontegaard rate difference of `test` against `anchor` in percent.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<BdRate> {
    let mut warnings = Vec::new();
    for (name, pts) in [("anchor", anchor), ("test", test)] {
        let mut sorted = pts.to_vec();
        sorted.sort_by(|a, b| a.quality.total_cmp(&b.quality));
        if sorted.windows(2).any(|w| w[1].rate <= w[0].rate) {
            warnings.push(format!("{name} curve is not rate-monotone; sorted and fitted as-is"));
        }
    }
    let fa = fit_log_rate(anchor)?;
    let ft = fit_log_rate(test)?;
    let (a_lo, a_hi) = quality_range(anchor);
    let (t_lo, t_hi) = quality_range(test);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if hi <= lo {
        return Err(Error::UndefinedResult(format!(
            "quality ranges do not overlap: [{a_lo:.4}, {a_hi:.4}] vs [{t_lo:.4}, {t_hi:.4}]"
        )));
    }
    let mean_diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(BdRate {
        percent: (10f64.powf(mean_diff) - 1.0) * 100.0,
        overlap: (lo, hi),
        warnings,
    })
}

fn quality_range(pts: &[RdPoint]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        lo = lo.min(p.quality);
        hi = hi.max(p.quality);
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Frame-type selection
// ---------------------------------------------------------------------------

/// Curve-level arbiter: B wins only on a clear (>= 0.01%) BD-rate saving
/// against the P anchor. Falls back to interpolated quality at a matched
/// rate when BD-rate is undefined, and to P if that fails too.
pub fn select_frame_type(
    p_points: &[RdPoint],
    b_points: &[RdPoint],
) -> (GopStructure, Option<BdRate>) {
    match bd_rate(p_points, b_points) {
        Ok(bd) => {
            let flag = if bd.percent <= -0.01 {
                GopStructure::HierarchicalB
            } else {
                GopStructure::LowDelayP
            };
            (flag, Some(bd))
        }
        Err(_) => {
            // matched-rate quality comparison on the overlapping rate range
            let (pl, ph) = rate_range(p_points);
            let (bl, bh) = rate_range(b_points);
            let lo = pl.max(bl);
            let hi = ph.min(bh);
            if hi > lo && p_points.len() >= 2 && b_points.len() >= 2 {
                let mid = (lo.log10() + hi.log10()) / 2.0;
                let qp = interp_quality(p_points, mid);
                let qb = interp_quality(b_points, mid);
                if qb > qp + 1e-9 {
                    return (GopStructure::HierarchicalB, None);
                }
            }
            (GopStructure::LowDelayP, None)
        }
    }
}

fn rate_range(pts: &[RdPoint]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        lo = lo.min(p.rate);
        hi = hi.max(p.rate);
    }
    (lo, hi)
}

/// Piecewise-linear quality at a given log10 rate.
fn interp_quality(pts: &[RdPoint], log_rate: f64) -> f64 {
    let mut s = pts.to_vec();
    s.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    let xs: Vec<f64> = s.iter().map(|p| p.rate.log10()).collect();
    if log_rate <= xs[0] {
        return s[0].quality;
    }
    if log_rate >= xs[xs.len() - 1] {
        return s[s.len() - 1].quality;
    }
    for i in 0..xs.len() - 1 {
        if log_rate <= xs[i + 1] {
            let t = (log_rate - xs[i]) / (xs[i + 1] - xs[i]);
            return s[i].quality + t * (s[i + 1].quality - s[i].quality);
        }
    }
    s[s.len() - 1].quality
}

/// Single-rate-point arbiter used inside the encoder's OPTIMAL mode: pick
/// the structure with the lower RD cost bpp + lambda * mse; ties go to P.
pub fn select_by_rd_cost(
    p_cost: (f64, f64),
    b_cost: (f64, f64),
    lambda: f64,
) -> GopStructure {
    let jp = p_cost.0 + lambda * p_cost.1;
    let jb = b_cost.0 + lambda * b_cost.1;
    if jb < jp {
        GopStructure::HierarchicalB
    } else {
        GopStructure::LowDelayP
    }
}
