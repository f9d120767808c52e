//! Dense compute kernels for the autodiff graph.
//!
//! Everything is written against contiguous (C, H, W) buffers with plain
//! slice arithmetic so the inner loops autovectorize on a single core.
//! Convolutions are specialized to 3x3 kernels with zero padding 1 and
//! stride 1 or 2, which is the only shape the transform stacks use; a
//! naive reference implementation lives in the test module as the oracle.
//!
//! Backward kernels are exact adjoints of the forward linear maps, which
//! the tests verify through inner-product identities rather than finite
//! differences: for linear f, <f(x), y> must equal <x, f_adj(y)> to float
//! precision.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};

/// Scalar element for all tensor math. f32 runs the codec; f64 exists so
/// finite-difference gradient verification has headroom below the 1e-3
/// tolerance.
pub trait Scalar: ndarray::NdFloat + ndarray::LinalgScalar {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn conv3_out_dim(h: usize, stride: usize) -> usize {
    debug_assert!(stride == 1 || stride == 2);
    (h - 1) / stride + 1
}

/// Fused 3-tap row accumulation for stride 1: acc[j] += w0*x[j-1] +
/// w1*x[j] + w2*x[j+1] with zero padding at both ends. Single pass per
/// row keeps the output line in registers/L1 instead of one read-write
/// sweep per kernel column.
#[inline(always)]
fn row_tap3<F: Scalar>(acc: &mut [F], xr: &[F], w0: F, w1: F, w2: F) {
    let n = acc.len();
    debug_assert_eq!(n, xr.len());
    if n == 1 {
        acc[0] = acc[0] + w1 * xr[0];
        return;
    }
    acc[0] = acc[0] + w1 * xr[0] + w2 * xr[1];
    for (((a, &xm), &xc), &xp) in acc[1..n - 1]
        .iter_mut()
        .zip(&xr[..n - 2])
        .zip(&xr[1..n - 1])
        .zip(&xr[2..])
    {
        *a = *a + w0 * xm + w1 * xc + w2 * xp;
    }
    acc[n - 1] = acc[n - 1] + w0 * xr[n - 2] + w1 * xr[n - 1];
}

/// Stride-2 variant on a deinterleaved row: even[j] = x[2j], odd[j] =
/// x[2j+1]. Output column ox reads x[2ox-1], x[2ox], x[2ox+1], i.e.
/// odd[ox-1], even[ox], odd[ox], which are contiguous again.
#[inline(always)]
fn row_tap3_s2<F: Scalar>(acc: &mut [F], even: &[F], odd: &[F], w0: F, w1: F, w2: F) {
    let wo = acc.len();
    let olen = odd.len();
    debug_assert_eq!(wo, even.len());
    let mut v = w1 * even[0];
    if olen > 0 {
        v = v + w2 * odd[0];
    }
    acc[0] = acc[0] + v;
    let hi = wo.min(olen);
    if hi > 1 {
        for (((a, &om), &ec), &oc) in acc[1..hi]
            .iter_mut()
            .zip(&odd[..hi - 1])
            .zip(&even[1..hi])
            .zip(&odd[1..hi])
        {
            *a = *a + w0 * om + w1 * ec + w2 * oc;
        }
    }
    if wo > olen && olen > 0 {
        acc[olen] = acc[olen] + w0 * odd[olen - 1] + w1 * even[olen];
    }
}

/// Split every row of (C, H, W) into even and odd columns, stored as two
/// dense planes (C, H, ceil(W/2)) and (C, H, floor(W/2)).
fn deinterleave_cols<F: Scalar>(xs: &[F], c: usize, h: usize, wid: usize) -> (Vec<F>, Vec<F>) {
    let elen = wid.div_ceil(2);
    let olen = wid / 2;
    let mut even = vec![F::zero(); c * h * elen];
    let mut odd = vec![F::zero(); c * h * olen];
    for r in 0..c * h {
        let src = &xs[r * wid..][..wid];
        let e = &mut even[r * elen..][..elen];
        let o = &mut odd[r * olen..][..olen];
        for j in 0..olen {
            e[j] = src[2 * j];
            o[j] = src[2 * j + 1];
        }
        if elen > olen {
            e[elen - 1] = src[wid - 1];
        }
    }
    (even, odd)
}

/// 3x3 convolution, zero padding 1. x: (Ci, H, W), w: (Co, Ci, 3, 3).
pub fn conv3_fwd<F: Scalar>(x: &ArrayView3<F>, w: &ArrayView4<F>, stride: usize) -> Array3<F> {
    let (ci_n, h, wid) = x.dim();
    let (co_n, ci_w, kh, kw) = w.dim();
    assert_eq!(ci_n, ci_w, "conv3_fwd channel mismatch");
    assert!(kh == 3 && kw == 3);
    let (ho, wo) = (conv3_out_dim(h, stride), conv3_out_dim(wid, stride));
    let mut out = Array3::<F>::zeros((co_n, ho, wo));
    let xs = x.as_slice().expect("conv3_fwd: x must be contiguous");
    let ws = w.as_slice().expect("conv3_fwd: w must be contiguous");
    let os = out.as_slice_mut().unwrap();

    if stride == 1 {
        for co in 0..co_n {
            for oy in 0..ho {
                let orow = &mut os[(co * ho + oy) * wo..][..wo];
                for ci in 0..ci_n {
                    let wbase = ((co * ci_n + ci) * 3) * 3;
                    for ky in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (w0, w1, w2) = (
                            ws[wbase + 3 * ky],
                            ws[wbase + 3 * ky + 1],
                            ws[wbase + 3 * ky + 2],
                        );
                        if w0 == F::zero() && w1 == F::zero() && w2 == F::zero() {
                            continue;
                        }
                        let xrow = &xs[(ci * h + iy as usize) * wid..][..wid];
                        row_tap3(orow, xrow, w0, w1, w2);
                    }
                }
            }
        }
    } else {
        let (even, odd) = deinterleave_cols(xs, ci_n, h, wid);
        let elen = wid.div_ceil(2);
        let olen = wid / 2;
        for co in 0..co_n {
            for oy in 0..ho {
                let orow = &mut os[(co * ho + oy) * wo..][..wo];
                for ci in 0..ci_n {
                    let wbase = ((co * ci_n + ci) * 3) * 3;
                    for ky in 0..3usize {
                        let iy = (2 * oy) as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (w0, w1, w2) = (
                            ws[wbase + 3 * ky],
                            ws[wbase + 3 * ky + 1],
                            ws[wbase + 3 * ky + 2],
                        );
                        if w0 == F::zero() && w1 == F::zero() && w2 == F::zero() {
                            continue;
                        }
                        let r = ci * h + iy as usize;
                        row_tap3_s2(
                            orow,
                            &even[r * elen..][..elen],
                            &odd[r * olen..][..olen],
                            w0,
                            w1,
                            w2,
                        );
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the conv3 input: the adjoint map of conv3_fwd in x.
pub fn conv3_dx<F: Scalar>(
    dy: &ArrayView3<F>,
    w: &ArrayView4<F>,
    stride: usize,
    in_hw: (usize, usize),
) -> Array3<F> {
    let (co_n, ho, wo) = dy.dim();
    let (co_w, ci_n, _, _) = w.dim();
    assert_eq!(co_n, co_w, "conv3_dx channel mismatch");
    let (h, wid) = in_hw;
    let ws = w.as_slice().unwrap();

    if stride == 1 {
        // dx[iy][ix] = sum w[ky][kx] * dy[iy+1-ky][ix+1-kx]: the same
        // correlation with the kernel flipped and channel axes swapped,
        // so delegate to the forward kernel on a transposed weight copy.
        debug_assert_eq!((h, wid), (ho, wo));
        let mut wt = Array4::<F>::zeros((ci_n, co_n, 3, 3));
        {
            let wts = wt.as_slice_mut().unwrap();
            for co in 0..co_n {
                for ci in 0..ci_n {
                    for k in 0..9usize {
                        wts[((ci * co_n + co) * 9) + k] =
                            ws[((co * ci_n + ci) * 9) + (8 - k)];
                    }
                }
            }
        }
        return conv3_fwd(dy, &wt.view(), 1);
    }

    let mut dx_arr = Array3::<F>::zeros((ci_n, h, wid));
    let gs = dy.as_slice().expect("conv3_dx: dy must be contiguous");
    let xs = dx_arr.as_slice_mut().unwrap();
    {
        // Stride 2 scatters each dy column to x columns 2ox-1..2ox+1.
        // Accumulate the even and odd output phases separately (both are
        // contiguous reads of dy), then interleave into the dx row.
        let elen = wid.div_ceil(2);
        let olen = wid / 2;
        let mut eacc = vec![F::zero(); elen];
        let mut oacc = vec![F::zero(); olen];
        for ci in 0..ci_n {
            for iy in 0..h {
                eacc.fill(F::zero());
                oacc.fill(F::zero());
                for co in 0..co_n {
                    let wbase = ((co * ci_n + ci) * 3) * 3;
                    for ky in 0..3usize {
                        let t = iy as isize + 1 - ky as isize;
                        if t < 0 || t % 2 != 0 {
                            continue;
                        }
                        let oy = (t / 2) as usize;
                        if oy >= ho {
                            continue;
                        }
                        let (w0, w1, w2) = (
                            ws[wbase + 3 * ky],
                            ws[wbase + 3 * ky + 1],
                            ws[wbase + 3 * ky + 2],
                        );
                        if w0 == F::zero() && w1 == F::zero() && w2 == F::zero() {
                            continue;
                        }
                        let grow = &gs[(co * ho + oy) * wo..][..wo];
                        // even ix=2j comes only from kx=1 at ox=j; odd
                        // ix=2j+1 from kx=2 at ox=j and kx=0 at ox=j+1.
                        for (e, &g) in eacc.iter_mut().zip(grow) {
                            *e = *e + w1 * g;
                        }
                        if olen > 0 {
                            for ((o, &g0), &g1) in oacc[..olen - 1]
                                .iter_mut()
                                .zip(&grow[..olen - 1])
                                .zip(&grow[1..olen])
                            {
                                *o = *o + w2 * g0 + w0 * g1;
                            }
                            let j = olen - 1;
                            let mut v = w2 * grow[j];
                            if j + 1 < wo {
                                v = v + w0 * grow[j + 1];
                            }
                            oacc[j] = oacc[j] + v;
                        }
                    }
                }
                let xrow = &mut xs[(ci * h + iy) * wid..][..wid];
                for j in 0..olen {
                    xrow[2 * j] = eacc[j];
                    xrow[2 * j + 1] = oacc[j];
                }
                if elen > olen {
                    xrow[wid - 1] = eacc[elen - 1];
                }
            }
        }
    }
    dx_arr
}

const LANES: usize = 8;

#[inline(always)]
fn reduce_lanes<F: Scalar>(l: &[F; LANES]) -> F {
    let s01 = l[0] + l[1];
    let s23 = l[2] + l[3];
    let s45 = l[4] + l[5];
    let s67 = l[6] + l[7];
    (s01 + s23) + (s45 + s67)
}

/// All three shifted dots of g against x in one pass: (sum g[i]*x[i-1]
/// for i>=1, sum g[i]*x[i], sum g[i]*x[i+1] for i<n-1). One traversal
/// feeds three tap accumulators, so the arrays are streamed once instead
/// of three times. Lane split and reduction order are fixed functions of
/// the length, so results are reproducible run to run.
#[inline(always)]
fn dot3_shift<F: Scalar>(g: &[F], x: &[F]) -> (F, F, F) {
    let n = g.len();
    debug_assert_eq!(n, x.len());
    if n == 1 {
        return (F::zero(), g[0] * x[0], F::zero());
    }
    let gi = &g[1..n - 1];
    let xm = &x[..n - 2];
    let xc = &x[1..n - 1];
    let xp = &x[2..];
    // Two groups of three lane accumulators: six independent add chains,
    // enough to cover the fp latency of the unfused mul+add pairs.
    let mut l0 = [[F::zero(); LANES]; 2];
    let mut l1 = [[F::zero(); LANES]; 2];
    let mut l2 = [[F::zero(); LANES]; 2];
    let m = gi.len();
    const STEP: usize = 2 * LANES;
    let mc = m - m % STEP;
    for (((kg, k0), k1), k2) in gi
        .chunks_exact(STEP)
        .zip(xm.chunks_exact(STEP))
        .zip(xc.chunks_exact(STEP))
        .zip(xp.chunks_exact(STEP))
    {
        for u in 0..2 {
            for l in 0..LANES {
                let gv = kg[u * LANES + l];
                l0[u][l] = l0[u][l] + gv * k0[u * LANES + l];
                l1[u][l] = l1[u][l] + gv * k1[u * LANES + l];
                l2[u][l] = l2[u][l] + gv * k2[u * LANES + l];
            }
        }
    }
    let (mut t0, mut t1, mut t2) = (F::zero(), F::zero(), F::zero());
    for i in mc..m {
        let gv = gi[i];
        t0 = t0 + gv * xm[i];
        t1 = t1 + gv * xc[i];
        t2 = t2 + gv * xp[i];
    }
    let a0 = (reduce_lanes(&l0[0]) + reduce_lanes(&l0[1])) + t0 + g[n - 1] * x[n - 2];
    let a1 = (reduce_lanes(&l1[0]) + reduce_lanes(&l1[1])) + t1
        + g[0] * x[0]
        + g[n - 1] * x[n - 1];
    let a2 = (reduce_lanes(&l2[0]) + reduce_lanes(&l2[1])) + t2 + g[0] * x[1];
    (a0, a1, a2)
}

/// Stride-2 counterpart on a deinterleaved input row: pairs g[ox] with
/// x[2ox+kx-1], i.e. odd[ox-1], even[ox], odd[ox].
#[inline(always)]
fn dot3_shift_s2<F: Scalar>(g: &[F], even: &[F], odd: &[F]) -> (F, F, F) {
    let wo = g.len();
    let olen = odd.len();
    debug_assert_eq!(wo, even.len());
    if olen == 0 {
        return (F::zero(), g[0] * even[0], F::zero());
    }
    let gi = &g[1..olen];
    let om = &odd[..olen - 1];
    let ec = &even[1..olen];
    let oc = &odd[1..olen];
    let mut l0 = [F::zero(); LANES];
    let mut l1 = [F::zero(); LANES];
    let mut l2 = [F::zero(); LANES];
    let m = gi.len();
    let mc = m - m % LANES;
    for (((kg, k0), k1), k2) in gi
        .chunks_exact(LANES)
        .zip(om.chunks_exact(LANES))
        .zip(ec.chunks_exact(LANES))
        .zip(oc.chunks_exact(LANES))
    {
        for l in 0..LANES {
            let gv = kg[l];
            l0[l] = l0[l] + gv * k0[l];
            l1[l] = l1[l] + gv * k1[l];
            l2[l] = l2[l] + gv * k2[l];
        }
    }
    let (mut t0, mut t1, mut t2) = (F::zero(), F::zero(), F::zero());
    for i in mc..m {
        let gv = gi[i];
        t0 = t0 + gv * om[i];
        t1 = t1 + gv * ec[i];
        t2 = t2 + gv * oc[i];
    }
    let mut a0 = reduce_lanes(&l0) + t0;
    let mut a1 = reduce_lanes(&l1) + t1 + g[0] * even[0];
    let a2 = reduce_lanes(&l2) + t2 + g[0] * odd[0];
    if wo > olen {
        a0 = a0 + g[olen] * odd[olen - 1];
        a1 = a1 + g[olen] * even[olen];
    }
    (a0, a1, a2)
}

/// Gradient w.r.t. the conv3 weights.
pub fn conv3_dw<F: Scalar>(
    x: &ArrayView3<F>,
    dy: &ArrayView3<F>,
    stride: usize,
) -> Array4<F> {
    let (ci_n, h, wid) = x.dim();
    let (co_n, ho, wo) = dy.dim();
    let mut dw = Array4::<F>::zeros((co_n, ci_n, 3, 3));
    let xs = x.as_slice().expect("conv3_dw: x must be contiguous");
    let gs = dy.as_slice().expect("conv3_dw: dy must be contiguous");
    let dws = dw.as_slice_mut().unwrap();

    if stride == 1 {
        // Valid row pairs (oy, iy=oy+ky-1) form one contiguous block in
        // both planes, so each tap is a single long dot over the blocks
        // shifted by one column, minus the pairs that wrap across a row
        // boundary (kx=0 pairs g[r][0] with x[r-1][wid-1] and kx=2 pairs
        // g[r-1][wid-1] with x[r][0]; neither is a real conv pair).
        for co in 0..co_n {
            for ci in 0..ci_n {
                let wbase = ((co * ci_n + ci) * 3) * 3;
                for ky in 0..3usize {
                    let oy0 = if ky == 0 { 1 } else { 0 };
                    let oy1 = if ky == 2 { ho - 1 } else { ho };
                    if oy0 >= oy1 {
                        continue;
                    }
                    let rows = oy1 - oy0;
                    let n = rows * wid;
                    let gseg = &gs[(co * ho + oy0) * wo..][..n];
                    let xseg = &xs[(ci * h + oy0 + ky - 1) * wid..][..n];
                    let (mut a0, a1, mut a2) = dot3_shift(gseg, xseg);
                    for r in 1..rows {
                        let b = r * wid;
                        a0 = a0 - gseg[b] * xseg[b - 1];
                        a2 = a2 - gseg[b - 1] * xseg[b];
                    }
                    dws[wbase + 3 * ky] = a0;
                    dws[wbase + 3 * ky + 1] = a1;
                    dws[wbase + 3 * ky + 2] = a2;
                }
            }
        }
    } else {
        // dw[kx] pairs dy[ox] with x[2ox+kx-1]; on deinterleaved rows the
        // three taps become plain dots against even/odd planes.
        let (even, odd) = deinterleave_cols(xs, ci_n, h, wid);
        let elen = wid.div_ceil(2);
        let olen = wid / 2;
        for co in 0..co_n {
            for ci in 0..ci_n {
                let wbase = ((co * ci_n + ci) * 3) * 3;
                for ky in 0..3usize {
                    let (mut a0, mut a1, mut a2) = (F::zero(), F::zero(), F::zero());
                    for oy in 0..ho {
                        let iy = (2 * oy) as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gs[(co * ho + oy) * wo..][..wo];
                        let r = ci * h + iy as usize;
                        let erow = &even[r * elen..][..elen];
                        let orow = &odd[r * olen..][..olen];
                        let (d0, d1, d2) = dot3_shift_s2(grow, erow, orow);
                        a0 = a0 + d0;
                        a1 = a1 + d1;
                        a2 = a2 + d2;
                    }
                    dws[wbase + 3 * ky] = a0;
                    dws[wbase + 3 * ky + 1] = a1;
                    dws[wbase + 3 * ky + 2] = a2;
                }
            }
        }
    }
    dw
}

/// Transposed 3x3 convolution with stride 2, padding 1, output padding 1:
/// doubles both spatial dims. Weight layout (Ci, Co, 3, 3). Realized as
/// the adjoint of conv3 stride 2, so all three gradients reuse the conv3
/// kernels with swapped roles.
pub fn convt3_fwd<F: Scalar>(x: &ArrayView3<F>, w: &ArrayView4<F>) -> Array3<F> {
    let (ci_n, h, wid) = x.dim();
    let (ci_w, _co_n, _, _) = w.dim();
    assert_eq!(ci_n, ci_w, "convt3_fwd channel mismatch");
    // The underlying stride-2 conv maps (Co, 2H, 2W) -> (Ci, H, W) with
    // weight (Ci, Co, 3, 3); this is its adjoint, so the weight passes
    // through with conv-out = Ci in dim 0, exactly our layout.
    conv3_dx(x, w, 2, (2 * h, 2 * wid))
}

pub fn convt3_dx<F: Scalar>(dy: &ArrayView3<F>, w: &ArrayView4<F>) -> Array3<F> {
    conv3_fwd(dy, w, 2)
}

pub fn convt3_dw<F: Scalar>(x: &ArrayView3<F>, dy: &ArrayView3<F>) -> Array4<F> {
    // For the underlying conv, dy acts as the input image and x as the
    // output gradient; conv3_dw then returns (Ci, Co, 3, 3) directly.
    conv3_dw(dy, x, 2)
}

/// 2x2 average pooling (floor semantics on odd dims are not needed: all
/// pipeline dims are even by the pad-to-64 contract).
pub fn avgpool2_fwd<F: Scalar>(x: &ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::<F>::zeros((c, ho, wo));
    let q = F::from_f64(0.25);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let s = x[(ci, 2 * oy, 2 * ox)]
                    + x[(ci, 2 * oy, 2 * ox + 1)]
                    + x[(ci, 2 * oy + 1, 2 * ox)]
                    + x[(ci, 2 * oy + 1, 2 * ox + 1)];
                out[(ci, oy, ox)] = s * q;
            }
        }
    }
    out
}

pub fn avgpool2_bwd<F: Scalar>(dy: &ArrayView3<F>) -> Array3<F> {
    let (c, ho, wo) = dy.dim();
    let mut dx = Array3::<F>::zeros((c, ho * 2, wo * 2));
    let q = F::from_f64(0.25);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(ci, oy, ox)] * q;
                dx[(ci, 2 * oy, 2 * ox)] = g;
                dx[(ci, 2 * oy, 2 * ox + 1)] = g;
                dx[(ci, 2 * oy + 1, 2 * ox)] = g;
                dx[(ci, 2 * oy + 1, 2 * ox + 1)] = g;
            }
        }
    }
    dx
}

/// Factor-2 bilinear upsampling with half-pixel centers and border clamp.
/// Output pixel o samples input coordinate (o + 0.5)/2 - 0.5.
pub fn upsample2_fwd<F: Scalar>(x: &ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Array3::<F>::zeros((c, ho, wo));
    let taps_y: Vec<(usize, usize, F, F)> = (0..ho).map(|o| tap2(o, h)).collect();
    let taps_x: Vec<(usize, usize, F, F)> = (0..wo).map(|o| tap2(o, w)).collect();
    for ci in 0..c {
        for oy in 0..ho {
            let (y0, y1, wy0, wy1) = taps_y[oy];
            for ox in 0..wo {
                let (x0, x1, wx0, wx1) = taps_x[ox];
                out[(ci, oy, ox)] = x[(ci, y0, x0)] * wy0 * wx0
                    + x[(ci, y0, x1)] * wy0 * wx1
                    + x[(ci, y1, x0)] * wy1 * wx0
                    + x[(ci, y1, x1)] * wy1 * wx1;
            }
        }
    }
    out
}

pub fn upsample2_bwd<F: Scalar>(dy: &ArrayView3<F>) -> Array3<F> {
    let (c, ho, wo) = dy.dim();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    let taps_y: Vec<(usize, usize, F, F)> = (0..ho).map(|o| tap2(o, h)).collect();
    let taps_x: Vec<(usize, usize, F, F)> = (0..wo).map(|o| tap2(o, w)).collect();
    for ci in 0..c {
        for oy in 0..ho {
            let (y0, y1, wy0, wy1) = taps_y[oy];
            for ox in 0..wo {
                let (x0, x1, wx0, wx1) = taps_x[ox];
                let g = dy[(ci, oy, ox)];
                dx[(ci, y0, x0)] = dx[(ci, y0, x0)] + g * wy0 * wx0;
                dx[(ci, y0, x1)] = dx[(ci, y0, x1)] + g * wy0 * wx1;
                dx[(ci, y1, x0)] = dx[(ci, y1, x0)] + g * wy1 * wx0;
                dx[(ci, y1, x1)] = dx[(ci, y1, x1)] + g * wy1 * wx1;
            }
        }
    }
    dx
}

fn tap2<F: Scalar>(o: usize, n: usize) -> (usize, usize, F, F) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    let f = s.floor();
    let frac = s - f;
    let i0 = (f.max(0.0) as usize).min(n - 1);
    let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
    (
        i0,
        i1,
        F::from_f64(1.0 - frac),
        F::from_f64(frac),
    )
}

/// Backward bilinear warp with border replication. flow is (2, H, W) with
/// channel 0 = dx and channel 1 = dy: output(y, x) samples src at
/// (x + dx, y + dy).
pub fn warp_fwd<F: Scalar>(src: &ArrayView3<F>, flow: &ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = src.dim();
    assert_eq!(flow.dim().0, 2, "flow must have 2 channels");
    assert_eq!((flow.dim().1, flow.dim().2), (h, w), "flow/src dims differ");
    let mut out = Array3::<F>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow[(0, y, x)].to_f64();
            let sy = y as f64 + flow[(1, y, x)].to_f64();
            let (x0, x1, fx) = clamp_taps(sx, w);
            let (y0, y1, fy) = clamp_taps(sy, h);
            let (w00, w01, w10, w11) = bilin_weights::<F>(fx, fy);
            for ci in 0..c {
                out[(ci, y, x)] = src[(ci, y0, x0)] * w00
                    + src[(ci, y0, x1)] * w01
                    + src[(ci, y1, x0)] * w10
                    + src[(ci, y1, x1)] * w11;
            }
        }
    }
    out
}

/// Gradients of warp_fwd w.r.t. both src and flow.
pub fn warp_bwd<F: Scalar>(
    src: &ArrayView3<F>,
    flow: &ArrayView3<F>,
    dy_out: &ArrayView3<F>,
) -> (Array3<F>, Array3<F>) {
    let (c, h, w) = src.dim();
    let mut d_src = Array3::<F>::zeros((c, h, w));
    let mut d_flow = Array3::<F>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow[(0, y, x)].to_f64();
            let sy = y as f64 + flow[(1, y, x)].to_f64();
            let (x0, x1, fx) = clamp_taps(sx, w);
            let (y0, y1, fy) = clamp_taps(sy, h);
            let (w00, w01, w10, w11) = bilin_weights::<F>(fx, fy);
            let fxf = F::from_f64(fx);
            let fyf = F::from_f64(fy);
            let one = F::one();
            let mut gx = F::zero();
            let mut gy = F::zero();
            for ci in 0..c {
                let g = dy_out[(ci, y, x)];
                d_src[(ci, y0, x0)] = d_src[(ci, y0, x0)] + g * w00;
                d_src[(ci, y0, x1)] = d_src[(ci, y0, x1)] + g * w01;
                d_src[(ci, y1, x0)] = d_src[(ci, y1, x0)] + g * w10;
                d_src[(ci, y1, x1)] = d_src[(ci, y1, x1)] + g * w11;
                let s00 = src[(ci, y0, x0)];
                let s01 = src[(ci, y0, x1)];
                let s10 = src[(ci, y1, x0)];
                let s11 = src[(ci, y1, x1)];
                // d value / d sx and / d sy; clamped taps (x0 == x1) give a
                // zero derivative automatically.
                gx = gx + g * ((one - fyf) * (s01 - s00) + fyf * (s11 - s10));
                gy = gy + g * ((one - fxf) * (s10 - s00) + fxf * (s11 - s01));
            }
            d_flow[(0, y, x)] = gx;
            d_flow[(1, y, x)] = gy;
        }
    }
    (d_src, d_flow)
}

fn clamp_taps(s: f64, n: usize) -> (usize, usize, f64) {
    let f = s.floor();
    let frac = s - f;
    let i0 = f.clamp(0.0, (n - 1) as f64) as usize;
    let i1 = (f + 1.0).clamp(0.0, (n - 1) as f64) as usize;
    (i0, i1, frac)
}

fn bilin_weights<F: Scalar>(fx: f64, fy: f64) -> (F, F, F, F) {
    (
        F::from_f64((1.0 - fy) * (1.0 - fx)),
        F::from_f64((1.0 - fy) * fx),
        F::from_f64(fy * (1.0 - fx)),
        F::from_f64(fy * fx),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn3(rng: &mut StdRng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    fn randn4(rng: &mut StdRng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    /// Naive zero-padded 3x3 convolution, the correctness oracle.
    fn conv3_ref(x: &Array3<f64>, w: &Array4<f64>, stride: usize) -> Array3<f64> {
        let (ci_n, h, wid) = x.dim();
        let (co_n, _, _, _) = w.dim();
        let (ho, wo) = (conv3_out_dim(h, stride), conv3_out_dim(wid, stride));
        let mut out = Array3::<f64>::zeros((co_n, ho, wo));
        for co in 0..co_n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (stride * oy + ky) as isize - 1;
                                let ix = (stride * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wid
                                {
                                    acc += w[(co, ci, ky, kx)]
                                        * x[(ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                    out[(co, oy, ox)] = acc;
                }
            }
        }
        out
    }

    fn dot3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    fn dot4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3_matches_reference() {
        let mut rng = StdRng::seed_from_u64(7);
        for &stride in &[1usize, 2] {
            for &(h, wd) in &[(6usize, 8usize), (5, 7), (4, 4)] {
                let x = randn3(&mut rng, (3, h, wd));
                let w = randn4(&mut rng, (4, 3, 3, 3));
                let got = conv3_fwd(&x.view(), &w.view(), stride);
                let want = conv3_ref(&x, &w, stride);
                let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err < 1e-12, "stride {stride} size {h}x{wd}: err {err}");
            }
        }
    }

    #[test]
    fn conv3_dx_is_adjoint() {
        let mut rng = StdRng::seed_from_u64(8);
        for &stride in &[1usize, 2] {
            let x = randn3(&mut rng, (3, 6, 8));
            let w = randn4(&mut rng, (5, 3, 3, 3));
            let y = conv3_fwd(&x.view(), &w.view(), stride);
            let g = randn3(&mut rng, y.dim());
            let dx = conv3_dx(&g.view(), &w.view(), stride, (6, 8));
            let lhs = dot3(&y, &g);
            let rhs = dot3(&x, &dx);
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv3_dw_is_adjoint_in_w() {
        let mut rng = StdRng::seed_from_u64(9);
        for &stride in &[1usize, 2] {
            let x = randn3(&mut rng, (2, 6, 6));
            let w = randn4(&mut rng, (4, 2, 3, 3));
            let y = conv3_fwd(&x.view(), &w.view(), stride);
            let g = randn3(&mut rng, y.dim());
            let dw = conv3_dw(&x.view(), &g.view(), stride);
            let lhs = dot3(&y, &g);
            let rhs = dot4(&w, &dw);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn convt3_doubles_dims_and_adjoints_hold() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = randn3(&mut rng, (3, 4, 5));
        let w = randn4(&mut rng, (3, 6, 3, 3));
        let y = convt3_fwd(&x.view(), &w.view());
        assert_eq!(y.dim(), (6, 8, 10));
        let g = randn3(&mut rng, y.dim());
        let dx = convt3_dx(&g.view(), &w.view());
        assert!((dot3(&y, &g) - dot3(&x, &dx)).abs() < 1e-10);
        let dw = convt3_dw(&x.view(), &g.view());
        assert!((dot3(&y, &g) - dot4(&w, &dw)).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = randn3(&mut rng, (3, 6, 8));
        let y = avgpool2_fwd(&x.view());
        assert_eq!(y.dim(), (3, 3, 4));
        let g = randn3(&mut rng, y.dim());
        let dx = avgpool2_bwd(&g.view());
        assert!((dot3(&y, &g) - dot3(&x, &dx)).abs() < 1e-12);

        let u = upsample2_fwd(&x.view());
        assert_eq!(u.dim(), (3, 12, 16));
        let gu = randn3(&mut rng, u.dim());
        let dxu = upsample2_bwd(&gu.view());
        assert!((dot3(&u, &gu) - dot3(&x, &dxu)).abs() < 1e-10);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Array3::<f64>::from_elem((1, 4, 4), 3.5);
        let u = upsample2_fwd(&x.view());
        for v in u.iter() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut rng = StdRng::seed_from_u64(12);
        let src = randn3(&mut rng, (3, 7, 9));
        let flow = Array3::<f64>::zeros((2, 7, 9));
        let out = warp_fwd(&src.view(), &flow.view());
        assert_eq!(out, src);
    }

    #[test]
    fn warp_integer_shift_matches_index_oracle() {
        let mut rng = StdRng::seed_from_u64(13);
        let (h, w) = (8usize, 10usize);
        let src = randn3(&mut rng, (2, h, w));
        // flow = (+2, -1): out(y, x) = src(clamp(y - 1), clamp(x + 2)).
        let mut flow = Array3::<f64>::zeros((2, h, w));
        flow.slice_mut(ndarray::s![0, .., ..]).fill(2.0);
        flow.slice_mut(ndarray::s![1, .., ..]).fill(-1.0);
        let out = warp_fwd(&src.view(), &flow.view());
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as isize - 1).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + 2).clamp(0, w as isize - 1) as usize;
                    assert!((out[(c, y, x)] - src[(c, sy, sx)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_src_grad_is_adjoint_and_flow_grad_matches_fd() {
        let mut rng = StdRng::seed_from_u64(14);
        let src = randn3(&mut rng, (2, 6, 6));
        // Fractional flow away from integer lattice so FD stays in one cell.
        let flow = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(0.2..0.4));
        let out = warp_fwd(&src.view(), &flow.view());
        let g = randn3(&mut rng, out.dim());
        let (d_src, d_flow) = warp_bwd(&src.view(), &flow.view(), &g.view());
        // Linear in src: adjoint identity.
        assert!((dot3(&out, &g) - dot3(&src, &d_src)).abs() < 1e-10);
        // Flow gradient by central differences.
        let h = 1e-5;
        for &(c, y, x) in &[(0usize, 2usize, 3usize), (1, 4, 1), (0, 0, 0), (1, 5, 5)] {
            let mut fp = flow.clone();
            fp[(c, y, x)] += h;
            let mut fm = flow.clone();
            fm[(c, y, x)] -= h;
            let lp = dot3(&warp_fwd(&src.view(), &fp.view()), &g);
            let lm = dot3(&warp_fwd(&src.view(), &fm.view()), &g);
            let fd = (lp - lm) / (2.0 * h);
            let an = d_flow[(c, y, x)];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "fd {fd} an {an}");
        }
    }
}

/// Normalized 11-tap Gaussian (sigma = 1.5), the standard SSIM window.
pub fn gauss11() -> [f64; 11] {
    let mut w = [0.0f64; 11];
    let s2 = 2.0 * 1.5 * 1.5;
    let mut sum = 0.0;
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - 5.0;
        *v = (-d * d / s2).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Depthwise 11x11 Gaussian blur, zero padding, separable passes. The
/// kernel is symmetric, so this map is its own adjoint.
pub fn blur11_fwd<F: Scalar>(x: &ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let win: Vec<F> = gauss11().iter().map(|&v| F::from_f64(v)).collect();
    let mut tmp = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = F::zero();
                for (k, &wk) in win.iter().enumerate() {
                    let jj = j as isize + k as isize - 5;
                    if jj >= 0 && (jj as usize) < w {
                        acc = acc + wk * x[(ci, i, jj as usize)];
                    }
                }
                tmp[(ci, i, j)] = acc;
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = F::zero();
                for (k, &wk) in win.iter().enumerate() {
                    let ii = i as isize + k as isize - 5;
                    if ii >= 0 && (ii as usize) < h {
                        acc = acc + wk * tmp[(ci, ii as usize, j)];
                    }
                }
                out[(ci, i, j)] = acc;
            }
        }
    }
    out
}
