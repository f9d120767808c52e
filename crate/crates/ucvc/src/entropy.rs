//! Entropy coding: range coder, Gaussian symbol tables, factorized prior.
//!
//! The coder is a carry-propagating byte-oriented range coder (64-bit low,
//! 32-bit range, renormalization below 2^24) over 16-bit frequency tables.
//! Tables are derived on the fly from the model's Gaussian parameters, so
//! no side tables travel in the bitstream; encoder and decoder rebuild
//! identical tables from identical floats, which is why every probability
//! evaluation goes through `dmath` instead of libm.
//!
//! Each table covers a finite window of symbols around the predicted mean
//! plus one escape slot of frequency 1; out-of-window values escape to a
//! sign + Exp-Golomb code of raw bits. Every in-window symbol keeps a
//! frequency of at least 1 by construction, so coding never fails.
//!
//! Stream integrity: the decoder counts consumed bytes (zero-filling past
//! the end) and the grid decoders require consumed == payload length,
//! which catches truncation and most corruption cheaply.

use crate::dmath;
use crate::kernels::Scalar;
use crate::{Error, Result};
use ndarray::{Array3, ArrayView3};
use std::collections::HashMap;
use std::rc::Rc;

const TOP: u32 = 1 << 24;
pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;

pub const SIGMA_MIN: f64 = 0.11;
pub const SIGMA_MAX: f64 = 256.0;
pub const SIGMA_LEVELS: usize = 64;
const MU_STEPS: i64 = 256;
const MAX_WINDOW: i64 = 96;

// ---------------------------------------------------------------------------
// Range coder
// ---------------------------------------------------------------------------

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Encode a symbol occupying [cum, cum + freq) of [0, total).
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total);
        let r = self.range / total;
        self.low += (cum as u64) * (r as u64);
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    pub fn encode_bit(&mut self, bit: bool) {
        self.encode(bit as u32, 1, 2);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low > u32::MAX as u64 {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes pulled so far, counting zero-filled reads past the end. After
    /// a full decode this must equal the encoder's output length.
    pub fn consumed(&self) -> usize {
        self.pos
    }

    pub fn overran(&self) -> bool {
        self.pos > self.input.len()
    }

    /// Cumulative-frequency value of the next symbol under `total`.
    pub fn decode_freq(&mut self, total: u32) -> u32 {
        self.range /= total;
        (self.code / self.range).min(total - 1)
    }

    /// Commit the symbol chosen from `decode_freq`.
    pub fn decode_update(&mut self, cum: u32, freq: u32) {
        self.code = self.code.wrapping_sub(cum.wrapping_mul(self.range));
        self.range = self.range.wrapping_mul(freq);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    pub fn decode_bit(&mut self) -> bool {
        let v = self.decode_freq(2);
        let bit = v >= 1;
        self.decode_update(bit as u32, 1);
        bit
    }
}

// ---------------------------------------------------------------------------
// Integer CDF tables
// ---------------------------------------------------------------------------

/// A 16-bit-total table over a contiguous symbol window [lo, lo + n) plus
/// one escape slot of frequency 1 at the top. `cum` has n + 2 entries with
/// cum[0] = 0 and cum[n + 1] = TOTAL.
#[derive(Clone, Debug)]
pub struct IntegerCdf {
    pub lo: i64,
    cum: Vec<u32>,
}

impl IntegerCdf {
    /// Build from window edge probabilities. `edge_cdf[j]` is the model
    /// CDF at the lower edge of symbol j, for j in 0..=n; values need not
    /// be normalized to the window.
    pub fn from_edges(lo: i64, edge_cdf: &[f64]) -> Self {
        let n = edge_cdf.len() - 1;
        assert!(n >= 1);
        let c0 = edge_cdf[0];
        let cn = edge_cdf[n];
        let span = (cn - c0).max(1e-30);
        let budget = (TOTAL - (n as u32 + 1)) as f64;
        let mut cum = Vec::with_capacity(n + 2);
        for (j, &e) in edge_cdf.iter().enumerate() {
            let norm = ((e - c0) / span).clamp(0.0, 1.0);
            cum.push((norm * budget) as u32 + j as u32);
        }
        cum.push(TOTAL);
        debug_assert_eq!(cum[0], 0);
        debug_assert_eq!(cum[n], TOTAL - 1);
        IntegerCdf { lo, cum }
    }

    pub fn window_len(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn contains(&self, s: i64) -> bool {
        s >= self.lo && s < self.lo + self.window_len() as i64
    }

    pub fn encode(&self, enc: &mut RangeEncoder, s: i64) {
        let n = self.window_len();
        if self.contains(s) {
            let k = (s - self.lo) as usize;
            enc.encode(self.cum[k], self.cum[k + 1] - self.cum[k], TOTAL);
        } else {
            // Escape, then sign + Exp-Golomb distance past the window edge.
            enc.encode(self.cum[n], 1, TOTAL);
            let (above, d) = if s < self.lo {
                (false, self.lo - s)
            } else {
                (true, s - (self.lo + n as i64 - 1))
            };
            enc.encode_bit(above);
            encode_exp_golomb(enc, (d - 1) as u64);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i64> {
        let n = self.window_len();
        let v = dec.decode_freq(TOTAL);
        // Last j with cum[j] <= v.
        let j = self.cum.partition_point(|&c| c <= v) - 1;
        let freq = self.cum[j + 1] - self.cum[j];
        dec.decode_update(self.cum[j], freq);
        if j < n {
            return Ok(self.lo + j as i64);
        }
        let above = dec.decode_bit();
        let d = decode_exp_golomb(dec)? as i64 + 1;
        Ok(if above {
            self.lo + n as i64 - 1 + d
        } else {
            self.lo - d
        })
    }
}

/// Order-0 Exp-Golomb over p=0.5 coder bits.
fn encode_exp_golomb(enc: &mut RangeEncoder, v: u64) {
    let n = v + 1;
    let m = 63 - n.leading_zeros();
    for _ in 0..m {
        enc.encode_bit(false);
    }
    for i in (0..=m).rev() {
        enc.encode_bit((n >> i) & 1 == 1);
    }
}

fn decode_exp_golomb(dec: &mut RangeDecoder) -> Result<u64> {
    let mut m = 0u32;
    while !dec.decode_bit() {
        m += 1;
        if m > 48 {
            return Err(Error::corrupt("escape length prefix out of range"));
        }
    }
    let mut n = 1u64;
    for _ in 0..m {
        n = (n << 1) | dec.decode_bit() as u64;
    }
    Ok(n - 1)
}

// ---------------------------------------------------------------------------
// Gaussian parameter quantization and table cache
// ---------------------------------------------------------------------------

/// Means quantize to 1/256 steps.
pub fn quantize_mu(mu: f64) -> i64 {
    (mu * MU_STEPS as f64).round() as i64
}

/// Scales quantize to a geometric grid over [SIGMA_MIN, SIGMA_MAX].
pub fn quantize_sigma(sigma: f64) -> u8 {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let t = dmath::det_ln(s / SIGMA_MIN) / dmath::det_ln(SIGMA_MAX / SIGMA_MIN);
    let i = (t * (SIGMA_LEVELS - 1) as f64).round();
    i.clamp(0.0, (SIGMA_LEVELS - 1) as f64) as u8
}

pub fn sigma_value(idx: u8) -> f64 {
    let t = idx as f64 / (SIGMA_LEVELS - 1) as f64;
    SIGMA_MIN * dmath::det_exp(t * dmath::det_ln(SIGMA_MAX / SIGMA_MIN))
}

fn window_half_width(sigma: f64) -> i64 {
    ((8.0 * sigma).ceil() as i64).clamp(2, MAX_WINDOW)
}

/// Ideal code length in bits that the quantized-parameter model assigns to
/// symbol s; the coder's actual output tracks this within table precision.
pub fn gaussian_symbol_bits(s: i64, mu: f64, sigma: f64) -> f64 {
    let mq = quantize_mu(mu) as f64 / MU_STEPS as f64;
    let sq = sigma_value(quantize_sigma(sigma));
    let p = dmath::normal_interval_prob(
        (s as f64 - 0.5 - mq) / sq,
        (s as f64 + 0.5 - mq) / sq,
    );
    -dmath::det_log2(p.max(1e-12))
}

/// Builds and caches per-(mean-fraction, sigma-level) tables. Tables are
/// translation invariant in the integer part of the mean, so the cache is
/// bounded by 256 * SIGMA_LEVELS entries.
pub struct GaussianCoder {
    cache: HashMap<(u8, u8), Rc<IntegerCdf>>,
}

impl Default for GaussianCoder {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianCoder {
    pub fn new() -> Self {
        GaussianCoder {
            cache: HashMap::new(),
        }
    }

    fn table(&mut self, mu256: i64, sidx: u8) -> (Rc<IntegerCdf>, i64) {
        let floor_mu = mu256.div_euclid(MU_STEPS);
        let frac = mu256.rem_euclid(MU_STEPS) as u8;
        let table = self
            .cache
            .entry((frac, sidx))
            .or_insert_with(|| {
                let sigma = sigma_value(sidx);
                let w = window_half_width(sigma);
                let n = 2 * w + 1;
                let fmu = frac as f64 / MU_STEPS as f64;
                let mut edges = Vec::with_capacity(n as usize + 1);
                for j in 0..=n {
                    // Symbol window is [-w, w] around the mean's integer part.
                    let e = (-w + j) as f64 - 0.5 - fmu;
                    edges.push(dmath::normal_cdf(e / sigma));
                }
                Rc::new(IntegerCdf::from_edges(-w, &edges))
            })
            .clone();
        (table, floor_mu)
    }

    pub fn encode_grid<F: Scalar>(
        &mut self,
        sym: &ArrayView3<i32>,
        mu: &ArrayView3<F>,
        sigma: &ArrayView3<F>,
    ) -> Vec<u8> {
        assert_eq!(sym.dim(), mu.dim());
        assert_eq!(sym.dim(), sigma.dim());
        if sym.is_empty() {
            return Vec::new();
        }
        let mut enc = RangeEncoder::new();
        for ((s, m), sg) in sym.iter().zip(mu.iter()).zip(sigma.iter()) {
            let mu256 = quantize_mu((*m).to_f64());
            let sidx = quantize_sigma((*sg).to_f64());
            let (table, floor_mu) = self.table(mu256, sidx);
            table.encode(&mut enc, *s as i64 - floor_mu);
        }
        enc.finish()
    }

    pub fn decode_grid<F: Scalar>(
        &mut self,
        data: &[u8],
        mu: &ArrayView3<F>,
        sigma: &ArrayView3<F>,
    ) -> Result<Array3<i32>> {
        assert_eq!(mu.dim(), sigma.dim());
        let dim = mu.dim();
        if mu.is_empty() {
            if !data.is_empty() {
                return Err(Error::corrupt("nonempty payload for empty grid"));
            }
            return Ok(Array3::zeros(dim));
        }
        let mut dec = RangeDecoder::new(data);
        let mut out = Array3::<i32>::zeros(dim);
        {
            let flat = out.as_slice_mut().unwrap();
            for ((o, m), sg) in flat.iter_mut().zip(mu.iter()).zip(sigma.iter()) {
                let mu256 = quantize_mu((*m).to_f64());
                let sidx = quantize_sigma((*sg).to_f64());
                let (table, floor_mu) = self.table(mu256, sidx);
                let s = table.decode(&mut dec)? + floor_mu;
                if s < i32::MIN as i64 || s > i32::MAX as i64 {
                    return Err(Error::corrupt("decoded symbol out of range"));
                }
                *o = s as i32;
            }
        }
        if dec.consumed() != data.len() {
            return Err(Error::corrupt(format!(
                "payload length mismatch: consumed {} of {} bytes",
                dec.consumed(),
                data.len()
            )));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Factorized prior
// ---------------------------------------------------------------------------

/// Raw (pre-activation) weights of the per-channel monotone CDF network
/// 1 -> 3 -> 3 -> 1, copied to f64 for deterministic table building. Layer
/// weights pass through softplus so the map stays strictly increasing;
/// hidden layers add a bounded tanh gate.
#[derive(Clone, Debug)]
pub struct FactorizedParams {
    pub w1: Vec<[f64; 3]>,
    pub b1: Vec<[f64; 3]>,
    pub a1: Vec<[f64; 3]>,
    pub w2: Vec<[[f64; 3]; 3]>,
    pub b2: Vec<[f64; 3]>,
    pub a2: Vec<[f64; 3]>,
    pub w3: Vec<[f64; 3]>,
    pub b3: Vec<f64>,
}

impl FactorizedParams {
    pub fn channels(&self) -> usize {
        self.w1.len()
    }

    /// CDF of channel c at x, in (0, 1), built from dmath primitives only.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        let mut h = [0.0f64; 3];
        for i in 0..3 {
            h[i] = dmath::det_softplus(self.w1[c][i]) * x + self.b1[c][i];
            h[i] += dmath::det_tanh(self.a1[c][i]) * dmath::det_tanh(h[i]);
        }
        let mut h2 = [0.0f64; 3];
        for i in 0..3 {
            let mut acc = self.b2[c][i];
            for j in 0..3 {
                acc += dmath::det_softplus(self.w2[c][i][j]) * h[j];
            }
            h2[i] = acc + dmath::det_tanh(self.a2[c][i]) * dmath::det_tanh(acc);
        }
        let mut z = self.b3[c];
        for j in 0..3 {
            z += dmath::det_softplus(self.w3[c][j]) * h2[j];
        }
        dmath::det_sigmoid(z)
    }

    /// Bits the factorized model assigns to integer symbol s on channel c.
    pub fn symbol_bits(&self, c: usize, s: i64) -> f64 {
        let p = self.cdf(c, s as f64 + 0.5) - self.cdf(c, s as f64 - 0.5);
        -dmath::det_log2(p.max(1e-12))
    }

    /// Deterministic coding window: expand until both tails carry less
    /// than one 2^-17 quantile, then integerize.
    pub fn build_table(&self, c: usize) -> IntegerCdf {
        let eps = 1.0 / 131072.0;
        let mut w = 2i64;
        while w < 4 * MAX_WINDOW {
            let lo_cdf = self.cdf(c, -(w as f64) - 0.5);
            let hi_cdf = self.cdf(c, w as f64 + 0.5);
            if lo_cdf < eps && hi_cdf > 1.0 - eps {
                break;
            }
            w += 2;
        }
        let n = 2 * w + 1;
        let mut edges = Vec::with_capacity(n as usize + 1);
        for j in 0..=n {
            edges.push(self.cdf(c, (-w + j) as f64 - 0.5));
        }
        IntegerCdf::from_edges(-w, &edges)
    }

    pub fn encode_grid(&self, sym: &ArrayView3<i32>) -> Vec<u8> {
        let (c_n, _, _) = sym.dim();
        assert_eq!(c_n, self.channels());
        if sym.is_empty() {
            return Vec::new();
        }
        let tables: Vec<IntegerCdf> = (0..c_n).map(|c| self.build_table(c)).collect();
        let mut enc = RangeEncoder::new();
        for (c, plane) in sym.outer_iter().enumerate() {
            for s in plane.iter() {
                tables[c].encode(&mut enc, *s as i64);
            }
        }
        enc.finish()
    }

    pub fn decode_grid(
        &self,
        data: &[u8],
        dim: (usize, usize, usize),
    ) -> Result<Array3<i32>> {
        assert_eq!(dim.0, self.channels());
        if dim.0 * dim.1 * dim.2 == 0 {
            if !data.is_empty() {
                return Err(Error::corrupt("nonempty payload for empty grid"));
            }
            return Ok(Array3::zeros(dim));
        }
        let tables: Vec<IntegerCdf> = (0..dim.0).map(|c| self.build_table(c)).collect();
        let mut dec = RangeDecoder::new(data);
        let mut out = Array3::<i32>::zeros(dim);
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            for o in plane.iter_mut() {
                let s = tables[c].decode(&mut dec)?;
                if s < i32::MIN as i64 || s > i32::MAX as i64 {
                    return Err(Error::corrupt("decoded symbol out of range"));
                }
                *o = s as i32;
            }
        }
        if dec.consumed() != data.len() {
            return Err(Error::corrupt(format!(
                "payload length mismatch: consumed {} of {} bytes",
                dec.consumed(),
                data.len()
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn roundtrip_symbols(seed: u64, n: usize) {
        let mut rng = StdRng::seed_from_u64(seed);
        // Random valid table: 4..=20 symbols with random positive freqs.
        let k = rng.random_range(4..=20usize);
        let mut freqs: Vec<u32> = (0..k).map(|_| rng.random_range(1..5000u32)).collect();
        let sum: u32 = freqs.iter().sum();
        // Scale to total 65536 while keeping every freq >= 1.
        let mut cum = vec![0u32];
        let mut acc = 0u64;
        for (i, f) in freqs.iter_mut().enumerate() {
            acc += *f as u64;
            let target = (acc * (TOTAL as u64 - k as u64) / sum as u64) as u32 + i as u32 + 1;
            cum.push(target);
        }
        *cum.last_mut().unwrap() = TOTAL;
        let symbols: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(cum[s], cum[s + 1] - cum[s], TOTAL);
        }
        let data = enc.finish();
        let mut dec = RangeDecoder::new(&data);
        for &s in &symbols {
            let v = dec.decode_freq(TOTAL);
            let j = cum.partition_point(|&c| c <= v) - 1;
            assert_eq!(j, s, "symbol mismatch");
            dec.decode_update(cum[j], cum[j + 1] - cum[j]);
        }
        assert_eq!(dec.consumed(), data.len(), "byte count asymmetric");
    }

    #[test]
    fn range_coder_roundtrips_random_tables() {
        for seed in 0..30 {
            roundtrip_symbols(seed, 500);
        }
    }

    #[test]
    fn range_coder_is_deterministic() {
        let run = || {
            let mut enc = RangeEncoder::new();
            for i in 0..200u32 {
                let c = (i * 37) % (TOTAL - 100);
                enc.encode(c, 100, TOTAL);
            }
            enc.finish()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bits_roundtrip() {
        let mut rng = StdRng::seed_from_u64(3);
        let bits: Vec<bool> = (0..4000).map(|_| rng.random_bool(0.3)).collect();
        let mut enc = RangeEncoder::new();
        for &b in &bits {
            enc.encode_bit(b);
        }
        let data = enc.finish();
        // Uniform bits cost ~1 bit each.
        assert!(data.len() <= 4000 / 8 + 8);
        let mut dec = RangeDecoder::new(&data);
        for &b in &bits {
            assert_eq!(dec.decode_bit(), b);
        }
        assert_eq!(dec.consumed(), data.len());
    }

    #[test]
    fn exp_golomb_roundtrips() {
        let mut enc = RangeEncoder::new();
        let vals: Vec<u64> = (0..120).chain([1000, 65535, 1 << 30]).collect();
        for &v in &vals {
            encode_exp_golomb(&mut enc, v);
        }
        let data = enc.finish();
        let mut dec = RangeDecoder::new(&data);
        for &v in &vals {
            assert_eq!(decode_exp_golomb(&mut dec).unwrap(), v);
        }
    }

    #[test]
    fn sigma_grid_is_monotone_and_bounded() {
        let mut prev = 0.0;
        for i in 0..SIGMA_LEVELS {
            let s = sigma_value(i as u8);
            assert!(s > prev);
            prev = s;
        }
        assert!((sigma_value(0) - SIGMA_MIN).abs() < 1e-12);
        assert!((sigma_value(63) - SIGMA_MAX).abs() < 1e-9);
        // Quantize then reconstruct lands on the nearest grid point.
        for &s in &[0.11, 0.5, 1.0, 3.7, 42.0, 256.0] {
            let idx = quantize_sigma(s);
            let q = sigma_value(idx);
            let ratio: f64 = (q / s).max(s / q);
            // Grid step is (256/0.11)^(1/63) ~ 1.13.
            assert!(ratio < 1.14, "sigma {s} -> {q}");
        }
    }

    #[test]
    fn gaussian_grid_roundtrips_with_outliers() {
        let mut rng = StdRng::seed_from_u64(17);
        let dim = (4, 9, 11);
        let mut sym = Array3::<i32>::zeros(dim);
        let mu = Array3::from_shape_fn(dim, |_| rng.random_range(-3.0f32..3.0));
        let sigma = Array3::from_shape_fn(dim, |_| rng.random_range(0.11f32..6.0));
        for ((s, m), sg) in sym.iter_mut().zip(mu.iter()).zip(sigma.iter()) {
            // Mostly near the mean, occasionally far outside the window.
            *s = if rng.random_bool(0.02) {
                rng.random_range(-5000..5000)
            } else {
                (*m + rng.random_range(-2.0..2.0) * *sg).round() as i32
            };
        }
        let mut coder = GaussianCoder::new();
        let data = coder.encode_grid(&sym.view(), &mu.view(), &sigma.view());
        let mut coder2 = GaussianCoder::new();
        let back = coder2.decode_grid(&data, &mu.view(), &sigma.view()).unwrap();
        assert_eq!(back, sym);
    }

    #[test]
    fn empty_grid_is_zero_bytes() {
        let dim = (0, 4, 4);
        let sym = Array3::<i32>::zeros(dim);
        let mu = Array3::<f32>::zeros(dim);
        let sigma = Array3::<f32>::from_elem(dim, 1.0);
        let mut coder = GaussianCoder::new();
        let data = coder.encode_grid(&sym.view(), &mu.view(), &sigma.view());
        assert!(data.is_empty());
        let back = coder.decode_grid(&data, &mu.view(), &sigma.view()).unwrap();
        assert_eq!(back.dim(), dim);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let mut rng = StdRng::seed_from_u64(23);
        let dim = (2, 16, 16);
        let mu = Array3::<f32>::zeros(dim);
        let sigma = Array3::<f32>::from_elem(dim, 2.0);
        let sym = Array3::from_shape_fn(dim, |_| rng.random_range(-4..4));
        let mut coder = GaussianCoder::new();
        let data = coder.encode_grid(&sym.view(), &mu.view(), &sigma.view());
        let cut = &data[..data.len() - 3];
        let err = coder.decode_grid(cut, &mu.view(), &sigma.view());
        assert!(err.is_err(), "truncation must not decode cleanly");
    }

    #[test]
    fn coder_rate_tracks_model_bits() {
        // Actual bytes stay within 2 percent + 32 bits of the ideal rate
        // computed from the same quantized parameters.
        let mut rng = StdRng::seed_from_u64(5);
        let dim = (8, 24, 24);
        let mu = Array3::from_shape_fn(dim, |_| rng.random_range(-2.0f32..2.0));
        let sigma = Array3::from_shape_fn(dim, |_| rng.random_range(0.2f32..6.0));
        let mut sym = Array3::<i32>::zeros(dim);
        let mut ideal = 0.0f64;
        for ((s, m), sg) in sym.iter_mut().zip(mu.iter()).zip(sigma.iter()) {
            // Box-Muller sample from the model itself.
            let u1: f64 = rng.random_range(1e-9..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *s = (*m as f64 + z * *sg as f64).round() as i32;
            ideal += gaussian_symbol_bits(*s as i64, *m as f64, *sg as f64);
        }
        let mut coder = GaussianCoder::new();
        let data = coder.encode_grid(&sym.view(), &mu.view(), &sigma.view());
        let actual_bits = data.len() as f64 * 8.0;
        assert!(
            actual_bits <= ideal * 1.02 + 32.0,
            "actual {actual_bits} ideal {ideal}"
        );
        assert!(actual_bits + 32.0 >= ideal * 0.98, "suspiciously small");
    }

    fn tiny_factorized(channels: usize, seed: u64) -> FactorizedParams {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut f = |_: usize| rng.random_range(-0.8f64..0.8);
        FactorizedParams {
            w1: (0..channels).map(|_| [f(0) + 0.5, f(0) + 0.5, f(0) + 0.5]).collect(),
            b1: (0..channels).map(|_| [f(0), f(0), f(0)]).collect(),
            a1: (0..channels).map(|_| [f(0), f(0), f(0)]).collect(),
            w2: (0..channels)
                .map(|_| [[f(0), f(0), f(0)], [f(0), f(0), f(0)], [f(0), f(0), f(0)]])
                .collect(),
            b2: (0..channels).map(|_| [f(0), f(0), f(0)]).collect(),
            a2: (0..channels).map(|_| [f(0), f(0), f(0)]).collect(),
            w3: (0..channels).map(|_| [f(0), f(0), f(0)]).collect(),
            b3: (0..channels).map(|_| f(0)).collect(),
        }
    }

    #[test]
    fn factorized_cdf_is_monotone_and_normalizable() {
        let p = tiny_factorized(3, 9);
        for c in 0..3 {
            let mut prev = -1.0;
            for i in -200..=200 {
                let x = i as f64 * 0.25;
                let v = p.cdf(c, x);
                assert!(v >= prev, "CDF must be non-decreasing");
                if prev > 1e-9 && v < 1.0 - 1e-9 {
                    // Away from float saturation the increase is strict.
                    assert!(v > prev, "CDF flat at x = {x} channel {c}");
                }
                assert!((0.0..=1.0).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn factorized_grid_roundtrips() {
        let p = tiny_factorized(3, 11);
        let mut rng = StdRng::seed_from_u64(29);
        let dim = (3, 12, 10);
        let sym = Array3::from_shape_fn(dim, |_| {
            if rng.random_bool(0.02) {
                rng.random_range(-900..900)
            } else {
                rng.random_range(-6..6)
            }
        });
        let data = p.encode_grid(&sym.view());
        let back = p.decode_grid(&data, dim).unwrap();
        assert_eq!(back, sym);
    }

    #[test]
    fn factorized_tables_are_deterministic() {
        let p = tiny_factorized(2, 13);
        let t1 = p.build_table(1);
        let t2 = p.build_table(1);
        assert_eq!(t1.lo, t2.lo);
        assert_eq!(t1.cum, t2.cum);
    }

    #[test]
    fn integer_cdf_reserves_escape_and_floor_frequencies() {
        // A brutally peaked distribution still leaves freq >= 1 everywhere.
        let edges: Vec<f64> = (0..=9)
            .map(|j| if j < 5 { 0.0 } else { 1.0 })
            .collect();
        let t = IntegerCdf::from_edges(-4, &edges);
        for k in 0..t.window_len() {
            assert!(t.cum[k + 1] > t.cum[k], "zero frequency at {k}");
        }
        assert_eq!(*t.cum.last().unwrap(), TOTAL);
        // Escape slot has exactly frequency 1.
        let n = t.window_len();
        assert_eq!(t.cum[n + 1] - t.cum[n], 1);
    }
}
