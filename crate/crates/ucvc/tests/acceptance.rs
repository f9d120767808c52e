//! Release acceptance suite. One test per gate; each prints the measured
//! evidence and the per-test result line is the verdict. The training gate
//! (criterion 6) runs a real 2000-step session and takesatop half an hour on
//! one core; every other gate finishes in seconds.

use std::time::Instant;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ucvc::autodiff::{check_gradients, Graph, NodeId};
use ucvc::codec::{decode_sequence, encode_sequence, CodingMode};
use ucvc::dmath;
use ucvc::entropy::{gaussian_symbol_bits, GaussianCoder};
use ucvc::evaluation::{bd_rate, fit_log_rate, select_frame_type, RdPoint};
use ucvc::kernels::{avgpool2_fwd, warp_fwd};
use ucvc::model::{load_checkpoint, ModelConfig, VideoModel};
use ucvc::scheduler::{encode_order, plan_sequence, validate_plan, FrameType, GopStructure};
use ucvc::training::{
    build_cascaded_sample, build_single_sample, sample_loss, synthetic_clips, train,
    DistortionMetric, TrainConfig, TrainingSample,
};
use ucvc::transforms::QuantMode;

fn four_lambda_tiny() -> ModelConfig {
    ModelConfig {
        lambdas: vec![85.0, 210.0, 425.0, 840.0],
        ..ModelConfig::tiny()
    }
}

fn assert_bit_exact(a: &Array3<f32>, b: &Array3<f32>, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
    for (p, q) in a.iter().zip(b.iter()) {
        assert_eq!(p.to_bits(), q.to_bits(), "{what}: pixel mismatch");
    }
}

// ---------------------------------------------------------------------------
// 1. Container round trip: decoder output is bit-exact against the encoder's
//    reconstructions for every coding mode, within the wall-clock budget.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_bitstream_roundtrip_bit_exact() {
    let model = VideoModel::<f32>::new(ModelConfig::tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let modes = [
        CodingMode::LowDelayP,
        CodingMode::HierarchicalB,
        CodingMode::Optimal,
    ];

    let start = Instant::now();
    let mut total_bits = 0usize;
    for i in 0..20 {
        let h = rng.random_range(64..=192usize);
        let w = rng.random_range(64..=192usize);
        let n = rng.random_range(9..=33usize);
        let clip = synthetic_clips::<f32>(1, n, h, w, 0x5EED + i as u64)
            .pop()
            .unwrap();
        let li = i % ModelConfig::tiny().lambdas.len();
        for mode in modes {
            let enc = encode_sequence(&model, &clip, 8, mode, li).unwrap();
            let dec = decode_sequence::<f32>(&model, &enc.container).unwrap();
            assert_eq!(dec.frames.len(), n, "frame count after decode");
            assert_eq!(dec.structure, enc.structure, "structure flag");
            assert_eq!(dec.gop_size, 8);
            assert_eq!(dec.lambda_index, li);
            for (t, (df, ef)) in dec.frames.iter().zip(enc.recons.iter()).enumerate() {
                assert_bit_exact(df, ef, &format!("seq {i} {mode:?} frame {t}"));
            }
            total_bits += enc.total_bits();
        }
        println!("  seq {i:2}: {w}x{h}, {n} frames ok in all modes");
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("criterion 1: 20 sequences x 3 modes bit-exact, {total_bits} coded bits, {elapsed:.1}s");
    assert!(elapsed < 300.0, "round trips took {elapsed:.1}s, budget 300s");
}

// ---------------------------------------------------------------------------
// 2. Entropy coder consistency: coded size tracks the analytic rate on big
//    grids and the round trip is lossless, escape path included.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_entropy_rate_and_losslessness() {
    let mut coder = GaussianCoder::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let dim = (4usize, 64usize, 64usize);
    let symbols = dim.0 * dim.1 * dim.2;
    assert!(symbols >= 10_000);

    let mut worst_gap = 0.0f64;
    let mut worst_cont_gap = 0.0f64;
    for g in 0..50 {
        let mut mu = Array3::<f64>::zeros(dim);
        let mut sigma = Array3::<f64>::zeros(dim);
        let mut sym = Array3::<i32>::zeros(dim);
        let mut expected = 0.0f64;
        let mut continuous = 0.0f64;
        for c in 0..dim.0 {
            for y in 0..dim.1 {
                for x in 0..dim.2 {
                    let m = rng.random_range(-3.0..3.0);
                    let s = rng.random_range(0.15..6.0);
                    // Box-Muller standard normal
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    let v = (m + s * z).round() as i32;
                    mu[(c, y, x)] = m;
                    sigma[(c, y, x)] = s;
                    sym[(c, y, x)] = v;
                    expected += gaussian_symbol_bits(v as i64, m, s);
                    let p = dmath::normal_interval_prob(
                        (v as f64 - 0.5 - m) / s,
                        (v as f64 + 0.5 - m) / s,
                    );
                    continuous += -dmath::det_log2(p.max(1e-12));
                }
            }
        }
        let data = coder.encode_grid(&sym.view(), &mu.view(), &sigma.view());
        let actual = (data.len() * 8) as f64;
        let gap = (actual - expected).abs();
        let cont_gap = (actual - continuous).abs();
        assert!(
            gap <= 0.02 * expected + 32.0,
            "grid {g}: actual {actual} vs analytic {expected} (gap {gap:.1})"
        );
        assert!(
            cont_gap <= 0.02 * continuous + 32.0,
            "grid {g}: actual {actual} vs continuous ideal {continuous} (gap {cont_gap:.1})"
        );
        worst_gap = worst_gap.max(gap / expected);
        worst_cont_gap = worst_cont_gap.max(cont_gap / continuous);
        let back = coder.decode_grid(&data, &mu.view(), &sigma.view()).unwrap();
        assert_eq!(back, sym, "grid {g} round trip");
    }
    println!(
        "criterion 2a: 50 grids of {symbols} symbols, worst gap {:.3}% vs table rate, {:.3}% vs continuous rate",
        100.0 * worst_gap,
        100.0 * worst_cont_gap
    );

    // Lossless round trip on 100 small grids, wide sigma so both the tiny
    // two-symbol window and the escape path get exercised.
    let sdim = (3usize, 20usize, 20usize);
    for g in 0..100 {
        let mut mu = Array3::<f64>::zeros(sdim);
        let mut sigma = Array3::<f64>::zeros(sdim);
        let mut sym = Array3::<i32>::zeros(sdim);
        for c in 0..sdim.0 {
            for y in 0..sdim.1 {
                for x in 0..sdim.2 {
                    let m = rng.random_range(-30.0..30.0);
                    let s = rng.random_range(0.05..40.0);
                    mu[(c, y, x)] = m;
                    sigma[(c, y, x)] = s;
                    // deliberately heavy tails relative to sigma
                    let spread = rng.random_range(0.0..4.0 * s + 8.0);
                    let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                    sym[(c, y, x)] = (m + sign * spread).round() as i32;
                }
            }
        }
        let data = coder.encode_grid(&sym.view(), &mu.view(), &sigma.view());
        let back = coder.decode_grid(&data, &mu.view(), &sigma.view()).unwrap();
        assert_eq!(back, sym, "small grid {g} round trip");
    }
    println!("criterion 2b: 100 random grids decode losslessly");
}

// ---------------------------------------------------------------------------
// 3. Scheduler: every (gop, structure, length) plan validates clean, and the
//    dyadic coding order matches the known layout.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_schedule_validity_and_dyadic_order() {
    let mut combos = 0usize;
    for gop in [2usize, 4, 8, 16, 32] {
        for structure in [GopStructure::LowDelayP, GopStructure::HierarchicalB] {
            for len in 1..=65usize {
                let plan = plan_sequence(len, gop, structure).unwrap();
                let errs = validate_plan(&plan, len, gop);
                assert!(
                    errs.is_empty(),
                    "gop {gop} {structure:?} len {len}: {errs:?}"
                );
                combos += 1;
            }
        }
    }
    let plan = plan_sequence(9, 8, GopStructure::HierarchicalB).unwrap();
    let order = encode_order(&plan);
    assert_eq!(order, vec![0, 8, 4, 2, 1, 3, 6, 5, 7]);
    println!("criterion 3: {combos} plans valid, gop-8 coding order {order:?}");
}

// ---------------------------------------------------------------------------
// 4. Warp oracles: identity at zero flow, index-shift equality for integer
//    flow, and scale consistency between pyramid levels.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_warp_identity_shift_and_level_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let (c, h, w) = (3usize, 17usize, 23usize);
    let mut src = Array3::<f32>::zeros((c, h, w));
    src.mapv_inplace(|_| rng.random_range(-1.0..1.0));

    // zero flow is the identity, bit for bit
    let zero = Array3::<f32>::zeros((2, h, w));
    let out = warp_fwd(&src.view(), &zero.view());
    assert_bit_exact(&out, &src, "zero-flow warp");

    // integer shift equals direct clamped indexing
    let (dx, dy) = (2i64, -1i64);
    let mut flow = Array3::<f32>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            flow[(0, y, x)] = dx as f32;
            flow[(1, y, x)] = dy as f32;
        }
    }
    let out = warp_fwd(&src.view(), &flow.view());
    let mut max_err = 0.0f32;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                max_err = max_err.max((out[(ci, y, x)] - src[(ci, sy, sx)]).abs());
            }
        }
    }
    assert!(max_err < 1e-6, "integer shift max err {max_err}");

    // halving the resolution and the flow shifts the same content: compare
    // away from the clamped border where pooling and clamping commute
    let (h2, w2) = (32usize, 32usize);
    let mut src2 = Array3::<f32>::zeros((c, h2, w2));
    src2.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let (fdx, fdy) = (2i64, -4i64);
    let mut shifted = Array3::<f32>::zeros((c, h2, w2));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let sy = (y as i64 + fdy).clamp(0, h2 as i64 - 1) as usize;
                let sx = (x as i64 + fdx).clamp(0, w2 as i64 - 1) as usize;
                shifted[(ci, y, x)] = src2[(ci, sy, sx)];
            }
        }
    }
    let pooled_shifted = avgpool2_fwd(&shifted.view());
    let pooled_src = avgpool2_fwd(&src2.view());
    let mut half_flow = Array3::<f32>::zeros((2, h2 / 2, w2 / 2));
    for y in 0..h2 / 2 {
        for x in 0..w2 / 2 {
            half_flow[(0, y, x)] = (fdx / 2) as f32;
            half_flow[(1, y, x)] = (fdy / 2) as f32;
        }
    }
    let warped_half = warp_fwd(&pooled_src.view(), &half_flow.view());
    let mut max_err = 0.0f32;
    for ci in 0..c {
        for y in 0..h2 / 2 {
            for x in 0..w2 / 2 {
                let full_y0 = 2 * y as i64 + fdy;
                let full_x1 = 2 * x as i64 + 1 + fdx;
                if full_y0 < 0 || full_x1 >= w2 as i64 {
                    continue; // clamp region differs between orders
                }
                max_err =
                    max_err.max((warped_half[(ci, y, x)] - pooled_shifted[(ci, y, x)]).abs());
            }
        }
    }
    assert!(max_err < 1e-6, "level scaling interior max err {max_err}");
    println!("criterion 4: identity exact, shift and level-scaling errs < 1e-6");
}

// ---------------------------------------------------------------------------
// 5. Analytic gradients match central finite differences at 1e-3 relative
//    tolerance: warp and rate nodes directly, the conv transforms through
//    the full rd loss on a tiny f64 model.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_gradients_match_finite_differences() {
    // warp wrt source and flow
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let src = ArrayD::<f64>::from_shape_fn(ndarray::IxDyn(&[2, 6, 7]), |_| {
        rng.random_range(-1.0..1.0)
    });
    let flow = ArrayD::<f64>::from_shape_fn(ndarray::IxDyn(&[2, 6, 7]), |_| {
        rng.random_range(-0.8..0.8)
    });
    let rep = check_gradients(
        &[src, flow],
        &|g, ids| {
            let wrp = g.warp(ids[0], ids[1]);
            let sq = g.mul(wrp, wrp);
            g.sum_all(sq)
        },
        1e-3,
        8,
        1,
    );
    assert!(
        rep.max_rel_err < 1e-3 && rep.checked > 0,
        "warp: rel {} over {} coords",
        rep.max_rel_err,
        rep.checked
    );
    let warp_err = rep.max_rel_err;

    // rate bits wrt latent, mean, and scale
    let t = ArrayD::<f64>::from_shape_fn(ndarray::IxDyn(&[1, 4, 5]), |_| {
        rng.random_range(-4.0..4.0)
    });
    let mu = ArrayD::<f64>::from_shape_fn(ndarray::IxDyn(&[1, 4, 5]), |_| {
        rng.random_range(-2.0..2.0)
    });
    let sg = ArrayD::<f64>::from_shape_fn(ndarray::IxDyn(&[1, 4, 5]), |_| {
        rng.random_range(0.4..3.0)
    });
    let rep = check_gradients(
        &[t, mu, sg],
        &|g, ids| {
            let bits = g.gaussian_bits(ids[0], ids[1], ids[2]);
            g.sum_all(bits)
        },
        1e-3,
        8,
        2,
    );
    assert!(
        rep.max_rel_err < 1e-3 && rep.checked > 0,
        "rate bits: rel {} over {} coords",
        rep.max_rel_err,
        rep.checked
    );
    let bits_err = rep.max_rel_err;

    // transform weights through the complete loss; the two highest-gradient
    // coordinates per tensor keep the comparison well conditioned
    let model = VideoModel::<f64>::new(ModelConfig::tiny(), 11).unwrap();
    let clip = synthetic_clips::<f64>(1, 3, 16, 16, 21).pop().unwrap();
    let sample = build_single_sample(clip).unwrap();
    let build = |g: &mut Graph<f64>, m: &VideoModel<f64>| -> NodeId {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        sample_loss(m, g, &sample, 0, DistortionMetric::Mse, QuantMode::Passthrough, &mut r)
            .unwrap()
            .node
    };
    let mut g = Graph::<f64>::new();
    let node = build(&mut g, &model);
    let pg = g.backward(node).into_param_grads(&g);

    let mut model = model;
    let h = 1e-3;
    let mut worst = 0.0f64;
    for name in [
        "img.an.d0.w",
        "img.sy.u3.w",
        "img.hy.a1.w",
        "img.hy.s2.w",
        "ctx.an.d0.w",
        "mot.an.d0.w",
    ] {
        let pid = model.ps.id(name).unwrap_or_else(|| panic!("missing {name}"));
        let grad = pg.get(&pid).unwrap_or_else(|| panic!("no gradient for {name}"));
        let gs = grad.as_slice().unwrap();
        let mut coords: Vec<usize> = (0..gs.len()).collect();
        coords.sort_by(|&a, &b| gs[b].abs().partial_cmp(&gs[a].abs()).unwrap());
        for &k in &coords[..2] {
            let an = gs[k];
            let orig = model.ps.get(pid).clone();
            let mut p = orig.clone();
            p.as_slice_mut().unwrap()[k] += h;
            model.ps.set(pid, p);
            let mut gp = Graph::<f64>::new();
            let np = build(&mut gp, &model);
            let fp = gp.scalar(np);
            let mut p = orig.clone();
            p.as_slice_mut().unwrap()[k] -= h;
            model.ps.set(pid, p);
            let mut gm = Graph::<f64>::new();
            let nm = build(&mut gm, &model);
            let fm = gm.scalar(nm);
            model.ps.set(pid, orig);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-3, "{name}[{k}]: fd {fd} vs analytic {an} (rel {rel:.2e})");
            worst = worst.max(rel);
        }
    }
    println!(
        "criterion 5: warp rel {warp_err:.2e}, rate rel {bits_err:.2e}, transform weights rel {worst:.2e}"
    );
}

// ---------------------------------------------------------------------------
// 6. Training smoke: 2000 steps on 16 synthetic clips drops the smoothed rd
//    loss by at least 20%, and the single resulting checkpoint codes both
//    structures with rate and quality ordered by lambda.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_training_improves_and_checkpoint_codes_both_modes() {
    let mut model = VideoModel::<f32>::new(four_lambda_tiny(), 1).unwrap();
    let clips = synthetic_clips::<f32>(16, 7, 64, 64, 77);
    let cfg = TrainConfig {
        log_every: 50,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.steps_single + cfg.steps_cascaded, 2000);
    assert_eq!(cfg.batch, 8);
    assert_eq!(cfg.crop, 64);

    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::<u8>::new();
    let start = Instant::now();
    let report = train(&mut model, &clips, &cfg, &mut metrics, Some(dir.path())).unwrap();
    let mins = start.elapsed().as_secs_f64() / 60.0;
    println!(
        "criterion 6: {} steps in {mins:.1} min, smoothed loss {:.2} -> {:.2} ({:+.1}%)",
        report.steps,
        report.first_window_mean,
        report.last_window_mean,
        100.0 * (report.last_window_mean / report.first_window_mean - 1.0)
    );
    assert_eq!(report.steps, 2000);
    assert!(
        report.last_window_mean <= 0.8 * report.first_window_mean,
        "smoothed loss fell only to {:.3} of start",
        report.last_window_mean / report.first_window_mean
    );

    // one checkpoint, both coding structures
    let (trained, _) = load_checkpoint::<f32>(&dir.path().join("final.uckp")).unwrap();
    for mode in [CodingMode::LowDelayP, CodingMode::HierarchicalB] {
        let enc = encode_sequence(&trained, &clips[0], 4, mode, 1).unwrap();
        let dec = decode_sequence::<f32>(&trained, &enc.container).unwrap();
        for (df, ef) in dec.frames.iter().zip(enc.recons.iter()) {
            assert_bit_exact(df, ef, &format!("trained {mode:?}"));
        }
        println!("  trained checkpoint {mode:?}: {} bits", enc.total_bits());
    }

    // rate and quality must track lambda
    let mut bpps = Vec::new();
    let mut psnrs = Vec::new();
    for li in 0..4 {
        let mut bpp = 0.0f64;
        let mut mse = 0.0f64;
        for clip in &clips[..6] {
            let enc = encode_sequence(&trained, clip, 4, CodingMode::HierarchicalB, li).unwrap();
            bpp += enc.mean_bpp(64, 64);
            mse += enc.mean_mse();
        }
        bpp /= 6.0;
        mse /= 6.0;
        let psnr = 10.0 * (1.0 / mse).log10();
        println!("  lambda[{li}] = {}: {bpp:.4} bpp, {psnr:.2} dB", trained.cfg.lambdas[li]);
        bpps.push(bpp);
        psnrs.push(psnr);
    }
    let inv_bpp = bpps.windows(2).filter(|w| w[1] < w[0]).count();
    let inv_psnr = psnrs.windows(2).filter(|w| w[1] < w[0]).count();
    println!("  adjacent inversions: bpp {inv_bpp}, psnr {inv_psnr}");
    assert!(inv_bpp <= 1, "bpp not increasing in lambda: {bpps:?}");
    assert!(inv_psnr <= 1, "psnr not increasing in lambda: {psnrs:?}");
}

// ---------------------------------------------------------------------------
// 7. BD-rate identities: zero for identical curves, +100% for doubled rate,
//    trapezoidal agreement on random curves, antisymmetry under swap.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_bd_rate_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);

    let base: Vec<RdPoint> = (0..5)
        .map(|i| RdPoint {
            rate: 0.1 * 1.8f64.powi(i),
            quality: 30.0 + 2.0 * i as f64,
        })
        .collect();
    let same = bd_rate(&base, &base).unwrap();
    assert_eq!(same.percent, 0.0, "identical curves");

    let doubled: Vec<RdPoint> = base
        .iter()
        .map(|p| RdPoint { rate: 2.0 * p.rate, quality: p.quality })
        .collect();
    let twice = bd_rate(&base, &doubled).unwrap();
    assert!(
        (twice.percent - 100.0).abs() <= 1e-6,
        "doubled rate gave {:.9}%",
        twice.percent
    );

    let mut worst_oracle = 0.0f64;
    let mut worst_sym = 0.0f64;
    for _ in 0..100 {
        let npts = rng.random_range(4..=6usize);
        let make = |rng: &mut ChaCha8Rng| -> Vec<RdPoint> {
            let mut q = rng.random_range(28.0..34.0);
            let mut lr = rng.random_range(-1.5..0.0);
            (0..npts)
                .map(|_| {
                    let p = RdPoint { rate: 10f64.powf(lr), quality: q };
                    q += rng.random_range(0.5..2.5);
                    lr += rng.random_range(0.05..0.3);
                    p
                })
                .collect()
        };
        let a = make(&mut rng);
        let b = make(&mut rng);
        let bd = bd_rate(&a, &b).unwrap();

        // fine trapezoid over the same fitted curves
        let fa = fit_log_rate(&a).unwrap();
        let fb = fit_log_rate(&b).unwrap();
        let (lo, hi) = bd.overlap;
        let n = 2000usize;
        let mut integral = 0.0f64;
        for k in 0..=n {
            let q = lo + (hi - lo) * k as f64 / n as f64;
            let d = fb.eval(q) - fa.eval(q);
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            integral += w * d;
        }
        integral *= (hi - lo) / n as f64;
        let oracle = (10f64.powf(integral / (hi - lo)) - 1.0) * 100.0;
        worst_oracle = worst_oracle.max((bd.percent - oracle).abs());
        assert!(
            (bd.percent - oracle).abs() <= 0.1,
            "bd {:.4}% vs trapezoid {oracle:.4}%",
            bd.percent
        );

        let back = bd_rate(&b, &a).unwrap();
        let prod = (1.0 + bd.percent / 100.0) * (1.0 + back.percent / 100.0);
        worst_sym = worst_sym.max((prod - 1.0).abs());
        assert!(
            (prod - 1.0).abs() <= 1e-6,
            "antisymmetry violated: {} and {}",
            bd.percent,
            back.percent
        );
    }
    println!(
        "criterion 7: identities exact, 100 random curves within {worst_oracle:.2e}% of trapezoid, antisymmetry {worst_sym:.2e}"
    );
}

// ---------------------------------------------------------------------------
// 8. Per-sequence structure selection never loses to either fixed policy on
//    a corpus where the better structure varies by sequence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_structure_selection_dominates_fixed_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let qualities = [30.0, 32.0, 34.0, 36.0];
    let mut agg_b = 0.0f64;
    let mut agg_opt = 0.0f64;
    let seqs = 8usize;
    for i in 0..seqs {
        let a = rng.random_range(-2.0..-0.5);
        let b = rng.random_range(0.05..0.12);
        let p_pts: Vec<RdPoint> = qualities
            .iter()
            .map(|&q| RdPoint { rate: 10f64.powf(a + b * q), quality: q })
            .collect();
        let factor = if i % 2 == 0 { 0.82 } else { 1.18 };
        let b_pts: Vec<RdPoint> = p_pts
            .iter()
            .map(|p| RdPoint {
                rate: p.rate * factor * (1.0 + rng.random_range(-0.01..0.01)),
                quality: p.quality,
            })
            .collect();

        let (structure, bd) = select_frame_type(&p_pts, &b_pts);
        let expected = if factor < 1.0 {
            GopStructure::HierarchicalB
        } else {
            GopStructure::LowDelayP
        };
        assert_eq!(structure, expected, "seq {i} picked the wrong structure");

        let vs_b = bd_rate(&p_pts, &b_pts).unwrap().percent;
        let chosen = if structure == GopStructure::HierarchicalB { &b_pts } else { &p_pts };
        let vs_opt = bd_rate(&p_pts, chosen).unwrap().percent;
        agg_b += vs_b;
        agg_opt += vs_opt;
        println!(
            "  seq {i}: factor {factor:.2}, picked {structure:?} (bd {:+.2}%)",
            bd.map(|r| r.percent).unwrap_or(0.0)
        );
    }
    agg_b /= seqs as f64;
    agg_opt /= seqs as f64;
    println!(
        "criterion 8: aggregate vs always-P anchor: always-B {agg_b:+.2}%, selected {agg_opt:+.2}%"
    );
    assert!(agg_opt <= 1e-9, "selection lost to always-P: {agg_opt:+.3}%");
    assert!(agg_opt <= agg_b + 1e-9, "selection lost to always-B");
}

// ---------------------------------------------------------------------------
// 9. Loss accounting: every per-frame breakdown satisfies
//    total = bits/pixel + lambda_eff * distortion with the intra multiplier,
//    and the breakdowns agree with the differentiated scalar.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_loss_accounting_identity() {
    let model = VideoModel::<f64>::new(four_lambda_tiny(), 3).unwrap();
    let clip = synthetic_clips::<f64>(1, 7, 32, 32, 9).pop().unwrap();
    let samples: Vec<(&str, TrainingSample<f64>)> = vec![
        ("single", build_single_sample(clip[..3].to_vec()).unwrap()),
        ("cascaded", build_cascaded_sample(clip.clone()).unwrap()),
    ];
    let mut worst_id = 0.0f64;
    for (label, sample) in &samples {
        for level in [0usize, 3] {
            let mut g = Graph::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let loss = sample_loss(
                &model,
                &mut g,
                sample,
                level,
                DistortionMetric::Mse,
                QuantMode::Train,
                &mut rng,
            )
            .unwrap();
            let lambda = model.cfg.lambdas[level];
            for (step, frame) in sample.steps.iter().zip(loss.frames.iter()) {
                let expect_lam = if step.ftype == FrameType::I { 5.0 * lambda } else { lambda };
                assert_eq!(
                    frame.lambda_effective, expect_lam,
                    "{label} level {level} frame {} lambda_eff",
                    step.frame
                );
                let recon = frame.rate_bits_per_pixel + frame.lambda_effective * frame.distortion;
                let err = (frame.total - recon).abs();
                worst_id = worst_id.max(err);
                assert!(
                    err <= 1e-6,
                    "{label} level {level} frame {}: total {} vs {}",
                    step.frame,
                    frame.total,
                    recon
                );
            }
            let scalar = g.scalar(loss.node);
            let mean = loss.mean_total();
            assert!(
                (scalar - mean).abs() <= 1e-9 * mean.abs().max(1.0),
                "{label} level {level}: node {scalar} vs breakdown mean {mean}"
            );
        }
    }
    println!("criterion 9: accounting identity holds to {worst_id:.2e} across samples and levels");
}
