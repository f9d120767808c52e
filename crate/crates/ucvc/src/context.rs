//! Temporal context mining: both reference features are motion-compensated
//! with their decoded flows and fused into a three-scale context pyramid
//! that conditions the contextual codec end to end.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::kernels::Scalar;
use crate::nn::{Conv2d, ParamSet};
use crate::transforms::ContextNodes;
use crate::{Error, Result};

/// Halve a flow field's resolution; offsets shrink with the grid.
pub fn downsample_flow<F: Scalar>(g: &mut Graph<F>, flow: NodeId) -> NodeId {
    let p = g.avgpool2(flow);
    g.scale_const(p, 0.5)
}

/// Per-scale fusion of the two warped reference features.
#[derive(Clone, Debug)]
pub struct ContextMiner {
    fuse: [Conv2d; 3],
}

impl ContextMiner {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        let fuse = [
            Conv2d::new(ps, rng, &format!("{name}.f0"), 2 * ch, ch, 1),
            Conv2d::new(ps, rng, &format!("{name}.f1"), 2 * ch, ch, 1),
            Conv2d::new(ps, rng, &format!("{name}.f2"), 2 * ch, ch, 1),
        ];
        ContextMiner { fuse }
    }

    /// Warp + fuse at full, half, and quarter resolution. Both encoder and
    /// decoder call this with identical decoded inputs, so the resulting
    /// contexts are bit-identical on the two sides.
    pub fn mine<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        feat1: NodeId,
        feat2: NodeId,
        flow1: NodeId,
        flow2: NodeId,
        train: bool,
    ) -> Result<ContextNodes> {
        let fs = g.value(feat1).shape().to_vec();
        if fs != g.value(feat2).shape() {
            return Err(Error::shape(
                "reference features",
                format!("{fs:?}"),
                format!("{:?}", g.value(feat2).shape()),
            ));
        }
        for fl in [flow1, flow2] {
            let s = g.value(fl).shape();
            if s.len() != 3 || s[0] != 2 || s[1] != fs[1] || s[2] != fs[2] {
                return Err(Error::shape(
                    "flow field",
                    format!("(2, {}, {})", fs[1], fs[2]),
                    format!("{s:?}"),
                ));
            }
        }
        if fs[1] % 4 != 0 || fs[2] % 4 != 0 {
            return Err(Error::shape(
                "feature dims",
                "multiples of 4",
                format!("{}x{}", fs[1], fs[2]),
            ));
        }

        let mut f1 = feat1;
        let mut f2 = feat2;
        let mut m1 = flow1;
        let mut m2 = flow2;
        let mut levels = Vec::with_capacity(3);
        for l in 0..3 {
            if l > 0 {
                f1 = g.avgpool2(f1);
                f2 = g.avgpool2(f2);
                m1 = downsample_flow(g, m1);
                m2 = downsample_flow(g, m2);
            }
            let w1 = g.warp(f1, m1);
            let w2 = g.warp(f2, m2);
            let cat = g.concat(&[w1, w2]);
            let c = self.fuse[l].apply(ps, g, cat, train);
            levels.push(g.silu(c));
        }
        Ok(ContextNodes {
            c0: levels[0],
            c1: levels[1],
            c2: levels[2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_arr(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(lo..hi))
    }

    #[test]
    fn context_pyramid_shapes() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = 6;
        let cm = ContextMiner::new(&mut ps, &mut rng, "ctx", ch);
        let mut g = Graph::<f64>::new();
        let f1 = g.leaf(rand_arr(&mut rng, &[ch, 32, 48], -0.5, 0.5), false);
        let f2 = g.leaf(rand_arr(&mut rng, &[ch, 32, 48], -0.5, 0.5), false);
        let m1 = g.leaf(rand_arr(&mut rng, &[2, 32, 48], -0.3, 0.3), false);
        let m2 = g.leaf(rand_arr(&mut rng, &[2, 32, 48], -0.3, 0.3), false);
        let ctx = cm.mine(&ps, &mut g, f1, f2, m1, m2, false).unwrap();
        assert_eq!(g.value(ctx.c0).shape(), &[ch, 32, 48]);
        assert_eq!(g.value(ctx.c1).shape(), &[ch, 16, 24]);
        assert_eq!(g.value(ctx.c2).shape(), &[ch, 8, 12]);
    }

    #[test]
    fn flow_downsampling_halves_offsets() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(ArrayD::from_elem(IxDyn(&[2, 8, 8]), 2.0), false);
        let d = downsample_flow(&mut g, f);
        assert_eq!(g.value(d).shape(), &[2, 4, 4]);
        for &v in g.value(d).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_flow_mining_matches_direct_fusion() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = 4;
        let cm = ContextMiner::new(&mut ps, &mut rng, "ctx", ch);
        let f1v = rand_arr(&mut rng, &[ch, 16, 16], -0.5, 0.5);
        let f2v = rand_arr(&mut rng, &[ch, 16, 16], -0.5, 0.5);

        let mut g = Graph::<f64>::new();
        let f1 = g.leaf(f1v.clone(), false);
        let f2 = g.leaf(f2v.clone(), false);
        let z1 = g.leaf(ArrayD::zeros(IxDyn(&[2, 16, 16])), false);
        let z2 = g.leaf(ArrayD::zeros(IxDyn(&[2, 16, 16])), false);
        let ctx = cm.mine(&ps, &mut g, f1, f2, z1, z2, false).unwrap();

        // identity warp means c0 is just fuse0 on the stacked features
        let cat = g.concat(&[f1, f2]);
        let direct = cm.fuse[0].apply(&ps, &mut g, cat, false);
        let direct = g.silu(direct);
        let a = g.value(ctx.c0);
        let b = g.value(direct);
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cm = ContextMiner::new(&mut ps, &mut rng, "ctx", 4);
        let mut g = Graph::<f64>::new();
        let f1 = g.leaf(ArrayD::zeros(IxDyn(&[4, 16, 16])), false);
        let f2 = g.leaf(ArrayD::zeros(IxDyn(&[4, 8, 8])), false);
        let m = g.leaf(ArrayD::zeros(IxDyn(&[2, 16, 16])), false);
        assert!(cm.mine(&ps, &mut g, f1, f2, m, m, false).is_err());
        let bad_flow = g.leaf(ArrayD::zeros(IxDyn(&[3, 16, 16])), false);
        assert!(cm.mine(&ps, &mut g, f1, f1, bad_flow, m, false).is_err());
    }

    #[test]
    fn mining_gradients_match_fd() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = 3;
        let cm = ContextMiner::new(&mut ps, &mut rng, "ctx", ch);
        // strictly positive flows keep FD away from bilinear kinks
        let inputs = vec![
            rand_arr(&mut rng, &[ch, 16, 16], -0.5, 0.5),
            rand_arr(&mut rng, &[ch, 16, 16], -0.5, 0.5),
            rand_arr(&mut rng, &[2, 16, 16], 0.05, 0.3),
            rand_arr(&mut rng, &[2, 16, 16], 0.05, 0.3),
        ];
        let rep = check_gradients(
            &inputs,
            &|g, ids| {
                let ctx = cm
                    .mine(&ps, g, ids[0], ids[1], ids[2], ids[3], false)
                    .unwrap();
                let a = g.mul(ctx.c0, ctx.c0);
                let a = g.sum_all(a);
                let b = g.mul(ctx.c1, ctx.c1);
                let b = g.sum_all(b);
                let c = g.mul(ctx.c2, ctx.c2);
                let c = g.sum_all(c);
                let ab = g.add(a, b);
                g.add(ab, c)
            },
            1e-3,
            5,
            77,
        );
        assert!(rep.checked >= 20);
        assert!(rep.max_rel_err < 1e-3, "rel err {}", rep.max_rel_err);
    }
}
