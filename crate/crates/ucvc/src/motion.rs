//! Pyramid optical-flow estimator. Coarse-to-fine refinement with
//! zero-initialized prediction heads, so the untrained estimator outputs
//! exactly zero motion and training starts from a stable identity warp.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::kernels::Scalar;
use crate::nn::{Conv2d, ParamSet};
use crate::{Error, Result};

/// Per-level refinement: two hidden convs plus a zero-init flow delta head.
#[derive(Clone, Debug)]
struct RefineBlock {
    c1: Conv2d,
    c2: Conv2d,
    head: Conv2d,
}

impl RefineBlock {
    fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        hidden: usize,
    ) -> Self {
        RefineBlock {
            // current frame + warped reference + upsampled flow
            c1: Conv2d::new(ps, rng, &format!("{name}.c1"), 3 + 3 + 2, hidden, 1),
            c2: Conv2d::new(ps, rng, &format!("{name}.c2"), hidden, hidden, 1),
            head: Conv2d::zeroed(ps, &format!("{name}.head"), hidden, 2, 1),
        }
    }

    fn apply<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        cur: NodeId,
        warped: NodeId,
        flow: NodeId,
        train: bool,
    ) -> NodeId {
        let inp = g.concat(&[cur, warped, flow]);
        let h = self.c1.apply(ps, g, inp, train);
        let h = g.silu(h);
        let h = self.c2.apply(ps, g, h, train);
        let h = g.silu(h);
        let d = self.head.apply(ps, g, h, train);
        g.add(flow, d)
    }
}

/// Estimates dense flow from `cur` to `ref`: warp(ref, flow) approximates
/// cur after training. Levels are dyadic; level 0 is full resolution.
#[derive(Clone, Debug)]
pub struct FlowEstimator {
    levels: usize,
    refine: Vec<RefineBlock>,
}

impl FlowEstimator {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        levels: usize,
        hidden: usize,
    ) -> Self {
        assert!(levels >= 1);
        let refine = (0..levels)
            .map(|l| RefineBlock::new(ps, rng, &format!("{name}.l{l}"), hidden))
            .collect();
        FlowEstimator { levels, refine }
    }

    /// Flow field (2, H, W): channel 0 = horizontal, 1 = vertical offsets
    /// in destination pixels.
    pub fn estimate<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        g: &mut Graph<F>,
        cur: NodeId,
        reference: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let shape = g.value(cur).shape().to_vec();
        if shape != g.value(reference).shape() {
            return Err(Error::shape(
                "flow inputs",
                format!("{:?}", shape),
                format!("{:?}", g.value(reference).shape()),
            ));
        }
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("flow inputs", "(3, H, W)", format!("{shape:?}")));
        }
        let scale = 1usize << (self.levels - 1);
        if shape[1] % scale != 0 || shape[2] % scale != 0 {
            return Err(Error::shape(
                "flow input dims",
                format!("multiples of {scale}"),
                format!("{}x{}", shape[1], shape[2]),
            ));
        }

        let mut curs = vec![cur];
        let mut refs = vec![reference];
        for l in 1..self.levels {
            let c = g.avgpool2(curs[l - 1]);
            let r = g.avgpool2(refs[l - 1]);
            curs.push(c);
            refs.push(r);
        }

        let (h, w) = (shape[1] / scale, shape[2] / scale);
        let zeros = ndarray::ArrayD::<F>::zeros(ndarray::IxDyn(&[2, h, w]));
        let mut flow = g.leaf(zeros, false);
        for l in (0..self.levels).rev() {
            if l + 1 < self.levels {
                let up = g.upsample2(flow);
                flow = g.scale_const(up, 2.0);
            }
            let warped = g.warp(refs[l], flow);
            flow = self.refine[l].apply(ps, g, curs[l], warped, flow, train);
        }
        Ok(flow)
    }
}
