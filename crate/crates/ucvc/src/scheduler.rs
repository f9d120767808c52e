//! Frame scheduling: GoP structure, reference selection, encode order.
//!
//! Two structures exist. Low-delay P codes in display order; every frame
//! except the GoP anchor references the two most recent decoded frames.
//! Hierarchical B codes each GoP span [lo, lo+gop] by first coding the
//! future anchor, then recursively the midpoints, so every B frame has one
//! decoded past and one decoded future reference. A trailing segment with
//! no future anchor falls back to P frames whose references may reach into
//! the dyadic region.
//!
//! Both structures transmit the frame type per frame, so the decoder can
//! rebuild the plan from (frame_count, gop_size, structure) and verify the
//! bitstream against it.

use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FrameType {
    I,
    P,
    B,
}

impl std::fmt::Display for FrameType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameType::I => write!(f, "I"),
            FrameType::P => write!(f, "P"),
            FrameType::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GopStructure {
    LowDelayP,
    HierarchicalB,
}

/// One frame's coding decision. `ref1` is the primary (temporally nearest
/// past) reference; for B frames `ref2` is the future anchor, for P frames
/// the second-nearest past frame. I frames carry no references.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct FramePlan {
    pub index: usize,
    pub ftype: FrameType,
    pub ref1: Option<usize>,
    pub ref2: Option<usize>,
    pub encode_order: usize,
}

/// Plan a whole sequence. The returned vector is display-indexed:
/// `plan[t].index == t`.
pub fn plan_sequence(
    frame_count: usize,
    gop_size: usize,
    structure: GopStructure,
) -> Result<Vec<FramePlan>> {
    if frame_count == 0 {
        return Err(Error::invalid("frame_count must be at least 1"));
    }
    if gop_size == 0 {
        return Err(Error::invalid("gop_size must be at least 1"));
    }
    let mut plan: Vec<FramePlan> = (0..frame_count)
        .map(|i| FramePlan {
            index: i,
            ftype: FrameType::I,
            ref1: None,
            ref2: None,
            encode_order: usize::MAX,
        })
        .collect();
    match structure {
        GopStructure::LowDelayP => {
            for t in 0..frame_count {
                plan[t].encode_order = t;
                if t % gop_size == 0 {
                    continue;
                }
                let gop_start = t - t % gop_size;
                plan[t].ftype = FrameType::P;
                plan[t].ref1 = Some(t - 1);
                plan[t].ref2 = Some(t.saturating_sub(2).max(gop_start));
            }
        }
        GopStructure::HierarchicalB => {
            let mut order = 0usize;
            plan[0].encode_order = 0;
            order += 1;
            let mut lo = 0usize;
            // Complete spans get the dyadic treatment.
            while lo + gop_size < frame_count {
                let hi = lo + gop_size;
                plan[hi].encode_order = order;
                order += 1;
                dyadic(&mut plan, lo, hi, &mut order);
                lo = hi;
            }
            // Trailing frames past the last anchor: P over the two most
            // recent decoded display indices, coded in display order.
            for t in lo + 1..frame_count {
                plan[t].ftype = FrameType::P;
                plan[t].ref1 = Some(t - 1);
                plan[t].ref2 = Some(if t >= 2 { t - 2 } else { t - 1 });
                plan[t].encode_order = order;
                order += 1;
            }
            debug_assert_eq!(order, frame_count);
        }
    }
    Ok(plan)
}

/// Pre-order midpoint recursion: the midpoint B of [lo, hi], then the left
/// half fully, then the right half.
fn dyadic(plan: &mut [FramePlan], lo: usize, hi: usize, order: &mut usize) {
    if hi - lo < 2 {
        return;
    }
    let mid = (lo + hi) / 2;
    plan[mid].ftype = FrameType::B;
    plan[mid].ref1 = Some(lo);
    plan[mid].ref2 = Some(hi);
    plan[mid].encode_order = *order;
    *order += 1;
    dyadic(plan, lo, mid, order);
    dyadic(plan, mid, hi, order);
}

/// Display indices sorted by coding position.
pub fn encode_order(plan: &[FramePlan]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..plan.len()).collect();
    idx.sort_by_key(|&i| plan[i].encode_order);
    idx
}

/// Structural audit of a plan. Returns human-readable violations; an empty
/// vector means the plan is coherent.
pub fn validate_plan(plan: &[FramePlan], frame_count: usize, gop_size: usize) -> Vec<String> {
    let mut errs = Vec::new();
    if plan.len() != frame_count {
        errs.push(format!(
            "plan length {} does not match frame_count {}",
            plan.len(),
            frame_count
        ));
        return errs;
    }
    if frame_count == 0 {
        return errs;
    }
    for (i, p) in plan.iter().enumerate() {
        if p.index != i {
            errs.push(format!("plan[{i}] carries index {}", p.index));
        }
    }
    // Encode order must be a permutation of 0..n.
    let mut seen = vec![false; frame_count];
    let mut perm_ok = true;
    for p in plan {
        if p.encode_order >= frame_count || seen[p.encode_order] {
            perm_ok = false;
            break;
        }
        seen[p.encode_order] = true;
    }
    if !perm_ok {
        errs.push("encode_order not a permutation".to_string());
    }
    for p in plan {
        let t = p.index;
        match p.ftype {
            FrameType::I => {
                if p.ref1.is_some() || p.ref2.is_some() {
                    errs.push(format!("I frame {t} carries references"));
                }
                if t % gop_size != 0 {
                    errs.push(format!("I frame {t} off the GoP grid (gop {gop_size})"));
                }
            }
            FrameType::P | FrameType::B => {
                if t % gop_size == 0 {
                    errs.push(format!("anchor frame {t} is not I"));
                }
                let (r1, r2) = match (p.ref1, p.ref2) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        errs.push(format!("{} frame {t} is missing a reference", p.ftype));
                        continue;
                    }
                };
                for r in [r1, r2] {
                    if r >= frame_count {
                        errs.push(format!("frame {t} references out-of-range frame {r}"));
                    } else if r == t {
                        errs.push(format!("frame {t} references itself"));
                    } else if perm_ok && plan[r].encode_order >= p.encode_order {
                        errs.push(format!(
                            "frame {t} references frame {r} which is not yet decoded"
                        ));
                    }
                }
                if p.ftype == FrameType::P {
                    if r1 >= t || r2 >= t {
                        errs.push(format!("P frame {t} references the future"));
                    }
                } else if !(r1 < t && t < r2) {
                    errs.push(format!(
                        "B frame {t} references ({r1}, {r2}) do not bracket it"
                    ));
                }
            }
        }
    }
    errs
}
