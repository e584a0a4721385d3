//! Slowdown prediction under a changed resource allocation.
//!
//! Arithmetic intensity is a property of the query implementation and is
//! held fixed across allocations. A memory-bound query slows down only once
//! the new bandwidth roof drops below its attained rate; a compute-bound
//! query slows down in proportion to the SMs it loses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{HardwareSpec, MemLevel, ResourceAllocation};
use crate::ingest::AggregateMetrics;
use crate::roofline::{classify, BoundKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Downsize,
    Upsize,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    Normal,
    /// Memory bandwidth was increased on a memory-bound query; the model
    /// predicts no speedup and is known to be unreliable here.
    LowUpsizeMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub baseline_time: f64,
    pub predicted_time: f64,
    pub slowdown: f64,
    pub bound: BoundKind,
    pub direction: Direction,
    pub confidence: Confidence,
}

/// `max(t, int_ops / (ai * new_bw))`. Since `int_ops / ai` is the byte total
/// at that level, the second term is evaluated as `bytes / new_bw`.
pub fn predict_time_mem(m: &AggregateMetrics, t: f64, level: MemLevel, new_bw: f64) -> f64 {
    t.max(m.bytes(level) / new_bw)
}

pub fn slowdown_mem(m: &AggregateMetrics, t: f64, level: MemLevel, new_bw: f64) -> f64 {
    predict_time_mem(m, t, level, new_bw) / t
}

/// Reciprocal of the compute allocation ratio. Ratios above one model
/// upsizing and yield a speedup.
pub fn slowdown_compute(ratio: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::validation(format!("compute allocation ratio must be > 0, got {ratio}")));
    }
    Ok(1.0 / ratio)
}

/// Naive baseline: time scales inversely with the compute share.
pub fn linear_baseline(t: f64, ratio: f64) -> Result<f64> {
    Ok(t * slowdown_compute(ratio)?)
}

/// Picks the compute or memory model by roofline classification and applies
/// it. `alloc` is relative to the allocation the metrics were captured
/// under; `hw` must describe that allocation's peaks. Baseline time is the
/// profile's GPU time.
pub fn slowdown_unified(m: &AggregateMetrics, hw: &HardwareSpec, alloc: &ResourceAllocation) -> Result<Prediction> {
    let t = m.total_duration;
    let bound = classify(m, hw);
    let (slowdown, confidence) = match bound {
        BoundKind::ComputeBound => (slowdown_compute(alloc.compute_fraction)?, Confidence::Normal),
        BoundKind::DramBound | BoundKind::L2Bound => {
            for f in [alloc.dram_bw_fraction, alloc.l2_bw_fraction] {
                if !(f.is_finite() && f > 0.0) {
                    return Err(Error::validation(format!("bandwidth fraction must be > 0, got {f}")));
                }
            }
            let dram = slowdown_mem(m, t, MemLevel::Dram, hw.peak_dram_bw * alloc.dram_bw_fraction);
            let l2 = slowdown_mem(m, t, MemLevel::L2, hw.peak_l2_bw * alloc.l2_bw_fraction);
            let confidence = if alloc.dram_bw_fraction > 1.0 || alloc.l2_bw_fraction > 1.0 {
                Confidence::LowUpsizeMemory
            } else {
                Confidence::Normal
            };
            (dram.max(l2), confidence)
        }
    };
    Ok(Prediction {
        baseline_time: t,
        predicted_time: t * slowdown,
        slowdown,
        bound,
        direction: direction_of(alloc, slowdown),
        confidence,
    })
}

fn direction_of(alloc: &ResourceAllocation, slowdown: f64) -> Direction {
    let fractions = alloc.as_array();
    if fractions.iter().all(|&f| f == 1.0) {
        Direction::Unchanged
    } else if fractions.iter().all(|&f| f <= 1.0) {
        Direction::Downsize
    } else if fractions.iter().all(|&f| f >= 1.0) {
        Direction::Upsize
    } else if slowdown > 1.0 {
        Direction::Downsize
    } else if slowdown < 1.0 {
        Direction::Upsize
    } else {
        Direction::Unchanged
    }
}
