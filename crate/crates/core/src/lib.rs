//! Roofline-based performance models for GPU database queries running on
//! whole GPUs, MIG-style slices and concurrent instances.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisor;
pub mod concurrency;
pub mod error;
pub mod evalkit;
pub mod hardware;
pub mod ingest;
pub mod roofline;
pub mod scaling;
pub mod whitebox;

pub use advisor::{advise, enumerate_configs, scaling_curve, Objective, WhatIfReport, WhatIfRow};
pub use concurrency::{
    estimate_qps, exec_time_concurrent, exec_time_process, simulate_dispatch, ProcessPlan, SimulationResult,
    WorkloadSpec,
};
pub use error::{Error, Result};
pub use evalkit::{error_cdf, relative_error, ErrorCdf, ErrorSample, SyntheticDevice};
pub use hardware::{HardwareSpec, MemLevel, PartitionConfig, PartitionInstance, ResourceAllocation};
pub use ingest::{aggregate, AggregateMetrics, KernelRecord, QueryProfile};
pub use roofline::{classify, BoundKind, RooflineCeilings, RooflinePoint};
pub use scaling::{slowdown_unified, Confidence, Direction, Prediction};
pub use whitebox::{PlanOp, ProbeOp, ScanOp};
