//! End-to-end time and throughput of queries running on concurrent
//! partitions.
//!
//! A query's end-to-end time on an instance is its GPU time scaled by the
//! unified slowdown for that instance's allocation, plus its CPU overhead.
//! Setup and host-to-device transfer are one-time costs; the host link is
//! not partitioned.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{HardwareSpec, PartitionConfig, ResourceAllocation, FRACTION_SUM_SLACK};
use crate::ingest::{aggregate, AggregateMetrics, QueryProfile};
use crate::scaling::{slowdown_unified, Confidence, Prediction};

/// One process running a query repeatedly on an allocation.
#[derive(Debug, Clone, Copy)]
pub struct ProcessPlan<'a> {
    pub profile: &'a QueryProfile,
    pub allocation: ResourceAllocation,
    pub include_cold_costs: bool,
    pub repetitions: u32,
}

/// Setup plus host-to-device transfer of the profile's input.
pub fn cold_cost(profile: &QueryProfile, hw: &HardwareSpec) -> f64 {
    profile.setup_overhead + profile.transfer_in_bytes / hw.host_link_bw
}

fn warm_query_time(profile: &QueryProfile, metrics: &AggregateMetrics, hw: &HardwareSpec, alloc: &ResourceAllocation) -> Result<(f64, Prediction)> {
    let prediction = slowdown_unified(metrics, hw, alloc)?;
    Ok((prediction.predicted_time + profile.cpu_overhead, prediction))
}

pub fn exec_time_process(plan: &ProcessPlan<'_>, hw: &HardwareSpec) -> Result<f64> {
    if plan.repetitions == 0 {
        return Err(Error::validation("repetitions must be at least 1"));
    }
    let metrics = aggregate(plan.profile, hw)?;
    let (per_rep, _) = warm_query_time(plan.profile, &metrics, hw, &plan.allocation)?;
    let once = if plan.include_cold_costs {
        cold_cost(plan.profile, hw)
    } else {
        0.0
    };
    Ok(once + f64::from(plan.repetitions) * per_rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcurrentTime {
    pub exec_time: f64,
    /// The plans' allocations sum past the whole GPU on some resource.
    pub oversubscribed: bool,
}

/// The slowest process determines the end-to-end time.
pub fn exec_time_concurrent(plans: &[ProcessPlan<'_>], hw: &HardwareSpec) -> Result<ConcurrentTime> {
    if plans.is_empty() {
        return Err(Error::validation("no processes to compose"));
    }
    let mut exec_time = f64::NEG_INFINITY;
    let mut sums = [0.0; 4];
    for plan in plans {
        exec_time = exec_time.max(exec_time_process(plan, hw)?);
        for (s, f) in sums.iter_mut().zip(plan.allocation.as_array()) {
            *s += f;
        }
    }
    Ok(ConcurrentTime {
        exec_time,
        oversubscribed: sums.iter().any(|&s| s > 1.0 + FRACTION_SUM_SLACK),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Hardware partitions: every fraction of the slice applies.
    #[default]
    Mig,
    /// Only SMs are split; L2 and DRAM stay shared. Interference between
    /// co-running processes is not modelled.
    Mps,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    #[default]
    RoundRobin,
    LeastLoaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadQuery {
    pub weight: f64,
    pub profile: QueryProfile,
}

/// A weighted query mix dispatched across `doc` instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub queries: Vec<WorkloadQuery>,
    #[serde(default = "one")]
    pub doc: usize,
    #[serde(default = "default_dispatch")]
    pub dispatch_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sharing: SharingMode,
    #[serde(default)]
    pub assignment: Assignment,
    /// Charge setup and transfer once per instance.
    #[serde(default)]
    pub include_cold_costs: bool,
}

fn one() -> usize {
    1
}

fn default_dispatch() -> usize {
    1000
}

impl WorkloadSpec {
    pub fn new(queries: Vec<(QueryProfile, f64)>, doc: usize, dispatch_count: usize, seed: u64) -> Result<Self> {
        let mut spec = WorkloadSpec {
            queries: queries
                .into_iter()
                .map(|(profile, weight)| WorkloadQuery { weight, profile })
                .collect(),
            doc,
            dispatch_count,
            seed,
            sharing: SharingMode::default(),
            assignment: Assignment::default(),
            include_cold_costs: false,
        };
        spec.normalize()?;
        Ok(spec)
    }

    /// Checks invariants and rescales weights to sum to one.
    pub fn normalize(&mut self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::validation("workload has no queries"));
        }
        if self.doc == 0 {
            return Err(Error::validation("degree of concurrency must be at least 1"));
        }
        let mut total = 0.0;
        for q in &self.queries {
            if !(q.weight.is_finite() && q.weight > 0.0) {
                return Err(Error::validation(format!(
                    "query `{}` has non-positive weight {}",
                    q.profile.query_id, q.weight
                )));
            }
            q.profile.validate()?;
            total += q.weight;
        }
        for q in &mut self.queries {
            q.weight /= total;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: WorkloadSpec = serde_json::from_str(text)?;
        spec.normalize()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn allocation_for(&self, instance: &crate::hardware::PartitionInstance) -> Result<ResourceAllocation> {
        match self.sharing {
            SharingMode::Mig => Ok(ResourceAllocation::of(instance)),
            SharingMode::Mps => ResourceAllocation::mps(instance.compute_fraction),
        }
    }
}

/// Per-query service times on each instance of a configuration.
#[derive(Debug, Clone)]
pub struct ServiceTable {
    /// `times[instance][query]`, seconds.
    pub times: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// One-time cost charged to each instance.
    pub cold: f64,
    pub low_confidence: bool,
}

impl ServiceTable {
    pub fn build(w: &WorkloadSpec, hw: &HardwareSpec, config: &PartitionConfig) -> Result<Self> {
        if w.queries.is_empty() {
            return Err(Error::validation("workload has no queries"));
        }
        let metrics = w
            .queries
            .iter()
            .map(|q| aggregate(&q.profile, hw))
            .collect::<Result<Vec<_>>>()?;
        let mut low_confidence = false;
        let mut times = Vec::with_capacity(config.instances.len());
        for instance in &config.instances {
            let alloc = w.allocation_for(instance)?;
            let mut row = Vec::with_capacity(w.queries.len());
            for (q, m) in w.queries.iter().zip(&metrics) {
                let (time, prediction) = warm_query_time(&q.profile, m, hw, &alloc)?;
                low_confidence |= prediction.confidence != Confidence::Normal;
                row.push(time);
            }
            times.push(row);
        }
        let cold = if w.include_cold_costs {
            w.queries
                .iter()
                .map(|q| cold_cost(&q.profile, hw))
                .fold(0.0, f64::max)
        } else {
            0.0
        };
        Ok(ServiceTable {
            times,
            weights: w.queries.iter().map(|q| q.weight).collect(),
            cold,
            low_confidence,
        })
    }

    /// Weighted mean service time on each instance.
    pub fn mean_times(&self) -> Vec<f64> {
        self.times
            .iter()
            .map(|row| row.iter().zip(&self.weights).map(|(t, w)| t * w).sum())
            .collect()
    }

    /// Sum of per-instance service rates. With cold costs, each instance's
    /// one-time cost is amortized over its share of `dispatch_count`.
    pub fn qps(&self, dispatch_count: usize) -> f64 {
        let share = dispatch_count as f64 / self.times.len() as f64;
        self.mean_times()
            .into_iter()
            .map(|mean| {
                if self.cold > 0.0 {
                    share / (self.cold + share * mean)
                } else {
                    1.0 / mean
                }
            })
            .sum()
    }
}

fn check_doc(w: &WorkloadSpec, config: &PartitionConfig) -> Result<()> {
    if config.instances.len() != w.doc {
        return Err(Error::validation(format!(
            "partition `{}` has {} instances but the workload asks for DoC {}",
            config.name,
            config.instances.len(),
            w.doc
        )));
    }
    if w.dispatch_count == 0 {
        return Err(Error::validation("dispatch_count must be at least 1"));
    }
    Ok(())
}

/// Analytic throughput: each instance serves at the reciprocal of its
/// weighted mean end-to-end time.
pub fn estimate_qps(w: &WorkloadSpec, hw: &HardwareSpec, config: &PartitionConfig) -> Result<f64> {
    check_doc(w, config)?;
    Ok(ServiceTable::build(w, hw, config)?.qps(w.dispatch_count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub instance: usize,
    pub query_id: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub qps: f64,
    pub makespan: f64,
    pub per_instance_queries: Vec<usize>,
    pub per_instance_busy: Vec<f64>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

/// Dispatches `dispatch_count` queries drawn by weight from a generator
/// seeded with `w.seed`; each instance runs its queue sequentially.
pub fn simulate_dispatch(w: &WorkloadSpec, hw: &HardwareSpec, config: &PartitionConfig) -> Result<SimulationResult> {
    check_doc(w, config)?;
    let table = ServiceTable::build(w, hw, config)?;
    Ok(run_dispatch(w, &table))
}

fn run_dispatch(w: &WorkloadSpec, table: &ServiceTable) -> SimulationResult {
    let k = table.times.len();
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let picker = WeightedIndex::new(&table.weights).expect("weights validated positive");

    let mut clock = vec![table.cold; k];
    let mut counts = vec![0usize; k];
    let mut trace = Vec::with_capacity(w.dispatch_count);
    for i in 0..w.dispatch_count {
        let q = picker.sample(&mut rng);
        let instance = match w.assignment {
            Assignment::RoundRobin => i % k,
            Assignment::LeastLoaded => clock
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(idx, _)| idx)
                .unwrap_or(0),
        };
        let start = clock[instance];
        let end = start + table.times[instance][q];
        clock[instance] = end;
        counts[instance] += 1;
        trace.push(TraceEvent {
            instance,
            query_id: w.queries[q].profile.query_id.clone(),
            start,
            end,
        });
    }
    let makespan = clock.iter().copied().fold(0.0, f64::max);
    SimulationResult {
        qps: w.dispatch_count as f64 / makespan,
        makespan,
        per_instance_queries: counts,
        per_instance_busy: clock,
        trace,
    }
}

/// `instance,query_id,start,end`
pub fn write_trace_csv<W: Write>(trace: &[TraceEvent], sink: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["instance", "query_id", "start", "end"])?;
    for e in trace {
        wtr.write_record([
            e.instance.to_string(),
            e.query_id.clone(),
            e.start.to_string(),
            e.end.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::KernelRecord;

    /// An under-utilized memory-bound query: 0.1 s GPU time at 10% of DRAM.
    fn light_query(id: &str, cpu: f64) -> QueryProfile {
        let hw = HardwareSpec::a100();
        let t = 0.1;
        let dram = 0.1 * hw.peak_dram_bw * t;
        let mut p = QueryProfile::new(
            id,
            1.0,
            vec![KernelRecord {
                kernel_name: "k".into(),
                duration: t,
                dram_bytes: dram,
                l2_requests: dram / 128.0,
                int_ops: 0.5 * dram,
            }],
        );
        p.cpu_overhead = cpu;
        p.setup_overhead = 2.0;
        p.transfer_in_bytes = 64e9;
        p
    }

    fn compute_query() -> QueryProfile {
        let hw = HardwareSpec::a100();
        let ops = 0.2 * hw.peak_compute_bw;
        QueryProfile::new(
            "cb",
            1.0,
            vec![KernelRecord {
                kernel_name: "k".into(),
                duration: 1.0,
                dram_bytes: ops / 27.15,
                l2_requests: ops / 27.15 / 64.0,
                int_ops: ops,
            }],
        )
    }

    #[test]
    fn warm_single_repetition() {
        let hw = HardwareSpec::a100();
        let p = light_query("q", 0.05);
        let plan = ProcessPlan {
            profile: &p,
            allocation: ResourceAllocation::full(),
            include_cold_costs: false,
            repetitions: 1,
        };
        assert!((exec_time_process(&plan, &hw).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn cold_adds_transfer_over_host_link() {
        let hw = HardwareSpec::a100();
        let p = light_query("q", 0.0);
        let warm = ProcessPlan {
            profile: &p,
            allocation: ResourceAllocation::full(),
            include_cold_costs: false,
            repetitions: 3,
        };
        let cold = ProcessPlan {
            include_cold_costs: true,
            ..warm
        };
        let delta = exec_time_process(&cold, &hw).unwrap() - exec_time_process(&warm, &hw).unwrap();
        assert!((delta - (2.0 + 64e9 / 32e9)).abs() < 1e-12);
    }

    #[test]
    fn halved_compute_doubles_only_gpu_term() {
        let hw = HardwareSpec::a100();
        let mut p = compute_query();
        p.cpu_overhead = 0.3;
        let full = ProcessPlan {
            profile: &p,
            allocation: ResourceAllocation::full(),
            include_cold_costs: false,
            repetitions: 1,
        };
        let half = ProcessPlan {
            allocation: ResourceAllocation::new(0.5, 1.0, 1.0, 1.0).unwrap(),
            ..full
        };
        assert!((exec_time_process(&full, &hw).unwrap() - 1.3).abs() < 1e-12);
        assert!((exec_time_process(&half, &hw).unwrap() - 2.3).abs() < 1e-12);
    }

    #[test]
    fn concurrent_is_max() {
        let hw = HardwareSpec::a100();
        let profiles: Vec<_> = [3.0, 5.0, 4.0].iter().map(|&c| light_query("q", c - 0.1)).collect();
        let plans: Vec<_> = profiles
            .iter()
            .map(|p| ProcessPlan {
                profile: p,
                allocation: ResourceAllocation::full(),
                include_cold_costs: false,
                repetitions: 1,
            })
            .collect();
        let c = exec_time_concurrent(&plans, &hw).unwrap();
        assert!((c.exec_time - 5.0).abs() < 1e-12);
        assert!(c.oversubscribed);
        assert!(exec_time_concurrent(&[], &hw).is_err());

        let single = exec_time_concurrent(&plans[..1], &hw).unwrap();
        assert_eq!(single.exec_time, exec_time_process(&plans[0], &hw).unwrap());
    }

    #[test]
    fn doc_one_qps_is_reciprocal() {
        let hw = HardwareSpec::a100();
        let w = WorkloadSpec::new(vec![(light_query("q", 0.0), 1.0)], 1, 1000, 1).unwrap();
        let qps = estimate_qps(&w, &hw, &PartitionConfig::whole_gpu()).unwrap();
        assert!((qps - 10.0).abs() < 1e-9);
    }

    #[test]
    fn two_slices_double_qps_without_slowdown() {
        let hw = HardwareSpec::a100();
        let w1 = WorkloadSpec::new(vec![(light_query("q", 0.0), 1.0)], 1, 1000, 1).unwrap();
        let w2 = WorkloadSpec { doc: 2, ..w1.clone() };
        let one = estimate_qps(&w1, &hw, &PartitionConfig::whole_gpu()).unwrap();
        let two = estimate_qps(&w2, &hw, &PartitionConfig::uniform(2).unwrap()).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn mismatched_doc_and_zero_dispatch() {
        let hw = HardwareSpec::a100();
        let mut w = WorkloadSpec::new(vec![(light_query("q", 0.0), 1.0)], 2, 1000, 1).unwrap();
        assert!(estimate_qps(&w, &hw, &PartitionConfig::whole_gpu()).is_err());
        w.doc = 1;
        w.dispatch_count = 0;
        assert!(simulate_dispatch(&w, &hw, &PartitionConfig::whole_gpu()).is_err());
    }

    #[test]
    fn weights_normalize() {
        let w = WorkloadSpec::new(
            vec![(light_query("a", 0.0), 2.0), (light_query("b", 0.0), 6.0)],
            1,
            10,
            0,
        )
        .unwrap();
        assert_eq!(w.queries[0].weight, 0.25);
        assert_eq!(w.queries[1].weight, 0.75);
        assert!(WorkloadSpec::new(vec![(light_query("a", 0.0), 0.0)], 1, 10, 0).is_err());
    }

    #[test]
    fn homogeneous_simulation_matches_estimate() {
        let hw = HardwareSpec::a100();
        for doc in [1, 2, 4, 5] {
            let w = WorkloadSpec::new(vec![(light_query("q", 0.02), 1.0)], doc, 1000, 9).unwrap();
            let config = PartitionConfig::uniform(doc).unwrap();
            let est = estimate_qps(&w, &hw, &config).unwrap();
            let sim = simulate_dispatch(&w, &hw, &config).unwrap();
            assert!(((sim.qps - est) / est).abs() < 1e-9, "doc {doc}: {} vs {est}", sim.qps);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let hw = HardwareSpec::a100();
        let w = WorkloadSpec::new(
            vec![(light_query("a", 0.01), 1.0), (light_query("b", 0.2), 1.0)],
            2,
            500,
            42,
        )
        .unwrap();
        let config = PartitionConfig::uniform(2).unwrap();
        let a = simulate_dispatch(&w, &hw, &config).unwrap();
        let b = simulate_dispatch(&w, &hw, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace, b.trace);
        let mut buf_a = Vec::new();
        write_trace_csv(&a.trace, &mut buf_a).unwrap();
        let mut buf_b = Vec::new();
        write_trace_csv(&b.trace, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);

        let other = WorkloadSpec { seed: 43, ..w };
        assert_ne!(simulate_dispatch(&other, &hw, &config).unwrap().trace, a.trace);
    }

    #[test]
    fn least_loaded_balances_heterogeneous_slices() {
        let hw = HardwareSpec::a100();
        let mut w = WorkloadSpec::new(vec![(compute_query(), 1.0)], 2, 700, 3).unwrap();
        let config = hw.find_config("cfg02:4g+3g").unwrap().clone();
        let rr = simulate_dispatch(&w, &hw, &config).unwrap();
        w.assignment = Assignment::LeastLoaded;
        let ll = simulate_dispatch(&w, &hw, &config).unwrap();
        assert!(ll.qps > rr.qps);
        assert!(ll.per_instance_queries[0] > ll.per_instance_queries[1]);
    }

    #[test]
    fn mps_keeps_memory_shared() {
        let hw = HardwareSpec::a100();
        let hw_sat = {
            // saturated DRAM query: any memory cut slows it down
            let t = 0.1;
            let dram = hw.peak_dram_bw * t;
            QueryProfile::new(
                "sat",
                1.0,
                vec![KernelRecord {
                    kernel_name: "k".into(),
                    duration: t,
                    dram_bytes: dram,
                    l2_requests: dram / 128.0,
                    int_ops: dram,
                }],
            )
        };
        let mut w = WorkloadSpec::new(vec![(hw_sat, 1.0)], 2, 100, 0).unwrap();
        let config = PartitionConfig::uniform(2).unwrap();
        let mig = estimate_qps(&w, &hw, &config).unwrap();
        w.sharing = SharingMode::Mps;
        let mps = estimate_qps(&w, &hw, &config).unwrap();
        assert!((mig - 10.0).abs() < 1e-9);
        assert!((mps - 20.0).abs() < 1e-9);
    }

    #[test]
    fn workload_json_round_trip() {
        let w = WorkloadSpec::new(vec![(light_query("a", 0.1), 1.0)], 3, 100, 5).unwrap();
        let text = serde_json::to_string(&w).unwrap();
        assert_eq!(WorkloadSpec::from_json(&text).unwrap(), w);
    }
}
