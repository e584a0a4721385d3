use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "slicewise", version, about = "Roofline what-if analysis for GPU database queries")]
pub struct Cli {
    /// Hardware spec (TOML). Falls back to $SLICEWISE_HARDWARE, then the
    /// bundled A100-40GB.
    #[arg(long, global = true)]
    pub hw: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a profiler counter export into profile JSON.
    Ingest(IngestArgs),
    /// Write a profile's kernels back out as canonical CSV.
    Export(ExportArgs),
    /// Place profiles on the DRAM/L2 rooflines and classify them.
    Roofline(RooflineArgs),
    /// Predict runtime under a different resource allocation.
    Predict(PredictArgs),
    /// Estimate and simulate QPS for concurrent instances.
    Concurrency(ConcurrencyArgs),
    /// Rank the partition catalog for a workload.
    Advise(AdviseArgs),
    /// Prediction accuracy against stored samples or a synthetic device.
    Eval(EvalArgs),
    /// Project a profile's operator plan to another scale factor.
    Extrapolate(ExtrapolateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub input: PathBuf,
    /// csv or json; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    /// Defaults to the input file stem.
    #[arg(long)]
    pub query_id: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub sf: f64,
    #[arg(long)]
    pub system: Option<String>,
    /// Seconds.
    #[arg(long, default_value_t = 0.0)]
    pub cpu_overhead: f64,
    /// Seconds.
    #[arg(long, default_value_t = 0.0)]
    pub setup_overhead: f64,
    #[arg(long, default_value_t = 0.0)]
    pub transfer_in: f64,
    #[arg(long, default_value_t = 0.0)]
    pub transfer_out: f64,
    #[arg(long)]
    pub dram_utilization: Option<f64>,
    #[arg(long)]
    pub l1_hit_rate: Option<f64>,
    #[arg(long)]
    pub l2_hit_rate: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub profile: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RooflineArgs {
    #[arg(required = true)]
    pub profiles: Vec<PathBuf>,
    /// Memory level for the plot: dram or l2.
    #[arg(long, default_value = "dram")]
    pub level: String,
    /// compute,dram,l2,capacity
    #[arg(long)]
    pub alloc: Option<String>,
    #[arg(long)]
    pub mig: Option<String>,
    /// Plot CSV path.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub profile: PathBuf,
    /// Target allocation, compute,dram,l2,capacity (decimals or ratios).
    #[arg(long)]
    pub alloc: Option<String>,
    /// Target MIG slice, e.g. 3g.20gb.
    #[arg(long)]
    pub mig: Option<String>,
    /// Allocation the profile was captured under (default: whole GPU).
    #[arg(long)]
    pub from: Option<String>,
    #[arg(long)]
    pub from_mig: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    /// Workload JSON with weighted queries.
    #[arg(long, conflicts_with = "profiles")]
    pub workload: Option<PathBuf>,
    /// Profile JSON; repeat for a mix.
    #[arg(long = "profile")]
    pub profiles: Vec<PathBuf>,
    /// Mix weights, one per --profile.
    #[arg(long = "weight")]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub dispatch: Option<usize>,
    /// Share SMs only; L2 and DRAM stay whole.
    #[arg(long)]
    pub mps: bool,
    /// Charge setup and transfer once per instance.
    #[arg(long)]
    pub cold: bool,
}

#[derive(Debug, Args)]
pub struct ConcurrencyArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long)]
    pub doc: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Catalog config name; defaults to DoC equal slices.
    #[arg(long)]
    pub config: Option<String>,
    /// round-robin or least-loaded.
    #[arg(long)]
    pub assignment: Option<String>,
    /// Per-query trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdviseArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// min-latency, max-throughput or max-throughput-per-resource.
    #[arg(long, default_value = "max-throughput")]
    pub objective: String,
    /// json or table.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Fractions for a scaling curve, e.g. 0.125,0.25,0.5,1.
    #[arg(long)]
    pub curve: Option<String>,
    /// Curve CSV path.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score the predictor against a generated synthetic device.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    /// Stored samples, label,estimated,actual.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub roofline_samples: Option<PathBuf>,
    #[arg(long)]
    pub linear_samples: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtrapolateArgs {
    pub profile: PathBuf,
    #[arg(long)]
    pub target_sf: f64,
    /// Use the unprofiled Crystal model.
    #[arg(long)]
    pub crystal: bool,
    #[arg(long)]
    pub scale_hashtable: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
