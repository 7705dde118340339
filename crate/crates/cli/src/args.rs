//! Command-line surface. Every long flag can also appear as a key in a
//! JSON `--config` file; flags given on the command line take precedence.

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "gfnlab",
    version,
    about = "Exact tabular laboratory for flow-network samplers on small DAGs",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Build, inspect, or render state graphs
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Imbalance sensitivity: realized total variation against bounds
    Sensitivity(SensitivityArgs),
    /// Train a tabular policy toward a target distribution
    Train(TrainArgs),
    /// Absorb posterior chunks with streaming updates and audits
    Stream(StreamArgs),
    /// Policy diagnostics against a target
    Diagnose {
        #[command(subcommand)]
        cmd: DiagnoseCmd,
    },
    /// Color-refinement expressiveness demos and graph counting
    Wl {
        #[command(subcommand)]
        cmd: WlCmd,
    },
    /// Uniform-exploration coverage against the Markov bound
    Explore(ExploreArgs),
}

#[derive(Subcommand)]
pub enum GraphCmd {
    /// Construct a graph (or reload one) and optionally save it as JSON
    Build(GraphBuildArgs),
    /// Print size statistics for a graph
    Info(GraphInfoArgs),
    /// Render a graph in DOT format
    Dot(GraphDotArgs),
}

#[derive(Args)]
pub struct GraphBuildArgs {
    /// Graph family: tree | set (alternative to --graph / --in)
    #[arg(long)]
    pub kind: Option<String>,
    /// Tree branching factor (with --kind tree)
    #[arg(long)]
    pub g: Option<u32>,
    /// Tree height (with --kind tree)
    #[arg(long)]
    pub h: Option<u32>,
    /// Element count (with --kind set)
    #[arg(long)]
    pub d: Option<u32>,
    /// Subset size (with --kind set)
    #[arg(long = "S")]
    pub s: Option<u32>,
    /// Compact spec, e.g. tree:g=2,h=3 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// Load an existing graph JSON instead of constructing one
    #[arg(long = "in")]
    pub input: Option<String>,
    /// Where to save the graph JSON
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct GraphInfoArgs {
    /// Graph JSON to inspect
    #[arg(long = "in")]
    pub input: Option<String>,
    /// Compact spec, e.g. tree:g=2,h=3 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct GraphDotArgs {
    /// Graph JSON to render
    #[arg(long = "in")]
    pub input: Option<String>,
    /// Compact spec, e.g. tree:g=2,h=3 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// DOT output path (stdout when omitted)
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct SensitivityArgs {
    /// State graph, e.g. tree:g=2,h=3 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// Target: uniform | kmodes:k=2,r=3[,modes=5;9] | product:seed=3,alpha=1 [default: uniform]
    #[arg(long)]
    pub target: Option<String>,
    /// Imbalanced edge as <state>:<child-slot>; `root` names the start state [default: root:0]
    #[arg(long)]
    pub edge: Option<String>,
    /// Extra flow injected on the edge
    #[arg(long)]
    pub delta: Option<f64>,
    /// Total flow carried by the balanced part [default: 1]
    #[arg(long = "F")]
    pub total_flow: Option<f64>,
    /// How the extra flow splits: equal | concentrated[:x=<terminal>] | dirichlet:alpha=<a> [default: equal]
    #[arg(long)]
    pub split: Option<String>,
    /// Monte Carlo replications for dirichlet splits [default: 10000]
    #[arg(long)]
    pub reps: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Bounds report CSV path
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

/// Optimization flags shared by `train` and `stream`.
#[derive(Args)]
pub struct TrainKnobs {
    /// Trajectories per optimization step [default: 32]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Uniform-mixture exploration weight while sampling, in [0,1) [default: 0.1]
    #[arg(long)]
    pub explore: Option<f64>,
    /// Trace cadence in epochs [default: 50]
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Adam learning rate for logits and state flows [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam learning rate for the log-partition head [default: 0.1]
    #[arg(long = "lr-logz")]
    pub lr_logz: Option<f64>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// State graph, e.g. tree:g=2,h=3 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// Target: uniform | kmodes:k=2,r=3[,modes=5;9] | product:seed=3,alpha=1 [default: uniform]
    #[arg(long)]
    pub target: Option<String>,
    /// Loss: tb | db | subtb:lambda=0.9 | td3:beta0=1,anneal=2000[,direction=upstream] [default: tb]
    #[arg(long)]
    pub loss: Option<String>,
    /// Optimization steps [default: 1000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training trace CSV path (epoch,loss,tv,fcs_mean)
    #[arg(long)]
    pub trace: Option<String>,
    /// Save the trained policy JSON here
    #[arg(long)]
    pub save: Option<String>,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct StreamArgs {
    /// State graph, e.g. tree:g=2,h=3 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// Prior target: uniform | kmodes:... | product:... [default: uniform]
    #[arg(long)]
    pub target: Option<String>,
    /// Update rule: sb | kl:k=8 [default: sb]
    #[arg(long)]
    pub update: Option<String>,
    /// Chunk files, in stream order (each carries its position t)
    #[arg(long, num_args = 1..)]
    pub chunks: Vec<String>,
    /// Generate this many synthetic chunks instead of reading files
    #[arg(long)]
    pub synth: Option<usize>,
    /// Log-likelihood scale for synthetic chunks [default: 1]
    #[arg(long = "synth-scale")]
    pub synth_scale: Option<f64>,
    /// Optimization steps per absorbed chunk [default: 1000]
    #[arg(long = "epochs-per-chunk")]
    pub epochs_per_chunk: Option<usize>,
    /// Steps for the initial prior fit [default: epochs-per-chunk]
    #[arg(long = "epochs-initial")]
    pub epochs_initial: Option<usize>,
    /// Audit CSV path (t,bound,lhs,rhs,holds,asserted)
    #[arg(long)]
    pub audit: Option<String>,
    /// Training trace CSV path (t,epoch,loss,tv,fcs_mean)
    #[arg(long)]
    pub trace: Option<String>,
    /// Save the final policy JSON here
    #[arg(long)]
    pub save: Option<String>,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Subcommand)]
pub enum DiagnoseCmd {
    /// Subset-consistency report for a saved policy
    Fcs(DiagnoseFcsArgs),
    /// Per-terminal marginal vs target CSV
    Dist(DiagnoseDistArgs),
}

#[derive(Args)]
pub struct DiagnoseFcsArgs {
    /// Saved policy JSON
    #[arg(long)]
    pub policy: Option<String>,
    /// State graph the policy was trained on
    #[arg(long)]
    pub graph: Option<String>,
    /// Target: uniform | kmodes:... | product:... [default: uniform]
    #[arg(long)]
    pub target: Option<String>,
    /// Terminal subset size [default: 4]
    #[arg(short = 'B', long = "B")]
    pub subset_size: Option<usize>,
    /// Number of sampled subsets [default: 200]
    #[arg(short = 'm', long = "m")]
    pub samples: Option<usize>,
    /// Concentration-bound failure probability [default: 0.05]
    #[arg(long)]
    pub confidence: Option<f64>,
    /// Marginal mode: exact | importance:k=<samples> [default: exact]
    #[arg(long)]
    pub mode: Option<String>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON report path
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct DiagnoseDistArgs {
    /// Saved policy JSON
    #[arg(long)]
    pub policy: Option<String>,
    /// State graph the policy was trained on
    #[arg(long)]
    pub graph: Option<String>,
    /// Target: uniform | kmodes:... | product:... [default: uniform]
    #[arg(long)]
    pub target: Option<String>,
    /// CSV path (terminal_id,p_model,p_target,abs_diff)
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Subcommand)]
pub enum WlCmd {
    /// Tied vs untied training on the two-level counterexample
    Demo(WlDemoArgs),
    /// Labeled vs unlabeled simple-graph counts
    Count(WlCountArgs),
}

#[derive(Args)]
pub struct WlDemoArgs {
    /// Which leaf target: hetero (unlearnable) | homo (learnable)
    #[arg(long)]
    pub target: Option<String>,
    /// How many seeds to run for each mode [default: 20]
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Optimization steps per run [default: 2500]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Worker threads [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Results CSV path (mode,seed,final_tv,floor)
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct WlCountArgs {
    /// Node count [default: 12]
    #[arg(long)]
    pub n: Option<u32>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Args)]
pub struct ExploreArgs {
    /// State graph, e.g. tree:g=3,h=4 | set:d=8,S=4 | custom:<path>
    #[arg(long)]
    pub graph: Option<String>,
    /// Trajectories sampled per trial [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cap on states one trajectory can touch [default: longest trajectory + 1]
    #[arg(long)]
    pub cap: Option<usize>,
    /// Independent exploration trials [default: 1000]
    #[arg(long)]
    pub trials: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Coverage CSV path (s,threshold,empirical,bound,vacuous)
    #[arg(long)]
    pub out: Option<String>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<String>,
}
