//! One function per subcommand: resolve flags against an optional config
//! file, call into the library, print a one-line summary, write declared
//! outputs atomically.

use std::path::Path;
use std::sync::Arc;

use gfnlab_core::diagnostics::{exploration_coverage, fcs};
use gfnlab_core::error::{Error, Result};
use gfnlab_core::flows::{exact_marginal, marginal_tv, total_variation};
use gfnlab_core::grad::AdamConfig;
use gfnlab_core::graph::{save_graph, write_atomic};
use gfnlab_core::sensitivity::{
    dag_bounds, dirichlet_expected_tv_closed, dirichlet_expected_tv_mc, imbalanced_distribution,
    kmode_bounds, tree_bounds, ImbalanceSpec, SplitRule,
};
use gfnlab_core::stream::{propagation_audit, stream_update, AuditRow, StreamChunk, StreamState};
use gfnlab_core::train::{train, LossKind, TraceRow, TrainConfig};
use gfnlab_core::wl::{
    graph_space_reduction, labeled_graph_count, min_tv_under_tying, train_tied,
    unlabeled_graph_count, wl_counterexample, wl_homogeneous, WlInstance,
};
use gfnlab_core::{StateGraph, TabularPolicy};

use crate::args::*;
use crate::config::ConfigMap;
use crate::spec;

fn invalid(msg: String) -> Error {
    Error::InvalidArg(msg)
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| invalid(format!("missing required flag --{flag}")))
}

/// Summaries print probabilities and bounds with six decimals; files keep
/// full precision.
fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_out(path: &str, contents: &str) -> Result<()> {
    write_atomic(Path::new(path), contents)
}

const CONTAIN_TOL: f64 = 1e-9;

// ---------------------------------------------------------------- graph --

fn graph_summary(graph: &StateGraph) -> String {
    format!(
        "states={} edges={} terminals={} depth={} longest={}",
        graph.num_states(),
        graph.num_edges(),
        graph.num_terminals(),
        graph.max_depth(),
        graph.max_trajectory_len()
    )
}

/// `--in` wins over `--graph`, which wins over `--kind` plus dimensions.
fn resolve_graph_source(
    input: Option<String>,
    graph: Option<String>,
    kind: Option<String>,
    g: Option<u32>,
    h: Option<u32>,
    d: Option<u32>,
    s: Option<u32>,
) -> Result<spec::GraphSpec> {
    if let Some(path) = input {
        return Ok(spec::GraphSpec::Custom { path });
    }
    if let Some(text) = graph {
        return spec::parse_graph(&text);
    }
    match kind.as_deref() {
        Some("tree") => Ok(spec::GraphSpec::Tree {
            g: require(g, "g")?,
            h: require(h, "h")?,
        }),
        Some("set") => Ok(spec::GraphSpec::Set {
            d: require(d, "d")?,
            s: require(s, "S")?,
        }),
        Some(other) => Err(invalid(format!(
            "unknown graph kind `{other}` (expected tree | set)"
        ))),
        None => Err(invalid(
            "need one of --in <path>, --graph <spec>, or --kind with dimensions".into(),
        )),
    }
}

pub fn run_graph_build(args: GraphBuildArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let input = args.input.or(cfg.take_str("in")?);
    let graph_text = args.graph.or(cfg.take_str("graph")?);
    let kind = args.kind.or(cfg.take_str("kind")?);
    let g = args.g.or(cfg.take_u64("g")?.map(|v| v as u32));
    let h = args.h.or(cfg.take_u64("h")?.map(|v| v as u32));
    let d = args.d.or(cfg.take_u64("d")?.map(|v| v as u32));
    let s = args.s.or(cfg.take_u64("S")?.map(|v| v as u32));
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;

    let graph = spec::build_graph(&resolve_graph_source(input, graph_text, kind, g, h, d, s)?)?;
    if let Some(path) = &out {
        save_graph(&graph, Path::new(path))?;
    }
    println!("{}", graph_summary(&graph));
    Ok(())
}

pub fn run_graph_info(args: GraphInfoArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let input = args.input.or(cfg.take_str("in")?);
    let graph_text = args.graph.or(cfg.take_str("graph")?);
    cfg.finish()?;
    let graph = spec::build_graph(&resolve_graph_source(
        input, graph_text, None, None, None, None, None,
    )?)?;
    println!("{}", graph_summary(&graph));
    Ok(())
}

fn dot_text(graph: &StateGraph) -> String {
    let mut out = String::from("digraph states {\n  rankdir=LR;\n");
    for v in 0..graph.num_states() {
        let shape = if graph.is_terminal(v) {
            "doublecircle"
        } else {
            "circle"
        };
        match graph.label(v) {
            Some(label) => {
                out.push_str(&format!("  {v} [shape={shape}, label=\"{v}: {label}\"];\n"))
            }
            None => out.push_str(&format!("  {v} [shape={shape}];\n")),
        }
    }
    for u in 0..graph.num_states() {
        for &v in graph.children(u) {
            out.push_str(&format!("  {u} -> {v};\n"));
        }
    }
    out.push_str("}\n");
    out
}

pub fn run_graph_dot(args: GraphDotArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let input = args.input.or(cfg.take_str("in")?);
    let graph_text = args.graph.or(cfg.take_str("graph")?);
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;
    let graph = spec::build_graph(&resolve_graph_source(
        input, graph_text, None, None, None, None, None,
    )?)?;
    let text = dot_text(&graph);
    match out {
        Some(path) => {
            write_out(&path, &text)?;
            println!("states={} dot={}", graph.num_states(), path);
        }
        None => print!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------- sensitivity --

struct BoundRow {
    name: &'static str,
    lower: f64,
    value: f64,
    upper: f64,
    contained: bool,
}

impl BoundRow {
    fn new(name: &'static str, lower: f64, value: f64, upper: f64) -> Self {
        BoundRow {
            name,
            lower,
            value,
            upper,
            contained: value >= lower - CONTAIN_TOL && value <= upper + CONTAIN_TOL,
        }
    }
}

pub fn run_sensitivity(args: SensitivityArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let graph_text = require(args.graph.or(cfg.take_str("graph")?), "graph")?;
    let target_text = args
        .target
        .or(cfg.take_str("target")?)
        .unwrap_or_else(|| "uniform".into());
    let edge_text = args
        .edge
        .or(cfg.take_str("edge")?)
        .unwrap_or_else(|| "root:0".into());
    let delta = require(args.delta.or(cfg.take_f64("delta")?), "delta")?;
    let total_flow = args.total_flow.or(cfg.take_f64("F")?).unwrap_or(1.0);
    let split_text = args
        .split
        .or(cfg.take_str("split")?)
        .unwrap_or_else(|| "equal".into());
    let reps = args.reps.or(cfg.take_usize("reps")?).unwrap_or(10_000);
    let seed = args.seed.or(cfg.take_u64("seed")?).unwrap_or(0);
    let threads = args.threads.or(cfg.take_usize("threads")?).unwrap_or(1);
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;

    let graph_spec = spec::parse_graph(&graph_text)?;
    let target_spec = spec::parse_target(&target_text)?;
    let graph = spec::build_graph(&graph_spec)?;
    let target = spec::build_target(&target_spec, &graph_spec, &graph)?;
    let edge = spec::parse_edge(&edge_text, &graph)?;
    let split = spec::parse_split(&split_text, seed, &target, edge.1)?;

    let mu = imbalanced_distribution(
        &target,
        &ImbalanceSpec {
            edge,
            delta,
            split: split.clone(),
        },
        total_flow,
    )?;
    let pi = target.probabilities();
    let tv = total_variation(&mu, &pi);
    let n = graph.num_terminals();
    let d = graph.descendant_terminal_count(edge.1);

    let mut rows: Vec<BoundRow> = Vec::new();
    match &target_spec {
        spec::TargetSpec::Uniform => {
            if let spec::GraphSpec::Tree { g, h } = graph_spec {
                if edge.0 == graph.initial() {
                    let (lo, hi) = tree_bounds(g, h, total_flow, delta)?;
                    rows.push(BoundRow::new("tree", lo, tv, hi));
                }
            }
            let b = dag_bounds(n, d, total_flow, delta)?;
            rows.push(BoundRow::new("dag", b.lower, tv, b.upper));
            rows.push(BoundRow::new("dag_alt", b.lower, tv, b.alt_upper));
            if let SplitRule::Dirichlet { alpha, .. } = split {
                let mc = dirichlet_expected_tv_mc(
                    &target, edge, delta, total_flow, alpha, reps, seed, threads,
                )?;
                let mut row =
                    BoundRow::new("dirichlet_mc", mc.bounds.lower, mc.mean, mc.bounds.upper);
                row.contained = mc.contained == mc.reps;
                rows.push(row);
                let closed = dirichlet_expected_tv_closed(n, d, alpha, delta, total_flow)?;
                rows.push(BoundRow::new(
                    "dirichlet_closed",
                    mc.bounds.lower,
                    closed.expected_tv,
                    mc.bounds.upper,
                ));
            }
        }
        spec::TargetSpec::KModes { k, r, .. } => {
            // count boosted terminals among the reachable ones
            let uniform = 1.0 / n as f64;
            let modes_reachable = graph
                .reachable_terminals(edge.1)
                .iter()
                .filter(|&&x| pi[graph.terminal_index(x).unwrap()] > uniform)
                .count();
            let b = kmode_bounds(n, *k, *r, d, modes_reachable, total_flow, delta)?;
            rows.push(BoundRow::new("kmode", b.lower, tv, b.upper));
            rows.push(BoundRow::new("kmode_alt", b.alt_lower, tv, b.alt_upper));
        }
        spec::TargetSpec::Product { .. } => {
            return Err(invalid(
                "sensitivity bounds are defined for uniform and kmodes targets".into(),
            ));
        }
    }

    let primary = &rows[0];
    println!(
        "tv={} lower={} upper={} contained={}",
        f6(primary.value),
        f6(primary.lower),
        f6(primary.upper),
        primary.contained
    );
    if let Some(path) = out {
        let mut csv = String::from("bound_name,lower,exact_or_mean,upper,contained\n");
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.name, row.lower, row.value, row.upper, row.contained
            ));
        }
        write_out(&path, &csv)?;
    }
    Ok(())
}

// ----------------------------------------------------------------- train --

/// Resolves the optimization flags shared by `train` and `stream`; the
/// epoch count is command-specific and passed in already resolved.
fn resolve_train_config(args: &TrainKnobs, cfg: &mut ConfigMap, epochs: usize) -> Result<TrainConfig> {
    let mut config = TrainConfig {
        epochs,
        batch_size: args.batch.or(cfg.take_usize("batch")?).unwrap_or(32),
        exploration: args.explore.or(cfg.take_f64("explore")?).unwrap_or(0.1),
        seed: args.seed.or(cfg.take_u64("seed")?).unwrap_or(0),
        eval_every: args
            .eval_every
            .or(cfg.take_usize("eval-every")?)
            .unwrap_or(50),
        adam: AdamConfig::default(),
        threads: args.threads.or(cfg.take_usize("threads")?).unwrap_or(1),
    };
    if let Some(lr) = args.lr.or(cfg.take_f64("lr")?) {
        config.adam.lr_logits = lr;
    }
    if let Some(lr) = args.lr_logz.or(cfg.take_f64("lr-logz")?) {
        config.adam.lr_log_z = lr;
    }
    Ok(config)
}

fn trace_csv(rows: &[TraceRow]) -> String {
    let mut csv = String::from("epoch,loss,tv,fcs_mean\n");
    for row in rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.loss, row.tv, row.fcs_mean
        ));
    }
    csv
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let graph_text = require(args.graph.or(cfg.take_str("graph")?), "graph")?;
    let target_text = args
        .target
        .or(cfg.take_str("target")?)
        .unwrap_or_else(|| "uniform".into());
    let loss_text = args
        .loss
        .or(cfg.take_str("loss")?)
        .unwrap_or_else(|| "tb".into());
    let trace_path = args.trace.or(cfg.take_str("trace")?);
    let save_path = args.save.or(cfg.take_str("save")?);
    let epochs = args.epochs.or(cfg.take_usize("epochs")?).unwrap_or(1000);
    let config = resolve_train_config(&args.knobs, &mut cfg, epochs)?;
    cfg.finish()?;

    let graph_spec = spec::parse_graph(&graph_text)?;
    let graph = spec::build_graph(&graph_spec)?;
    let target = spec::build_target(&spec::parse_target(&target_text)?, &graph_spec, &graph)?;
    let loss = spec::parse_loss(&loss_text)?;

    let (policy, trace) = train(&target, &loss, &config)?;
    let last = trace.last().expect("training always traces the last epoch");
    println!(
        "epochs={} loss={:.6e} tv={} fcs_mean={}",
        config.epochs,
        last.loss,
        f6(last.tv),
        f6(last.fcs_mean)
    );
    if let Some(path) = trace_path {
        write_out(&path, &trace_csv(&trace))?;
    }
    if let Some(path) = save_path {
        policy.save(Path::new(&path))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- stream --

fn audit_csv(rows: &[AuditRow]) -> String {
    let mut csv = String::from("t,bound,lhs,rhs,holds,asserted\n");
    let mut push = |t: usize, name: &str, lhs: f64, rhs: f64, holds: bool, asserted: bool| {
        csv.push_str(&format!("{t},{name},{lhs},{rhs},{holds},{asserted}\n"));
    };
    for row in rows {
        if let Some(b) = row.log_sq {
            push(row.t, "log_sq", b.lhs, b.rhs, b.holds, true);
        }
        push(
            row.t,
            "tv_flow",
            row.tv_flow.lhs,
            row.tv_flow.rhs,
            row.tv_flow.holds,
            true,
        );
        if let Some(b) = row.tv_flow_variant {
            push(row.t, "tv_flow_learned", b.lhs, b.rhs, b.holds, false);
        }
        push(
            row.t,
            "tv_kl",
            row.tv_kl.lhs,
            row.tv_kl.rhs,
            row.tv_kl.holds,
            true,
        );
        push(
            row.t,
            "tv_kl_half",
            row.tv_kl_variant.lhs,
            row.tv_kl_variant.rhs,
            row.tv_kl_variant.holds,
            false,
        );
    }
    csv
}

pub fn run_stream(args: StreamArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let graph_text = require(args.graph.or(cfg.take_str("graph")?), "graph")?;
    let target_text = args
        .target
        .or(cfg.take_str("target")?)
        .unwrap_or_else(|| "uniform".into());
    let update_text = args
        .update
        .or(cfg.take_str("update")?)
        .unwrap_or_else(|| "sb".into());
    let chunks = match args.chunks {
        v if !v.is_empty() => Some(v),
        _ => cfg.take_str_list("chunks")?,
    };
    let synth = args.synth.or(cfg.take_usize("synth")?);
    let synth_scale = args
        .synth_scale
        .or(cfg.take_f64("synth-scale")?)
        .unwrap_or(1.0);
    let epochs_per_chunk = args
        .epochs_per_chunk
        .or(cfg.take_usize("epochs-per-chunk")?)
        .unwrap_or(1000);
    let epochs_initial = args
        .epochs_initial
        .or(cfg.take_usize("epochs-initial")?)
        .unwrap_or(epochs_per_chunk);
    let audit_path = args.audit.or(cfg.take_str("audit")?);
    let trace_path = args.trace.or(cfg.take_str("trace")?);
    let save_path = args.save.or(cfg.take_str("save")?);
    let config = resolve_train_config(&args.knobs, &mut cfg, epochs_per_chunk)?;
    cfg.finish()?;

    let graph_spec = spec::parse_graph(&graph_text)?;
    let graph = spec::build_graph(&graph_spec)?;
    let prior = spec::build_target(&spec::parse_target(&target_text)?, &graph_spec, &graph)?;
    let update = spec::parse_update(&update_text)?;

    let chunk_list: Vec<StreamChunk> = match (chunks, synth) {
        (Some(paths), None) => paths
            .iter()
            .map(|p| StreamChunk::load(&graph, Path::new(p)))
            .collect::<Result<_>>()?,
        (None, Some(n)) => (1..=n)
            .map(|t| StreamChunk::synthetic(&graph, t, config.seed, synth_scale))
            .collect::<Result<_>>()?,
        (Some(_), Some(_)) => {
            return Err(invalid("--chunks and --synth are mutually exclusive".into()))
        }
        (None, None) => return Err(invalid("need --chunks <files>... or --synth <n>".into())),
    };

    let mut initial_config = config;
    initial_config.epochs = epochs_initial;
    let (mut state, initial_trace) = StreamState::initial(prior, &update, &initial_config)?;
    let mut trace_out = String::from("t,epoch,loss,tv,fcs_mean\n");
    for row in &initial_trace {
        trace_out.push_str(&format!(
            "0,{},{},{},{}\n",
            row.epoch, row.loss, row.tv, row.fcs_mean
        ));
    }

    let mut audits: Vec<AuditRow> = Vec::new();
    for chunk in &chunk_list {
        let prev_policy = state.policy.clone();
        let prev_posterior = state.posterior.clone();
        let (next, trace) = stream_update(&state, chunk, &update, &config)?;
        for row in &trace {
            trace_out.push_str(&format!(
                "{},{},{},{},{}\n",
                next.t, row.epoch, row.loss, row.tv, row.fcs_mean
            ));
        }
        audits.push(propagation_audit(
            &prev_policy,
            &next.policy,
            chunk,
            &prev_posterior,
            &next.posterior,
        )?);
        state = next;
    }

    let final_tv = marginal_tv(&state.policy, &state.posterior);
    let all_hold = audits.iter().all(|a| a.asserted_hold());
    println!(
        "chunks={} final_tv={} audits_hold={}",
        chunk_list.len(),
        f6(final_tv),
        all_hold
    );
    if let Some(path) = trace_path {
        write_out(&path, &trace_out)?;
    }
    if let Some(path) = audit_path {
        write_out(&path, &audit_csv(&audits))?;
    }
    if let Some(path) = save_path {
        state.policy.save(Path::new(&path))?;
    }
    Ok(())
}

// -------------------------------------------------------------- diagnose --

fn load_policy(path: &str, graph: &Arc<StateGraph>) -> Result<TabularPolicy> {
    TabularPolicy::load(graph.clone(), Path::new(path))
}

pub fn run_diagnose_fcs(args: DiagnoseFcsArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let graph_text = require(args.graph.or(cfg.take_str("graph")?), "graph")?;
    let target_text = args
        .target
        .or(cfg.take_str("target")?)
        .unwrap_or_else(|| "uniform".into());
    let policy_path = require(args.policy.or(cfg.take_str("policy")?), "policy")?;
    let b = args.subset_size.or(cfg.take_usize("B")?).unwrap_or(4);
    let m = args.samples.or(cfg.take_usize("m")?).unwrap_or(200);
    let confidence = args
        .confidence
        .or(cfg.take_f64("confidence")?)
        .unwrap_or(0.05);
    let mode_text = args
        .mode
        .or(cfg.take_str("mode")?)
        .unwrap_or_else(|| "exact".into());
    let seed = args.seed.or(cfg.take_u64("seed")?).unwrap_or(0);
    let threads = args.threads.or(cfg.take_usize("threads")?).unwrap_or(1);
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;

    let graph_spec = spec::parse_graph(&graph_text)?;
    let graph = spec::build_graph(&graph_spec)?;
    let target = spec::build_target(&spec::parse_target(&target_text)?, &graph_spec, &graph)?;
    let policy = load_policy(&policy_path, &graph)?;
    let mode = spec::parse_fcs_mode(&mode_text)?;

    let report = fcs(&policy, &target, b, m, confidence, seed, mode, threads)?;
    println!(
        "fcs_mean={} pac_upper={} samples={}",
        f6(report.mean),
        f6(report.pac_upper),
        report.samples
    );
    if let Some(path) = out {
        let json = serde_json::json!({
            "subset_size": report.subset_size,
            "samples": report.samples,
            "mean": report.mean,
            "confidence": report.confidence,
            "pac_upper": report.pac_upper,
            "mode": mode_text,
            "estimator_stderr": report.estimator_stderr,
            "errors": report.errors,
        });
        let text = serde_json::to_string_pretty(&json).expect("report serializes") + "\n";
        write_out(&path, &text)?;
    }
    Ok(())
}

pub fn run_diagnose_dist(args: DiagnoseDistArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let graph_text = require(args.graph.or(cfg.take_str("graph")?), "graph")?;
    let target_text = args
        .target
        .or(cfg.take_str("target")?)
        .unwrap_or_else(|| "uniform".into());
    let policy_path = require(args.policy.or(cfg.take_str("policy")?), "policy")?;
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;

    let graph_spec = spec::parse_graph(&graph_text)?;
    let graph = spec::build_graph(&graph_spec)?;
    let target = spec::build_target(&spec::parse_target(&target_text)?, &graph_spec, &graph)?;
    let policy = load_policy(&policy_path, &graph)?;

    let p_model = exact_marginal(&policy);
    let pi = target.probabilities();
    let tv = total_variation(&p_model, &pi);
    println!("tv={} terminals={}", f6(tv), pi.len());
    if let Some(path) = out {
        let mut csv = String::from("terminal_id,p_model,p_target,abs_diff\n");
        for (pos, &x) in graph.terminals().iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                x,
                p_model[pos],
                pi[pos],
                (p_model[pos] - pi[pos]).abs()
            ));
        }
        write_out(&path, &csv)?;
    }
    Ok(())
}

// -------------------------------------------------------------------- wl --

fn wl_instance(name: &str) -> Result<WlInstance> {
    match name {
        "hetero" => Ok(wl_counterexample()),
        "homo" => Ok(wl_homogeneous()),
        other => Err(invalid(format!(
            "unknown wl target `{other}` (expected hetero | homo)"
        ))),
    }
}

pub fn run_wl_demo(args: WlDemoArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let target_name = require(args.target.or(cfg.take_str("target")?), "target")?;
    let seeds = args.seeds.or(cfg.take_u64("seeds")?).unwrap_or(20);
    let epochs = args.epochs.or(cfg.take_usize("epochs")?).unwrap_or(2500);
    let threads = args.threads.or(cfg.take_usize("threads")?).unwrap_or(1);
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;

    let instance = wl_instance(&target_name)?;
    let floor = min_tv_under_tying(&instance, threads)?.tv;

    let mut csv = String::from("mode,seed,final_tv,floor\n");
    let mut tied_min = f64::INFINITY;
    let mut untied_min = f64::INFINITY;
    for seed in 0..seeds {
        let config = TrainConfig {
            epochs,
            seed,
            eval_every: epochs.max(1),
            threads,
            adam: AdamConfig {
                lr_logits: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let (tied_policy, _) = train_tied(&instance.target, &instance.tying, &config)?;
        let tied_tv = marginal_tv(&tied_policy, &instance.target);
        tied_min = tied_min.min(tied_tv);
        csv.push_str(&format!("tied,{seed},{tied_tv},{floor}\n"));

        let (untied_policy, _) = train(&instance.target, &LossKind::Tb, &config)?;
        let untied_tv = marginal_tv(&untied_policy, &instance.target);
        untied_min = untied_min.min(untied_tv);
        csv.push_str(&format!("untied,{seed},{untied_tv},{floor}\n"));
    }
    println!(
        "floor={} tied_min={} untied_min={}",
        f6(floor),
        f6(tied_min),
        f6(untied_min)
    );
    if let Some(path) = out {
        write_out(&path, &csv)?;
    }
    Ok(())
}

pub fn run_wl_count(args: WlCountArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let n = args.n.or(cfg.take_u64("n")?.map(|v| v as u32)).unwrap_or(12);
    cfg.finish()?;
    println!(
        "labeled={} unlabeled={} ratio={:.6e}",
        labeled_graph_count(n)?,
        unlabeled_graph_count(n)?,
        graph_space_reduction(n)?
    );
    Ok(())
}

// --------------------------------------------------------------- explore --

pub fn run_explore(args: ExploreArgs) -> Result<()> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let graph_text = require(args.graph.or(cfg.take_str("graph")?), "graph")?;
    let epochs = args.epochs.or(cfg.take_usize("epochs")?).unwrap_or(100);
    let cap = args.cap.or(cfg.take_usize("cap")?);
    let trials = args.trials.or(cfg.take_usize("trials")?).unwrap_or(1000);
    let seed = args.seed.or(cfg.take_u64("seed")?).unwrap_or(0);
    let threads = args.threads.or(cfg.take_usize("threads")?).unwrap_or(1);
    let out = args.out.or(cfg.take_str("out")?);
    cfg.finish()?;

    let graph = spec::build_graph(&spec::parse_graph(&graph_text)?)?;
    let report = exploration_coverage(&graph, epochs, cap, trials, seed, threads)?;
    println!(
        "states={} trials={} mean_visited={}",
        report.num_states,
        report.trials,
        f6(report.mean_visited)
    );
    if let Some(path) = out {
        let mut csv = String::from("s,threshold,empirical,bound,vacuous\n");
        for row in &report.rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.s, row.threshold, row.empirical, row.bound, row.vacuous
            ));
        }
        write_out(&path, &csv)?;
    }
    Ok(())
}
