//! Parsers for the compact `kind:key=value,...` argument language used by
//! `--graph`, `--target`, `--loss`, `--update`, `--split` and `--edge`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use gfnlab_core::diagnostics::MarginalMode;
use gfnlab_core::error::{Error, Result};
use gfnlab_core::graph::{
    build_regular_tree_capped, build_set_graph_capped, capacity_from_env, load_graph,
};
use gfnlab_core::sensitivity::SplitRule;
use gfnlab_core::stream::UpdateKind;
use gfnlab_core::target::TargetDistribution;
use gfnlab_core::train::{LossKind, Td3Direction};
use gfnlab_core::{StateGraph, StateId};

fn invalid(msg: String) -> Error {
    Error::InvalidArg(msg)
}

/// Splits `kind:key=value,key=value` into the kind and a key/value map.
/// A bare `kind` yields an empty map.
fn split_spec(text: &str) -> Result<(&str, BTreeMap<&str, &str>)> {
    let (kind, rest) = match text.split_once(':') {
        Some((k, r)) => (k, r),
        None => (text, ""),
    };
    let mut map = BTreeMap::new();
    if !rest.is_empty() {
        for part in rest.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| invalid(format!("expected key=value, got `{part}` in `{text}`")))?;
            if map.insert(key, value).is_some() {
                return Err(invalid(format!("duplicate key `{key}` in `{text}`")));
            }
        }
    }
    Ok((kind, map))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("cannot parse `{key}={value}`")))
}

fn take_num<T: std::str::FromStr>(map: &mut BTreeMap<&str, &str>, key: &str) -> Result<Option<T>> {
    map.remove(key).map(|v| parse_num(key, v)).transpose()
}

fn require_num<T: std::str::FromStr>(
    map: &mut BTreeMap<&str, &str>,
    key: &str,
    spec: &str,
) -> Result<T> {
    take_num(map, key)?.ok_or_else(|| invalid(format!("`{spec}` spec needs `{key}=`")))
}

fn reject_leftovers(map: &BTreeMap<&str, &str>, what: &str) -> Result<()> {
    if let Some(key) = map.keys().next() {
        return Err(invalid(format!("unknown key `{key}` in {what} spec")));
    }
    Ok(())
}

/// A parsed `--graph` argument; building is deferred so the same spec can
/// also parameterize targets (the product target needs d and S).
#[derive(Debug, Clone)]
pub enum GraphSpec {
    Tree { g: u32, h: u32 },
    Set { d: u32, s: u32 },
    Custom { path: String },
}

pub fn parse_graph(text: &str) -> Result<GraphSpec> {
    let (kind, mut map) = split_spec(text)?;
    let spec = match kind {
        "tree" => GraphSpec::Tree {
            g: require_num(&mut map, "g", "tree")?,
            h: require_num(&mut map, "h", "tree")?,
        },
        "set" => GraphSpec::Set {
            d: require_num(&mut map, "d", "set")?,
            s: require_num(&mut map, "S", "set")?,
        },
        "custom" => {
            // everything after the colon is the path, verbatim
            let path = text
                .split_once(':')
                .map(|(_, p)| p)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| invalid("`custom` graph spec needs a path".into()))?;
            return Ok(GraphSpec::Custom { path: path.into() });
        }
        other => {
            return Err(invalid(format!(
                "unknown graph kind `{other}` (expected tree | set | custom)"
            )))
        }
    };
    reject_leftovers(&map, "graph")?;
    Ok(spec)
}

pub fn build_graph(spec: &GraphSpec) -> Result<Arc<StateGraph>> {
    let guard = capacity_from_env();
    let graph = match spec {
        GraphSpec::Tree { g, h } => build_regular_tree_capped(*g, *h, guard)?,
        GraphSpec::Set { d, s } => build_set_graph_capped(*d, *s, guard)?,
        GraphSpec::Custom { path } => load_graph(Path::new(path), guard)?,
    };
    Ok(Arc::new(graph))
}

/// A parsed `--target` argument.
#[derive(Debug, Clone)]
pub enum TargetSpec {
    Uniform,
    KModes {
        k: usize,
        r: f64,
        /// Explicit mode states; defaults to the first k terminals.
        modes: Option<Vec<StateId>>,
    },
    Product {
        seed: u64,
        alpha: f64,
    },
}

pub fn parse_target(text: &str) -> Result<TargetSpec> {
    let (kind, mut map) = split_spec(text)?;
    let spec = match kind {
        "uniform" => TargetSpec::Uniform,
        "kmodes" => {
            let k = require_num(&mut map, "k", "kmodes")?;
            let r = require_num(&mut map, "r", "kmodes")?;
            let modes = match map.remove("modes") {
                Some(list) => Some(
                    list.split(';')
                        .map(|v| parse_num("modes", v))
                        .collect::<Result<Vec<StateId>>>()?,
                ),
                None => None,
            };
            TargetSpec::KModes { k, r, modes }
        }
        "product" => TargetSpec::Product {
            seed: require_num(&mut map, "seed", "product")?,
            alpha: take_num(&mut map, "alpha")?.unwrap_or(1.0),
        },
        other => {
            return Err(invalid(format!(
                "unknown target kind `{other}` (expected uniform | kmodes | product)"
            )))
        }
    };
    reject_leftovers(&map, "target")?;
    Ok(spec)
}

pub fn build_target(
    spec: &TargetSpec,
    graph_spec: &GraphSpec,
    graph: &Arc<StateGraph>,
) -> Result<TargetDistribution> {
    match spec {
        TargetSpec::Uniform => Ok(TargetDistribution::uniform(graph.clone())),
        TargetSpec::KModes { k, r, modes } => {
            let modes: Vec<StateId> = match modes {
                Some(m) => m.clone(),
                None => {
                    if *k == 0 || *k > graph.num_terminals() {
                        return Err(invalid(format!(
                            "kmodes k={k} does not fit {} terminals",
                            graph.num_terminals()
                        )));
                    }
                    graph.terminals()[..*k].to_vec()
                }
            };
            if modes.len() != *k {
                return Err(invalid(format!(
                    "kmodes k={k} but {} modes listed",
                    modes.len()
                )));
            }
            TargetDistribution::k_modes(graph.clone(), &modes, *r)
        }
        TargetSpec::Product { seed, alpha } => match graph_spec {
            GraphSpec::Set { d, s } => {
                TargetDistribution::set_product_seeded(graph.clone(), *d, *s, *seed, *alpha)
            }
            _ => Err(invalid(
                "product targets are defined on `set:` graphs only".into(),
            )),
        },
    }
}

pub fn parse_loss(text: &str) -> Result<LossKind> {
    let (kind, mut map) = split_spec(text)?;
    let loss = match kind {
        "tb" => LossKind::Tb,
        "db" => LossKind::Db,
        "subtb" => LossKind::SubTb {
            lambda: require_num(&mut map, "lambda", "subtb")?,
        },
        "td3" => {
            let beta0 = require_num(&mut map, "beta0", "td3")?;
            let anneal_epochs = require_num(&mut map, "anneal", "td3")?;
            let direction = match map.remove("direction") {
                None | Some("upstream") => Td3Direction::Upstream,
                Some("downstream") => Td3Direction::Downstream,
                Some(other) => {
                    return Err(invalid(format!(
                        "unknown td3 direction `{other}` (expected upstream | downstream)"
                    )))
                }
            };
            LossKind::Td3 {
                beta0,
                anneal_epochs,
                direction,
            }
        }
        other => {
            return Err(invalid(format!(
                "unknown loss `{other}` (expected tb | db | subtb | td3)"
            )))
        }
    };
    reject_leftovers(&map, "loss")?;
    loss.validate()?;
    Ok(loss)
}

pub fn parse_update(text: &str) -> Result<UpdateKind> {
    let (kind, mut map) = split_spec(text)?;
    let update = match kind {
        "sb" => UpdateKind::Sb,
        "kl" => UpdateKind::Kl {
            k: require_num(&mut map, "k", "kl")?,
        },
        other => {
            return Err(invalid(format!(
                "unknown update `{other}` (expected sb | kl)"
            )))
        }
    };
    reject_leftovers(&map, "update")?;
    update.validate()?;
    Ok(update)
}

/// `--split equal | concentrated[:x=<terminal>] | dirichlet:alpha=<a>`;
/// the Dirichlet draw is keyed by `seed`. A concentrated split without an
/// explicit terminal lands on the least likely terminal reachable from the
/// imbalanced edge's head.
pub fn parse_split(
    text: &str,
    seed: u64,
    target: &TargetDistribution,
    edge_head: StateId,
) -> Result<SplitRule> {
    let (kind, mut map) = split_spec(text)?;
    let rule = match kind {
        "equal" => SplitRule::Equal,
        "concentrated" => {
            let terminal = match take_num(&mut map, "x")? {
                Some(x) => x,
                None => least_likely_reachable(target, edge_head)?,
            };
            SplitRule::Concentrated { terminal }
        }
        "dirichlet" => SplitRule::Dirichlet {
            alpha: require_num(&mut map, "alpha", "dirichlet")?,
            seed,
        },
        other => {
            return Err(invalid(format!(
                "unknown split `{other}` (expected equal | concentrated | dirichlet)"
            )))
        }
    };
    reject_leftovers(&map, "split")?;
    Ok(rule)
}

fn least_likely_reachable(target: &TargetDistribution, head: StateId) -> Result<StateId> {
    let graph = target.graph();
    let pi = target.probabilities();
    graph
        .reachable_terminals(head)
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let pa = pi[graph.terminal_index(a).unwrap()];
            let pb = pi[graph.terminal_index(b).unwrap()];
            pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
        })
        .ok_or_else(|| invalid(format!("state {head} reaches no terminal")))
}

pub fn parse_fcs_mode(text: &str) -> Result<MarginalMode> {
    let (kind, mut map) = split_spec(text)?;
    let mode = match kind {
        "exact" => MarginalMode::Exact,
        "importance" => MarginalMode::Importance {
            k: require_num(&mut map, "k", "importance")?,
        },
        other => {
            return Err(invalid(format!(
                "unknown marginal mode `{other}` (expected exact | importance)"
            )))
        }
    };
    reject_leftovers(&map, "mode")?;
    Ok(mode)
}

/// `--edge root:0` or `--edge <state>:<child-slot>`: the imbalanced edge is
/// the slot-th child edge out of the named state.
pub fn parse_edge(text: &str, graph: &StateGraph) -> Result<(StateId, StateId)> {
    let (state, slot) = text
        .split_once(':')
        .ok_or_else(|| invalid(format!("expected <state>:<child-slot>, got `{text}`")))?;
    let u: StateId = if state == "root" {
        graph.initial()
    } else {
        parse_num("edge state", state)?
    };
    if u >= graph.num_states() {
        return Err(Error::UnknownState(u));
    }
    let slot: usize = parse_num("edge child-slot", slot)?;
    let children = graph.children(u);
    if slot >= children.len() {
        return Err(invalid(format!(
            "state {u} has {} children, slot {slot} does not exist",
            children.len()
        )));
    }
    Ok((u, children[slot]))
}
