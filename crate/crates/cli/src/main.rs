mod args;
mod commands;
mod config;
mod spec;

use args::{Cli, Cmd, DiagnoseCmd, GraphCmd, WlCmd};
use clap::Parser;

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Graph { cmd } => match cmd {
            GraphCmd::Build(a) => commands::run_graph_build(a),
            GraphCmd::Info(a) => commands::run_graph_info(a),
            GraphCmd::Dot(a) => commands::run_graph_dot(a),
        },
        Cmd::Sensitivity(a) => commands::run_sensitivity(a),
        Cmd::Train(a) => commands::run_train(a),
        Cmd::Stream(a) => commands::run_stream(a),
        Cmd::Diagnose { cmd } => match cmd {
            DiagnoseCmd::Fcs(a) => commands::run_diagnose_fcs(a),
            DiagnoseCmd::Dist(a) => commands::run_diagnose_dist(a),
        },
        Cmd::Wl { cmd } => match cmd {
            WlCmd::Demo(a) => commands::run_wl_demo(a),
            WlCmd::Count(a) => commands::run_wl_count(a),
        },
        Cmd::Explore(a) => commands::run_explore(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 2 } else { 1 });
    }
}
