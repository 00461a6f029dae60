use std::process::ExitCode;

use clap::Parser;
use reid_cli::{commands, Cli, Command};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // clap's own usage-error status (2) would read as a partial failure
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::error!("{e}");
            return ExitCode::from(1);
        }
    }
    let result = commands::load_config(cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::Extract(a) => commands::extract(&cfg, a),
        Command::Saliency(a) => commands::saliency(&cfg, a),
        Command::Match(a) => commands::match_cmd(&cfg, a),
        Command::Train(a) => commands::train_cmd(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::ExportWeights(a) => commands::export_weights(&cfg, a),
        Command::AnnotateServe(a) => commands::annotate_serve(&cfg, a),
        Command::Synth(a) => commands::synth(a),
    });
    match result {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(1)
        }
    }
}
