mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::Ctx;

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.f64 {
        batkit::set_precision(batkit::Precision::F64);
    }
    let ctx = Ctx {
        manifest: cli.manifest,
    };
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &ctx),
        Command::Pretrain(a) => commands::pretrain(a, &ctx),
        Command::Instruct(a) => commands::instruct(a, &ctx),
        Command::RewardTrain(a) => commands::reward_train(a, &ctx),
        Command::Ppo(a) => commands::ppo(a, &ctx),
        Command::Expand(a) => commands::expand(a, &ctx),
        Command::Stack(a) => commands::stack(a, &ctx),
        Command::ProgStack(a) => commands::prog_stack(a, &ctx),
        Command::Verify(a) => commands::verify(a, &ctx),
        Command::Eval(a) => commands::eval(a, &ctx),
        Command::Sample(a) => commands::sample(a, &ctx),
        Command::Serve(a) => commands::serve(a, &ctx),
        Command::AiFeedback(a) => commands::ai_feedback_cmd(a, &ctx),
    }
}

/// Error kind for the structured report on stderr.
fn kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(b) = cause.downcast_ref::<batkit::Error>() {
            return match b {
                batkit::Error::Contract(_) => "contract",
                batkit::Error::Length { .. } => "length",
                batkit::Error::Vocab { .. } => "vocab",
                batkit::Error::OracleInvalid(_) => "oracle",
                batkit::Error::Format(_) | batkit::Error::Json(_) => "format",
                batkit::Error::Config(_) => "config",
                batkit::Error::NonFinite { .. } => "non_finite",
                batkit::Error::Corrupt(_) | batkit::Error::Version(_) => "checkpoint",
                batkit::Error::Io { .. } => "io",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
    }
    "validation"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "command": command,
                "kind": kind(&e),
                "error": format!("{e:#}"),
            });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
