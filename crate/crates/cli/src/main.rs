//! `acf`: counterfactual inference over black-box language-model policies.
//!
//! Five subcommands cover the working loop: `query` answers a single
//! counterfactual question, `eval` runs a manifest of paired queries and
//! scores both estimators, `verify` checks the engine's invariants on
//! bundled fixtures, `scenes` generates synthetic corpora, and `discover`
//! elicits an abstraction space from behavior samples. Every output embeds provenance:
//! tool version, configuration hash, seeds, and input fixture hashes.

mod cmd_discover;
mod cmd_eval;
mod cmd_query;
mod cmd_scenes;
mod cmd_verify;
mod config;
mod error;
mod providers;
mod report;

use clap::{Parser, Subcommand};

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  a verification or evaluation check failed
  2  invalid arguments or configuration
  3  a provider (network or fixture) failure
  4  an inference failure
  5  an unparseable provider response
  6  missing or rejected credentials";

#[derive(Parser)]
#[command(
    name = "acf",
    version,
    about = "Counterfactual inference for language-model agents",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one counterfactual query.
    Query(cmd_query::QueryArgs),
    /// Run a manifest of paired queries and score both estimators.
    Eval(cmd_eval::EvalArgs),
    /// Check engine invariants against bundled fixtures.
    Verify(cmd_verify::VerifyArgs),
    /// Generate a synthetic scene corpus with a matching manifest.
    Scenes(cmd_scenes::ScenesArgs),
    /// Discover an abstraction space from behavior samples.
    Discover(cmd_discover::DiscoverArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Query(args) => cmd_query::run(args),
        Command::Eval(args) => cmd_eval::run(args),
        Command::Verify(args) => cmd_verify::run(args),
        Command::Scenes(args) => cmd_scenes::run(args),
        Command::Discover(args) => cmd_discover::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_command_tree_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn the_help_text_documents_exit_codes() {
        use clap::CommandFactory;
        let help = Cli::command().render_long_help().to_string();
        for code in ["0  success", "6  missing or rejected credentials"] {
            assert!(help.contains(code), "missing {code:?} in:\n{help}");
        }
    }
}
