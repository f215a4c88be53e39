mod args;
mod commands;
mod config;
mod manifest;
mod measurements;

use std::process::ExitCode;

use args::{Cli, Command};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (cli, argv) = match config::parse_with_config(argv) {
        Ok(x) => x,
        Err(e) => {
            // clap prints help and version to stdout with status 0.
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_logging(cli.verbose);
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(cgnnse::ExitKind::Input.code() as u8);
    }
    match run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_kind().code() as u8)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn init_threads(threads: Option<usize>) -> Result<(), String> {
    if let Some(n) = threads {
        if n == 0 {
            return Err("--threads must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run(cli: &Cli, argv: &[String]) -> Result<(), cgnnse::Error> {
    match &cli.command {
        Command::Datagen(a) => commands::datagen(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Estimate(a) => commands::estimate(a, argv),
        Command::Study(a) => commands::study(a, argv),
        Command::Certify(a) => commands::certify(a, argv),
        Command::Inspect(a) => commands::inspect(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{CommandFactory, Parser};

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_examples() {
        let c = Cli::try_parse_from(["cgnnse", "datagen", "--case", "ieee14", "--pmu", "1,2,6", "--count", "100", "--seed", "7", "--out", "d"]).unwrap();
        match c.command {
            Command::Datagen(a) => {
                assert_eq!(a.count, 100);
                assert_eq!(a.seed, 7);
                assert_eq!(a.pmu, "1,2,6");
            }
            _ => panic!(),
        }
        assert!(Cli::try_parse_from(["cgnnse", "study", "fig12", "--dataset", "x", "--out", "o"]).is_err());
    }
}
