use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use hextraj_cli::config::KEYS;
use hextraj_cli::{commands, CliError, RunConfig};

fn cli() -> Command {
    let mut common = vec![Arg::new("config")
        .long("config")
        .short('c')
        .value_name("FILE")
        .help("key=value configuration file; flags override it")];
    for (key, help) in KEYS {
        common.push(Arg::new(*key).long(*key).value_name("VALUE").help(*help));
    }
    let prefix = Arg::new("prefix")
        .long("prefix")
        .required(true)
        .value_name("CELLS")
        .help("space-separated cell tokens, oldest first");
    Command::new("hextraj")
        .about("Hexagon-sequence trajectory prediction pipeline")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(Command::new("ingest").about("Tessellate, filter, split and tokenize raw GPS data").args(common.clone()))
        .subcommand(Command::new("train").about("Train the transformer on the ingested dataset").args(common.clone()))
        .subcommand(
            Command::new("predict")
                .about("Beam-search the next blocks after a prefix")
                .args(common.clone())
                .arg(prefix.clone()),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Score the checkpoint on the test split")
                .args(common.clone())
                .arg(
                    Arg::new("markov")
                        .long("markov")
                        .action(ArgAction::SetTrue)
                        .help("also evaluate a first-order Markov baseline"),
                ),
        )
        .subcommand(Command::new("hiermap").about("Build a density-driven mixed-resolution map").args(common.clone()))
        .subcommand(
            Command::new("attention")
                .about("Dump attention weights for a prefix")
                .args(common)
                .arg(prefix)
                .arg(
                    Arg::new("layer")
                        .long("layer")
                        .value_parser(clap::value_parser!(usize))
                        .help("layer index (default: last)"),
                ),
        )
}

fn config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(&PathBuf::from(p))?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(m: &ArgMatches) -> Result<String, CliError> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = config(sub)?;
    let prefix = || sub.get_one::<String>("prefix").map_or("", String::as_str);
    match name {
        "ingest" => commands::ingest(&cfg),
        "train" => commands::train_cmd(&cfg),
        "predict" => commands::predict(&cfg, prefix()),
        "evaluate" => commands::evaluate_cmd(&cfg, sub.get_flag("markov")),
        "hiermap" => commands::hiermap_cmd(&cfg),
        "attention" => commands::attention(&cfg, prefix(), sub.get_one::<usize>("layer").copied()),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
