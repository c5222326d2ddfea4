//! `negograph` command-line tool. Usage errors exit 2, runtime failures exit 1.

mod args;
mod commands;
mod interactive;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
        Command::Synth(a) => commands::synth(a),
        Command::Chat(a) => interactive::chat(a),
        Command::Serve(a) => interactive::serve(a),
    };
    if let Err(e) = result {
        eprintln!("negograph: error: {e:#}");
        std::process::exit(1);
    }
}
