use clap::Parser;
use msreg_cli::{run, Cli, RunConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = RunConfig::from_cli(Cli::parse()).and_then(|cfg| run(&cfg));
    match result {
        Ok(summary) => {
            for p in &summary.artifacts {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
