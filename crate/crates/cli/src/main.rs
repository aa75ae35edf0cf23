use clap::Parser;
use zia_cli::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("zia: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
