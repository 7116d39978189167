use clap::Parser;
use orthodistill::cli::{dispatch, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ORTHODISTILL_LOG", "warn")).init();
    std::process::exit(dispatch(Cli::parse()));
}
