use std::io;

use repro::cli::{docker_engine_factory, run_cli, CliContext};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("REPRO_LOG", "warn")).init();
    let ctx = CliContext::new(docker_engine_factory());
    let code = run_cli(std::env::args_os(), &ctx, &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
