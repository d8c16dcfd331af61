fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEMATCH_LOG", "warn")).init();
    let code = mematch_cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
