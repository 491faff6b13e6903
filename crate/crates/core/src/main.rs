fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    std::process::exit(ltaug::cli::run_cli(std::env::args_os()));
}
