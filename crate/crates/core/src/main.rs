fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TDISAGG_LOG", "warn")).init();
    std::process::exit(tdisagg::cli::run(std::env::args_os()));
}
