use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("JCR_LOG", "info")).init();
    std::process::exit(jcr_cli::main_with_args(std::env::args_os()));
}
