fn main() {
    env_logger::init();
    std::process::exit(protoadapt::cli::cli_main(std::env::args_os()));
}
