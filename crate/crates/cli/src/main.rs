fn main() {
    env_logger::init();
    std::process::exit(ac3d_cli::dispatch(std::env::args_os()));
}
