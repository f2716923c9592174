fn main() {
    env_logger::init();
    std::process::exit(wbplan::cli::dispatch(std::env::args_os()));
}
