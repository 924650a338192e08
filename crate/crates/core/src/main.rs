fn main() {
    std::process::exit(detcal::cli::dispatch(std::env::args_os()));
}
