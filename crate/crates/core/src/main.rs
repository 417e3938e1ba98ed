fn main() {
    std::process::exit(ge2ae::cli::dispatch(std::env::args_os()));
}
