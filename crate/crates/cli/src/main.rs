fn main() {
    std::process::exit(gdds::cli::dispatch(std::env::args_os()));
}
