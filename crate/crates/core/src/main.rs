fn main() {
    std::process::exit(geotdm::cli::run_cli(std::env::args_os()));
}
