fn main() {
    std::process::exit(fcx_lab::cli::run(std::env::args_os()));
}
