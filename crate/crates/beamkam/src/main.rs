fn main() {
    std::process::exit(beamkam::cli::run(std::env::args_os()));
}
