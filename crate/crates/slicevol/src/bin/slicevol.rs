fn main() {
    std::process::exit(slicevol::cli::run());
}
