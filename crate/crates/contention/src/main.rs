fn main() {
    std::process::exit(contention::cli::run());
}
