fn main() {
    std::process::exit(maskrecon::cli::run());
}
