fn main() {
    std::process::exit(cfexplain::cli::run());
}
