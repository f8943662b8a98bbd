fn main() {
    std::process::exit(jnpl::cli::run());
}
