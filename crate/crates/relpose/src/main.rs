fn main() {
    std::process::exit(relpose::cli::run());
}
