fn main() {
    std::process::exit(diva::cli::run());
}
