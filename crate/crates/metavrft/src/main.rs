fn main() {
    std::process::exit(metavrft::cli::run());
}
