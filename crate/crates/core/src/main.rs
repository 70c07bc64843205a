fn main() {
    std::process::exit(pmean::harness::cli_main());
}
