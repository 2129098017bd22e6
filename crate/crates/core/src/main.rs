fn main() {
    std::process::exit(dfa::run_cli());
}
