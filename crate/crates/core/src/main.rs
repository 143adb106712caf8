fn main() {
    std::process::exit(specvox::run_cli());
}
