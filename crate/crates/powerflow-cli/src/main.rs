fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(powerflow_cli::run(&argv));
}
