fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(vulnkit::cli::execute_command(&argv));
}
