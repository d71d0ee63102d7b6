fn main() {
    std::process::exit(thematic::workbench::cli::run(std::env::args_os()));
}
