fn main() {
    let code = jlab_cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
