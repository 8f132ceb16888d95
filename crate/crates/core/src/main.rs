fn main() {
    let code = bronchonav::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
