fn main() {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = embedit_cli::run(std::env::args_os(), &mut stdout) {
        eprintln!("{}", e.to_line());
        std::process::exit(e.exit_code);
    }
}
