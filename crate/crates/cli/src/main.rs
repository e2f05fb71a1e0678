use clap::Parser;

fn main() {
    let cli = match fakd_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { fakd_cli::EXIT_USAGE } else { fakd_cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(fakd_cli::run(cli));
}
