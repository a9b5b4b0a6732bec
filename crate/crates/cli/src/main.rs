use clap::Parser;

fn main() {
    let cli = vdn_cli::Cli::parse();
    let code = match vdn_cli::run(cli) {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            vdn_cli::EXIT_FAILURE
        }
    };
    std::process::exit(code);
}
