use clap::Parser;

use prior_forge::cli::{self, Cli};

fn main() {
    cli::configure_threads();
    let parsed = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests exit 0; genuine usage errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match cli::run(parsed) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
