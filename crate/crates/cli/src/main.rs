use clap::Parser;
use tvl_cli::{run_cli, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run_cli(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
