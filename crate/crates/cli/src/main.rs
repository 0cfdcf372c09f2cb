use std::process::ExitCode;

use clap::Parser;
use miv_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.execute().and_then(|r| cli.write(&r).map(|()| r));
    match result {
        Ok(r) => {
            print!("{}", r.text);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("miv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
