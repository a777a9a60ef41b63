use clap::error::ErrorKind;
use clap::Parser;
use psttl_cli::{run, Cli, Failure};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let f = Failure::new("usage", first);
            eprintln!("{}", f.to_line());
            std::process::exit(f.exit_code());
        }
    };
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(f) => {
            eprintln!("{}", f.to_line());
            std::process::exit(f.exit_code());
        }
    }
}
