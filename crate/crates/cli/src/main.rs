use clap::Parser;

use stimplan_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        if e.issues.len() > 1 {
            for issue in &e.issues {
                eprintln!("  {issue}");
            }
        }
        std::process::exit(e.exit_code());
    }
}
