use clap::Parser;
use keratome_cli::commands::{run, Command, Common};

#[derive(Parser, Debug)]
#[command(name = "keratome", version, about = "Cataract-incision simulator, trainer and demonstration tools")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command, &cli.common, &argv) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
