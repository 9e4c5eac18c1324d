use clap::Parser;

fn main() -> anyhow::Result<()> {
    georef_cli::run(georef_cli::Cli::parse())
}
