use clap::Parser;

fn main() {
    let cli = cccharts_cli::commands::Cli::parse();
    std::process::exit(cccharts_cli::commands::run(cli));
}
