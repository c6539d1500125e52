use clap::Parser;

fn main() {
    let cli = karst::cli::Cli::parse();
    std::process::exit(karst::cli::run(cli));
}
