use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = mdlm::cli::Cli::parse();
    mdlm::cli::run(cli)
}
