use std::process::ExitCode;

fn main() -> ExitCode {
    cellscout::cli::run(std::env::args_os())
}
