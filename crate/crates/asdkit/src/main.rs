use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(asdkit::cli::run_cli(std::env::args()))
}
