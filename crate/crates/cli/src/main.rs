use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cwdm_cli::run(std::env::args_os()))
}
