use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mfg_core::cli::run(std::env::args_os()))
}
