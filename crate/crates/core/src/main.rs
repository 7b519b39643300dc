use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(wsn_dejitter::cli::main_with(std::env::args_os()))
}
