use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(uodlab::cli::main_from_args(std::env::args_os()))
}
