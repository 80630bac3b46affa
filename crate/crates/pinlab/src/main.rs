use std::process::ExitCode;

fn main() -> ExitCode {
    pinlab::cli::main_with(std::env::args_os())
}
