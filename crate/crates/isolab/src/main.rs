use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(isolab::cli::run(std::env::args_os()) as u8)
}
