use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(episodica::cli::run(std::env::args()) as u8)
}
