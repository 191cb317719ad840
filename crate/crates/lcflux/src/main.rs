use std::process::ExitCode;

fn main() -> ExitCode {
    lcflux::cli::run()
}
