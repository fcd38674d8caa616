use std::process::ExitCode;

fn main() -> ExitCode {
    match qa4prf::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
