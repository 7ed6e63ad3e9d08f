//! Binary shell; argument parsing and all work live in [`condiff::cli`].

fn main() -> std::process::ExitCode {
    condiff::cli::run()
}
