use clap::Parser;
use regtrace::cli::{configure_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    let code = match configure_threads().and_then(|()| run(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
