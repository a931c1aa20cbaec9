use clap::error::ErrorKind;
use clap::Parser;
use glimpsekit_cli::{args::Cli, exit_code, init_threads, run, EXIT_USAGE};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            std::process::exit(code);
        }
    };
    let code = init_threads().and_then(|()| run(cli)).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    });
    std::process::exit(code);
}
