use clap::Parser;

use agglo::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    if args.threads > 0 {
        // Ignore the error if a pool already exists (only possible in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global();
    }
    if let Err(err) = cli::run(args) {
        eprintln!("error: {err:#}");
        std::process::exit(cli::exit_code(&err));
    }
}
