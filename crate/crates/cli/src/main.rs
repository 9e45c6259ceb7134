use clap::Parser;

use compost_cli::{exit, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    if let Ok(threads) = std::env::var("COMPOST_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                // Only fails if a pool already exists, which cannot happen here.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("compost: COMPOST_THREADS must be a positive integer, got {threads:?}");
                std::process::exit(exit::USAGE);
            }
        }
    }

    if let Err(e) = run(cli) {
        eprintln!("compost: {e}");
        std::process::exit(e.exit_code());
    }
}
