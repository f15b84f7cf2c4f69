use clap::Parser;

use svpatch::cli::{self, Cli};

fn main() {
    let args = match Cli::try_parse() {
        Ok(args) => args,
        Err(e) => {
            // help/version requests exit 0; usage errors are config errors
            if e.use_stderr() {
                e.print().ok();
                std::process::exit(cli::EXIT_CONFIG as i32);
            }
            e.print().ok();
            std::process::exit(0);
        }
    };
    std::process::exit(cli::run(args) as i32);
}
