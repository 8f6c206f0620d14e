use std::process::exit;

fn main() {
    exit(ldmrb::cli::run(std::env::args_os()));
}
