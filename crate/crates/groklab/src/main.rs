use groklab::cli;

fn main() {
    std::process::exit(cli::run());
}
