use clap::Parser;

fn main() {
    let cli = match hoi_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 2 } else { 0 });
        }
    };
    std::process::exit(hoi_cli::main_with(cli));
}
