use clap::Parser;

fn main() {
    let cli = dephasim_cli::Cli::parse();
    match dephasim_cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("{err}");
            std::process::exit(err.code());
        }
    }
}
