use clap::Parser;

fn main() {
    let cli = pfpp_cli::Cli::parse();
    match pfpp_cli::run(&cli) {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
