use clap::Parser;

fn main() {
    let cli = koa_cli::Cli::parse();
    match koa_cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
