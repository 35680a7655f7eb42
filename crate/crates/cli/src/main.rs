use clap::Parser;

fn main() {
    let cli = unipre3d_cli::Cli::parse();
    let stdout = std::io::stdout();
    if let Err(err) = unipre3d_cli::run(&cli, &mut stdout.lock()) {
        eprintln!("error: {err:#}");
        std::process::exit(unipre3d_cli::exit_code(&err));
    }
}
