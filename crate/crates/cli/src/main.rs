use clap::Parser;

// The bench subcommand reports allocator peaks; counting only happens in
// binaries that register the instrumented allocator.
#[global_allocator]
static ALLOC: hgconv_core::telemetry::CountingAlloc = hgconv_core::telemetry::CountingAlloc;

fn main() {
    let cli = hgconv_cli::Cli::parse();
    if let Err(e) = hgconv_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
