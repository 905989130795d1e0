fn main() {
    if let Err(e) = dyndiff::cli::main_entry() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
