fn main() {
    eprintln!("ecodrive: command-line interface not yet wired up");
    std::process::exit(2);
}
