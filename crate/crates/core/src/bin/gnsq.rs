fn main() {
    eprintln!("gnsq: command-line interface not wired up yet");
    std::process::exit(1);
}
