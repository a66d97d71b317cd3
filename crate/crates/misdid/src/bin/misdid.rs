fn main() {
    std::process::exit(misdid::cli::run());
}
