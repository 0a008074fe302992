fn main() {
    std::process::exit(gridrun_core::worker::serve_stdio());
}
