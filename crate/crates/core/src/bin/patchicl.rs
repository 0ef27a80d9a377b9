fn main() {
    std::process::exit(patchicl::cli::main());
}
