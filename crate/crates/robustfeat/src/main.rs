fn main() {
    std::process::exit(robustfeat::cli::main_with(std::env::args_os()));
}
