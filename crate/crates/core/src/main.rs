fn main() {
    std::process::exit(ctxpatch::cli::main_with_args(std::env::args_os()));
}
