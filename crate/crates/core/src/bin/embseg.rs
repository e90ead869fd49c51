fn main() -> std::process::ExitCode {
    embseg::cli::main()
}
