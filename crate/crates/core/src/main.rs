fn main() -> std::process::ExitCode {
    oreo::cli::main()
}
