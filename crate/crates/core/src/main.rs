fn main() -> std::process::ExitCode {
    biasprompt::cli::main()
}
