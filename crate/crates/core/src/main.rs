fn main() -> std::process::ExitCode {
    recyclegan::cli::main()
}
