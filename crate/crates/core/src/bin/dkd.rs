fn main() -> std::process::ExitCode {
    deltakd::cli::main()
}
