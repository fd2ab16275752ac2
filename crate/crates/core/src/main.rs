fn main() -> std::process::ExitCode {
    umeml::cli::main_with(std::env::args_os())
}
