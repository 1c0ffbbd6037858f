fn main() -> std::process::ExitCode {
    sika_link::main_with_args(std::env::args_os())
}
