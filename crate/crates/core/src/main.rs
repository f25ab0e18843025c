fn main() -> std::process::ExitCode {
    agg_dst::cli::main()
}
