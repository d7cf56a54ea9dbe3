fn main() {
    std::process::exit(damm_ds_cli::run(std::env::args_os()));
}
