fn main() {
    // Die quietly on a closed pipe (`seal tags similarity f | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(seal_cli::run(std::env::args_os()));
}
