use embspace_core::cli::{run_command, CliError, THREADS_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not set thread count: {e}");
                }
            }
            _ => log::warn!("ignoring {THREADS_ENV}={v}: expected a positive integer"),
        }
    }

    match run_command(std::env::args_os()) {
        Ok(report) => {
            println!("{}", report.to_json().unwrap_or_default());
        }
        Err(err) => {
            let code = err.exit_code();
            match err {
                CliError::Usage(e) => {
                    let _ = e.print();
                }
                CliError::Run(e) => {
                    let line = serde_json::json!({
                        "error": e.code(),
                        "message": e.to_string(),
                        "exit_code": code,
                    });
                    eprintln!("{line}");
                }
            }
            std::process::exit(code);
        }
    }
}
