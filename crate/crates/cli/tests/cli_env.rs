//! GDDS_WORKERS environment handling, isolated in its own test binary
//! because the variable is process-global state.

use gdds::cli::dispatch;

fn run(args: &[&str]) -> i32 {
    dispatch(args.iter().copied())
}

#[test]
fn gdds_workers_overrides_flags_and_config() {
    let dir = tempfile::tempdir().expect("tempdir");
    let base = dir.path().join("base.jsonl");
    let env_run = dir.path().join("env.jsonl");
    let noise = |out: &std::path::Path| -> i32 {
        run(&[
            "gdds",
            "noise",
            "--kernel",
            "uniform",
            "--m",
            "5",
            "--qdata",
            "1,1,1,1,1",
            "--count",
            "6",
            "--length",
            "12",
            "--seed",
            "2",
            "--workers",
            "1",
            "--out",
            out.to_str().expect("utf8"),
        ])
    };

    std::env::remove_var("GDDS_WORKERS");
    assert_eq!(noise(&base), 0);

    // A valid override changes the pool size but not the output.
    std::env::set_var("GDDS_WORKERS", "2");
    assert_eq!(noise(&env_run), 0);
    assert_eq!(
        std::fs::read(&base).expect("base"),
        std::fs::read(&env_run).expect("env"),
        "worker count must not affect results"
    );

    // A malformed value is a configuration error.
    std::env::set_var("GDDS_WORKERS", "many");
    assert_eq!(noise(&env_run), 2);
    std::env::set_var("GDDS_WORKERS", "0");
    assert_eq!(noise(&env_run), 2);

    std::env::remove_var("GDDS_WORKERS");
    assert_eq!(noise(&env_run), 0);
}
