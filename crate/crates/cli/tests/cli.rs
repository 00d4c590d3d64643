use std::path::PathBuf;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proofchannels"))
        .args(args)
        .output()
        .expect("running the cli")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("proofchannels-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn list_names_every_builtin() {
    let o = cli(&["list"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 14);
    for name in [
        "open-close",
        "breach-punish",
        "race-window",
        "probability-report",
    ] {
        assert!(
            out.lines().any(|l| l.starts_with(name)),
            "{name} missing from\n{out}"
        );
    }
}

#[test]
fn run_prints_log_then_report() {
    let o = cli(&["run", "builtin:pay-update"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("event=channel-open"));
    assert!(out.contains("  alice 75 (-25)\n"));
    assert!(out.contains("  bob 125 (+25)\n"));
    assert!(out.trim_end().ends_with("result: pass"));
}

#[test]
fn log_level_filters_entries() {
    let debug = stdout(&cli(&["run", "builtin:open-close", "--log-level", "debug"]));
    let warn = stdout(&cli(&["run", "builtin:open-close", "--log-level", "warn"]));
    assert!(debug.contains("event=send"));
    assert!(!warn.contains("event=send"));
    assert!(debug.lines().count() > warn.lines().count());
}

#[test]
fn out_writes_the_log_to_a_file() {
    let path = scratch("breach.log");
    let o = cli(&[
        "run",
        "builtin:breach-punish",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let log = std::fs::read_to_string(&path).unwrap();
    assert!(log.contains("event=punish"));
    let out = stdout(&o);
    assert!(!out.contains("event="), "log leaked to stdout");
    assert!(out.starts_with("scenario: breach-punish\n"));
}

#[test]
fn seed_flag_is_reproducible() {
    let a = stdout(&cli(&[
        "run",
        "builtin:bet-timeout",
        "--seed",
        "7",
        "--log-level",
        "debug",
    ]));
    let b = stdout(&cli(&[
        "run",
        "builtin:bet-timeout",
        "--seed",
        "7",
        "--log-level",
        "debug",
    ]));
    let c = stdout(&cli(&[
        "run",
        "builtin:bet-timeout",
        "--seed",
        "8",
        "--log-level",
        "debug",
    ]));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.contains("seed: 7\n"));
}

#[test]
fn runs_scenario_files() {
    let path = scratch("file.toml");
    std::fs::write(
        &path,
        r#"name = "from-file"
summary = "a payment read from disk"
seed = 3
script = ["open ab", "pay ab bob 40", "close ab mode=cooperative by=alice"]

[[actor]]
name = "alice"
faucet = 50

[[actor]]
name = "bob"
faucet = "50.5"

[[channel]]
id = "ab"
a = "alice"
b = "bob"
contrib_a = 50
contrib_b = 50
"#,
    )
    .unwrap();
    let check = cli(&["check", path.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(0));
    assert!(stdout(&check).contains("from-file"));
    let o = cli(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("  alice 90 (+40)\n"), "{out}");
    assert!(out.contains("  bob 10.5 (-40)\n"), "{out}");
}

#[test]
fn bad_input_exits_with_two() {
    let missing = cli(&["run", "builtin:no-such-scenario"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no-such-scenario"));

    let path = scratch("broken.toml");
    std::fs::write(&path, "name = \"x\"\nscript = [\"open zz\"]\n").unwrap();
    assert_eq!(
        cli(&["check", path.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(cli(&["run", path.to_str().unwrap()]).status.code(), Some(2));

    assert_eq!(
        cli(&["run", "/nonexistent/file.toml"]).status.code(),
        Some(2)
    );
    assert_eq!(
        cli(&["run", "builtin:open-close", "--log-level", "loud"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
}
