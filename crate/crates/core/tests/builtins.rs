//! Every built-in scenario against its recorded report. Set `BLESS=1` to
//! rewrite the fixtures after an intended change.

use std::path::PathBuf;

use proofchannels_core::scenario::{self, BUILTINS};

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/reports")
        .join(format!("{name}.report"))
}

#[test]
fn builtin_reports_match_fixtures() {
    let bless = std::env::var_os("BLESS").is_some();
    let mut mismatched = Vec::new();
    for (name, _) in BUILTINS {
        let s = scenario::builtin(name).unwrap();
        let report = scenario::run(&s, None).unwrap();
        assert!(
            report.passed(),
            "{name} failed its checks:\n{}",
            report.render()
        );
        assert!(
            report.directive_errors.is_empty(),
            "{name}: {:?}",
            report.directive_errors
        );
        let got = report.render();
        let path = fixture_path(name);
        if bless {
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        let want =
            std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        if got != want {
            mismatched.push(format!("{name}:\n--- want\n{want}--- got\n{got}"));
        }
    }
    assert!(mismatched.is_empty(), "{}", mismatched.join("\n"));
}

#[test]
fn builtin_list_is_complete() {
    let names: Vec<&str> = BUILTINS.iter().map(|(n, _)| *n).collect();
    assert_eq!(names.len(), 14);
    for name in names {
        assert!(fixture_path(name).exists(), "no fixture for {name}");
    }
}

#[test]
fn seed_override_changes_secrets_not_outcomes() {
    let s = scenario::builtin("bet-settle-cooperative").unwrap();
    let one = scenario::run(&s, Some(1)).unwrap();
    let two = scenario::run(&s, Some(2)).unwrap();
    assert_ne!(
        one.render_log(proofchannels_core::peer::LogLevel::Debug),
        two.render_log(proofchannels_core::peer::LogLevel::Debug)
    );
    assert_eq!(one.holdings, two.holdings);
}
