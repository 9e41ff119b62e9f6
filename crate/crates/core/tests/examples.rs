use std::path::PathBuf;
use std::process::Command;

const EXAMPLES: &[(&str, &[&str])] = &[
    ("box_geometry", &[]),
    ("label_space", &[]),
    ("synthetic_data", &[]),
    ("detector_forward", &[]),
    ("masked_losses", &[]),
    ("pseudo_labels", &[]),
    ("schedules", &[]),
    ("evaluation", &[]),
    ("gradient_check", &["pseudo"]),
    ("train_and_resume", &[]),
    ("compare_runs", &[]),
];

fn example_path(name: &str) -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    profile_dir.join("examples").join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

#[test]
fn every_example_runs_to_completion() {
    for (name, args) in EXAMPLES {
        let path = example_path(name);
        if !path.exists() {
            eprintln!("skipping {name}: not built at {}", path.display());
            continue;
        }
        let out = Command::new(&path).args(*args).output().unwrap();
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(
            out.status.success(),
            "{name} failed:\n{stdout}\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!stdout.trim().is_empty(), "{name} printed nothing");
        assert!(!stdout.contains("FAIL"), "{name} reported a failure:\n{stdout}");
    }
}

#[test]
fn resumed_example_run_matches() {
    let path = example_path("train_and_resume");
    if !path.exists() {
        return;
    }
    let out = Command::new(&path).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("identical to uninterrupted run: true"), "{stdout}");
}
