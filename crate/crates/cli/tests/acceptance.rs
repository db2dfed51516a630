//! All ten acceptance criteria at full tolerances, one line per criterion.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use carma_sdde_cli::selftest::{self, criterion, Outcome, COMMANDS, NAMES, SHIPPED};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run_binary(cmd: &str, config: &Path, stem: &Path, cwd: &Path) -> std::io::Result<(i32, Vec<u8>)> {
    let out = Command::new(env!("CARGO_BIN_EXE_carma-sdde"))
        .arg(cmd)
        .arg(config)
        .arg("--output")
        .arg(stem)
        .current_dir(cwd)
        .output()?;
    Ok((out.status.code().unwrap_or(-1), out.stdout))
}

/// Runs each command twice per shipped config into the same location and
/// compares stdout and every written file byte for byte.
fn reproducibility() -> Outcome {
    let root = std::env::temp_dir().join(format!("carma-sdde-acceptance-{}", std::process::id()));
    let mut problems = Vec::new();
    let mut pairs = 0;
    for (name, _) in SHIPPED {
        let config = configs_dir().join(format!("{name}.toml"));
        let dir = root.join(name);
        for cmd in COMMANDS {
            let mut runs = Vec::new();
            for _ in 0..2 {
                let _ = std::fs::remove_dir_all(&dir);
                std::fs::create_dir_all(&dir).expect("temp dir");
                match run_binary(cmd, &config, &dir.join("out"), &dir) {
                    Ok((0, stdout)) => runs.push((stdout, selftest::snapshot(&dir).expect("snapshot"))),
                    Ok((code, _)) => problems.push(format!("{name}/{cmd} exited {code}")),
                    Err(e) => problems.push(format!("{name}/{cmd}: {e}")),
                }
            }
            pairs += 1;
            if runs.len() == 2 && runs[0] != runs[1] {
                problems.push(format!("{name}/{cmd} output differs"));
            }
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    let detail = if problems.is_empty() {
        format!("{pairs} command/config pairs byte-identical across two binary runs (stdout and files)")
    } else {
        problems.join("; ")
    };
    Outcome { id: 10, name: NAMES[9], pass: problems.is_empty(), detail }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for id in 1..=10 {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = std::time::Instant::now();
        let o = if id == 10 { reproducibility() } else { criterion(id) };
        println!("{} ({:.1}s)", o.line(), start.elapsed().as_secs_f64());
        if !o.pass {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
