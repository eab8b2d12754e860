//! Shared helpers for the CLI integration and acceptance suites: subprocess
//! plumbing plus a synthetic dataset/mock-script generator with a planted,
//! analytically known error pattern.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const FINDINGS: [&str; 4] = [
    "atelectasis",
    "pleural_effusion",
    "pneumonia",
    "pneumothorax",
];

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radlabel"))
}

/// Path to a file shipped at the workspace root (templates/, schemas/, demo/).
pub fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

pub struct CmdResult {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(cmd: &mut Command) -> CmdResult {
    let out = cmd.output().expect("failed to spawn radlabel");
    CmdResult {
        status: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

impl CmdResult {
    pub fn expect_success(&self, what: &str) {
        assert_eq!(
            self.status, 0,
            "{what} failed (exit {}):\nstdout:\n{}\nstderr:\n{}",
            self.status, self.stdout, self.stderr
        );
    }

    pub fn expect_exit(&self, code: i32, what: &str) {
        assert_eq!(
            self.status, code,
            "{what}: expected exit {code}, got {}:\nstdout:\n{}\nstderr:\n{}",
            self.status, self.stdout, self.stderr
        );
    }
}

pub fn report_id(index: usize) -> String {
    format!("rep-{index:04}")
}

/// Deterministic gold truth: finding `f` is positive for report `i`
/// iff (i + f) % 3 == 0. Every finding gets positives and negatives.
pub fn gold_is_yes(report: usize, finding: usize) -> bool {
    (report + finding) % 3 == 0
}

pub fn write_binary_schema(dir: &Path) -> PathBuf {
    let path = dir.join("schema.json");
    let findings: Vec<String> = FINDINGS.iter().map(|f| format!("\"{f}\"")).collect();
    std::fs::write(
        &path,
        format!(
            "{{\"name\": \"synthetic\", \"classes\": [\"yes\", \"no\"], \"findings\": [{}]}}\n",
            findings.join(", ")
        ),
    )
    .unwrap();
    path
}

/// Writes an `n`-report dataset whose gold labels follow [`gold_is_yes`].
pub fn write_dataset(path: &Path, n: usize) {
    let mut out = String::new();
    for i in 0..n {
        let labels: Vec<String> = FINDINGS
            .iter()
            .enumerate()
            .map(|(f, name)| {
                format!(
                    "\"{name}\": \"{}\"",
                    if gold_is_yes(i, f) { "yes" } else { "no" }
                )
            })
            .collect();
        writeln!(
            out,
            "{{\"id\": \"{}\", \"text\": \"Synthetic report number {i} for exercising the pipeline.\", \"labels\": {{{}}}}}",
            report_id(i),
            labels.join(", ")
        )
        .unwrap();
    }
    std::fs::write(path, out).unwrap();
}

/// JSON answer for report `i` where finding `f`'s label is flipped from gold
/// whenever `flip(i, f)` is true.
pub fn answer_for(i: usize, flip: &dyn Fn(usize, usize) -> bool) -> String {
    let labels: Vec<String> = FINDINGS
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let yes = gold_is_yes(i, f) != flip(i, f);
            format!("  \"{name}\": \"{}\"", if yes { "yes" } else { "no" })
        })
        .collect();
    format!("{{\n{}\n}}", labels.join(",\n"))
}

/// Writes a mock script answering every report, with planted flips.
pub fn write_mock_script(path: &Path, n: usize, flip: &dyn Fn(usize, usize) -> bool) {
    let mut responses = serde_json::Map::new();
    for i in 0..n {
        responses.insert(
            report_id(i),
            serde_json::Value::String(answer_for(i, flip)),
        );
    }
    let script = serde_json::json!({ "responses": responses });
    std::fs::write(path, serde_json::to_string_pretty(&script).unwrap()).unwrap();
}

/// Runs `label` with the mock backend over a synthetic dataset.
pub fn label_mock(dataset: &Path, schema: &Path, script: &Path, out: &Path) -> CmdResult {
    run(bin()
        .arg("label")
        .arg("--dataset")
        .arg(dataset)
        .arg("--schema")
        .arg(schema)
        .arg("--template")
        .arg(workspace_file("templates/zero_shot.txt"))
        .arg("--backend")
        .arg("mock")
        .arg("--mock-script")
        .arg(script)
        .arg("--out")
        .arg(out))
}
