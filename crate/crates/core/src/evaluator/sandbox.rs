//! Workspace copies, diff application and command execution under a timeout.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use walkdir::WalkDir;

use crate::seed::sha256_hex;
use crate::task::{EnvSpec, TestOutcome};

/// Copies `src` into `dst` (which must exist).
pub fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    for entry in WalkDir::new(src) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under root");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// SHA-256 over sorted relative paths and file contents.
pub fn tree_hash(root: &Path) -> std::io::Result<String> {
    let mut entries: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(root) {
        let entry = entry.map_err(std::io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).expect("under root");
            entries.push((rel.to_string_lossy().into_owned(), entry.path().to_path_buf()));
        }
    }
    entries.sort();
    let mut bytes = Vec::new();
    for (rel, path) in entries {
        bytes.extend_from_slice(rel.as_bytes());
        bytes.push(0);
        let content = std::fs::read(path)?;
        bytes.extend_from_slice(&(content.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&content);
    }
    Ok(sha256_hex(&bytes))
}

/// Applies per-file unified-diff sections under `root`.
pub fn apply_sections(root: &Path, sections: &[(String, String)]) -> Result<(), String> {
    for (rel, text) in sections {
        if Path::new(rel)
            .components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
            || Path::new(rel).is_absolute()
        {
            return Err(format!("patch path escapes workspace: {rel}"));
        }
        let patch = diffy::Patch::from_str(text).map_err(|e| format!("{rel}: {e}"))?;
        let path = root.join(rel);
        let original = if patch.original() == Some("/dev/null") {
            String::new()
        } else {
            std::fs::read_to_string(&path).map_err(|e| format!("{rel}: {e}"))?
        };
        if patch.modified() == Some("/dev/null") {
            std::fs::remove_file(&path).map_err(|e| format!("{rel}: {e}"))?;
            continue;
        }
        let updated = diffy::apply(&original, &patch).map_err(|e| format!("{rel}: {e}"))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("{rel}: {e}"))?;
        }
        std::fs::write(&path, updated).map_err(|e| format!("{rel}: {e}"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutput {
    pub success: bool,
    pub timed_out: bool,
    /// stdout followed by stderr.
    pub output: String,
}

/// Spawns `argv` in `cwd` and waits until `deadline`, killing it on expiry.
///
/// Errors only when the process cannot be spawned.
pub fn run_until(argv: &[String], cwd: &Path, deadline: Instant) -> std::io::Result<CommandOutput> {
    let (program, args) = argv.split_first().expect("non-empty argv");
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    // Own process group, so a timeout also reaches grandchildren holding the pipes.
    #[cfg(unix)]
    std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
    let mut child = cmd.spawn()?;
    // Readers run on their own threads so a chatty child cannot block on a full pipe.
    let stdout = child.stdout.take();
    let stderr = child.stderr.take();
    let readers = [
        stdout.map(|s| Box::new(s) as Box<dyn Read + Send>),
        stderr.map(|s| Box::new(s) as Box<dyn Read + Send>),
    ]
    .map(|r| {
        r.map(|mut r| {
            std::thread::spawn(move || {
                let mut buf = Vec::new();
                let _ = r.read_to_end(&mut buf);
                String::from_utf8_lossy(&buf).into_owned()
            })
        })
    });
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(&mut child);
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let mut output = String::new();
    for r in readers.into_iter().flatten() {
        output.push_str(&r.join().unwrap_or_default());
    }
    Ok(CommandOutput {
        success: status.is_some_and(|s| s.success()),
        timed_out,
        output,
    })
}

fn kill_group(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        let _ = Command::new("kill")
            .args(["-KILL", "--", &format!("-{}", child.id())])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
    }
    let _ = child.kill();
}

fn shell(cmd: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), cmd.into()]
}

/// The `setup && test` script run inside the sandbox.
pub fn sandbox_script(spec: &EnvSpec) -> String {
    spec.setup_commands
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(spec.test_command.as_str()))
        .collect::<Vec<_>>()
        .join(" && ")
}

/// Argument vector for an OCI runtime: the workspace is mounted at
/// `/workspace`, networking is disabled and the container is removed on exit.
pub fn container_argv(runtime: &str, spec: &EnvSpec, workspace: &Path) -> Vec<String> {
    vec![
        runtime.to_string(),
        "run".into(),
        "--rm".into(),
        "--network".into(),
        "none".into(),
        "-v".into(),
        format!("{}:/workspace", workspace.display()),
        "-w".into(),
        "/workspace".into(),
        spec.image.clone().unwrap_or_default(),
        "sh".into(),
        "-c".into(),
        sandbox_script(spec),
    ]
}

/// Runs setup commands then the test command directly on the host, in `dir`.
pub fn run_process(spec: &EnvSpec, dir: &Path, deadline: Instant) -> std::io::Result<CommandOutput> {
    let mut combined = String::new();
    for cmd in &spec.setup_commands {
        let out = run_until(&shell(cmd), dir, deadline)?;
        combined.push_str(&out.output);
        if !out.success {
            return Ok(CommandOutput {
                success: false,
                timed_out: out.timed_out,
                output: combined,
            });
        }
    }
    let out = run_until(&shell(&spec.test_command), dir, deadline)?;
    combined.push_str(&out.output);
    Ok(CommandOutput {
        output: combined,
        ..out
    })
}

/// Per-test outcomes from `PASSED <id>` / `FAILED <id>` / `ERROR <id>`
/// lines (the pytest `-rA` summary format).
pub fn parse_test_report(output: &str) -> BTreeMap<String, TestOutcome> {
    let mut outcomes = BTreeMap::new();
    for line in output.lines() {
        let line = line.trim();
        let (outcome, rest) = if let Some(r) = line.strip_prefix("PASSED ") {
            (TestOutcome::Pass, r)
        } else if let Some(r) = line.strip_prefix("FAILED ") {
            (TestOutcome::Fail, r)
        } else if let Some(r) = line.strip_prefix("ERROR ") {
            (TestOutcome::Error, r)
        } else {
            continue;
        };
        let id = rest.split(" - ").next().unwrap_or(rest).trim();
        if !id.is_empty() {
            // A later failure for the same id overrides an earlier pass.
            let entry = outcomes.entry(id.to_string()).or_insert(outcome);
            if outcome != TestOutcome::Pass {
                *entry = outcome;
            }
        }
    }
    outcomes
}
