//! Scaffold prompts for the localization and repair steps.
//!
//! Prompts carry a small set of machine-readable markers (`TASK ID:`,
//! `LOCATION:` and the step headings) so that desk-scale backends can act on
//! them; an LLM backend reads them as ordinary instructions.

use std::path::Path;

use walkdir::WalkDir;

use crate::guidance::{HINT_DELIMITER, INTERACTION_HEADING};
use crate::task::{Task, Workspace};

pub const TASK_ID_MARKER: &str = "TASK ID: ";
pub const LOCATION_MARKER: &str = "LOCATION: ";
pub const LOCALIZATION_HEADING: &str = "## Localization";
pub const REPAIR_HEADING: &str = "## Repair";
pub const WHOLE_PROGRAM: &str = "(whole program)";

/// Result of parsing the localization completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Localization {
    Line(usize),
    Files(Vec<String>),
    /// Nothing parseable; repair runs over the whole workspace.
    Unparsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaffoldStep {
    Localization,
    Repair,
}

fn header(task: &Task) -> String {
    format!(
        "You are a software engineering agent resolving an issue in the repository {}.\n\
         {TASK_ID_MARKER}{}\n\nPROBLEM STATEMENT:\n{}\n\n",
        task.repo_name, task.id, task.issue
    )
}

/// Relative file paths of a directory workspace, sorted.
pub fn workspace_files(root: &Path) -> Vec<String> {
    let mut files: Vec<String> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            e.path()
                .strip_prefix(root)
                .ok()
                .map(|p| p.to_string_lossy().replace('\\', "/"))
        })
        .filter(|p| !p.split('/').any(|c| c.starts_with('.')))
        .collect();
    files.sort();
    files
}

pub fn localization_prompt(task: &Task, max_files: usize) -> String {
    let mut out = header(task);
    match &task.workspace {
        Workspace::Synthetic(prog) => {
            out.push_str("PROGRAM:\n");
            for (i, line) in prog.lines.iter().enumerate() {
                out.push_str(&format!("{i}: {line}\n"));
            }
            out.push_str(&format!(
                "\n{LOCALIZATION_HEADING}\nIdentify the single line that must change to resolve \
                 the problem. Answer with a fenced code block containing `line <index>`.\n"
            ));
        }
        Workspace::Directory { path } => {
            out.push_str("REPOSITORY FILES:\n");
            for f in workspace_files(path) {
                out.push_str(&f);
                out.push('\n');
            }
            out.push_str(&format!(
                "\n{LOCALIZATION_HEADING}\nList up to {max_files} files that need to be edited \
                 to resolve the problem, one path per line, inside a fenced code block.\n"
            ));
        }
    }
    out
}

pub fn repair_prompt(task: &Task, localization: &Localization) -> String {
    let mut out = header(task);
    match &task.workspace {
        Workspace::Synthetic(prog) => {
            out.push_str("PROGRAM:\n");
            for (i, line) in prog.lines.iter().enumerate() {
                out.push_str(&format!("{i}: {line}\n"));
            }
            match localization {
                Localization::Line(line) if *line < prog.num_lines() => {
                    out.push_str(&format!("\n{LOCATION_MARKER}line {line}\nCANDIDATE REPLACEMENTS:\n"));
                    for (c, text) in prog.candidates[*line].iter().enumerate() {
                        out.push_str(&format!("[{c}] {text}\n"));
                    }
                }
                _ => {
                    out.push_str(&format!(
                        "\n{LOCATION_MARKER}{WHOLE_PROGRAM}\nCANDIDATE REPLACEMENTS:\n"
                    ));
                    for (line, cands) in prog.candidates.iter().enumerate() {
                        for (c, text) in cands.iter().enumerate() {
                            out.push_str(&format!("line {line} [{c}] {text}\n"));
                        }
                    }
                }
            }
            out.push_str(&format!(
                "\n{REPAIR_HEADING}\nChoose one replacement. Answer with a fenced ```patch block \
                 containing `line <index>` and `candidate <index>`.\n"
            ));
        }
        Workspace::Directory { path } => {
            let files = match localization {
                Localization::Files(files) if !files.is_empty() => files.clone(),
                _ => workspace_files(path),
            };
            out.push_str(&format!("{LOCATION_MARKER}{}\n\n", files.join(", ")));
            for f in &files {
                let body = std::fs::read_to_string(path.join(f)).unwrap_or_default();
                out.push_str(&format!("FILE: {f}\n```\n{body}```\n\n"));
            }
            out.push_str(&format!(
                "{REPAIR_HEADING}\nPropose a fix as a unified diff (with `--- a/<path>` and \
                 `+++ b/<path>` headers) inside a fenced ```diff block.\n"
            ));
        }
    }
    out
}

/// The task id a scaffold prompt was built for.
pub fn task_id_of(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(TASK_ID_MARKER))
        .map(str::trim)
}

/// Which scaffold step a prompt asks for.
pub fn step_of(prompt: &str) -> Option<ScaffoldStep> {
    let base = prompt.split(HINT_DELIMITER).next().unwrap_or(prompt);
    if base.lines().any(|l| l.trim() == REPAIR_HEADING) {
        Some(ScaffoldStep::Repair)
    } else if base.lines().any(|l| l.trim() == LOCALIZATION_HEADING) {
        Some(ScaffoldStep::Localization)
    } else {
        None
    }
}

/// The line a synthetic repair prompt is localized to, if any.
pub fn located_line(prompt: &str) -> Option<usize> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(LOCATION_MARKER))
        .and_then(|rest| rest.trim().strip_prefix("line "))
        .and_then(|n| n.trim().parse().ok())
}

/// First `line <n>` reference in `text`, case-insensitive.
pub fn first_line_ref(text: &str) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    let mut rest = lower.as_str();
    while let Some(pos) = rest.find("line") {
        let after = rest[pos + 4..].trim_start_matches([' ', '\t', ':', '#']);
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() {
            return digits.parse().ok();
        }
        rest = &rest[pos + 4..];
    }
    None
}

/// The line named by the environment-interaction section of an appended hint.
pub fn hinted_line(prompt: &str) -> Option<usize> {
    let (_, hint) = prompt.split_once(HINT_DELIMITER)?;
    let upper = hint.to_ascii_uppercase();
    let at = upper.find(INTERACTION_HEADING)?;
    first_line_ref(&hint[at + INTERACTION_HEADING.len()..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_refs() {
        assert_eq!(first_line_ref("see LINE 12, then"), Some(12));
        assert_eq!(first_line_ref("lines are fine; line: 3"), Some(3));
        assert_eq!(first_line_ref("no location here"), None);
    }

    #[test]
    fn markers_parse() {
        let p = "x\nTASK ID: synth-1-0003\nLOCATION: line 4\n## Repair\n";
        assert_eq!(task_id_of(p), Some("synth-1-0003"));
        assert_eq!(located_line(p), Some(4));
        assert_eq!(step_of(p), Some(ScaffoldStep::Repair));
        assert_eq!(step_of("## Localization\nfoo"), Some(ScaffoldStep::Localization));
        assert_eq!(step_of("nothing"), None);
    }
}
