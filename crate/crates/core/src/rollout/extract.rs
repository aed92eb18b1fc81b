//! Parsing backend completions into localizations and patches.

use super::prompt::{first_line_ref, Localization};
use super::{Edit, Patch, PatchRendering};
use crate::policy::Action;
use crate::task::{Task, Workspace};

/// A fenced code block: its info string and body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock<'a> {
    pub info: &'a str,
    pub body: String,
}

/// All ```-fenced blocks in `text`, in order. An unterminated final block
/// runs to the end of the text.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let mut blocks = Vec::new();
    let mut current: Option<(&str, String)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(info) = trimmed.strip_prefix("```") {
            match current.take() {
                Some((info, body)) => blocks.push(FencedBlock { info, body }),
                None => current = Some((info.trim(), String::new())),
            }
            continue;
        }
        if let Some((_, body)) = current.as_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    if let Some((info, body)) = current {
        blocks.push(FencedBlock { info, body });
    }
    blocks
}

/// Parses a localization completion for `task`.
pub fn parse_localization(task: &Task, completion: &str, max_files: usize) -> Localization {
    let blocks = fenced_blocks(completion);
    match &task.workspace {
        Workspace::Synthetic(prog) => blocks
            .iter()
            .find_map(|b| first_line_ref(&b.body))
            .filter(|&l| l < prog.num_lines())
            .map_or(Localization::Unparsed, Localization::Line),
        Workspace::Directory { path } => {
            let files: Vec<String> = blocks
                .iter()
                .flat_map(|b| b.body.lines())
                .map(|l| l.trim().trim_start_matches("- ").trim())
                .filter(|l| !l.is_empty() && path.join(l).is_file())
                .map(str::to_string)
                .take(max_files)
                .collect();
            if files.is_empty() {
                Localization::Unparsed
            } else {
                Localization::Files(files)
            }
        }
    }
}

fn keyword_index(body: &str, keyword: &str) -> Option<usize> {
    body.lines().find_map(|l| {
        let l = l.trim().to_ascii_lowercase();
        let rest = l.strip_prefix(keyword)?;
        rest.trim_start_matches([' ', ':', '=', '#']).trim().parse().ok()
    })
}

/// The `(line, candidate)` pair named by a synthetic patch block in `text`.
///
/// Looks at the last fenced block that names both indices, so a response
/// made of a localization completion followed by a repair completion
/// resolves to the repair.
pub fn synth_action(text: &str) -> Option<Action> {
    fenced_blocks(text).iter().rev().find_map(|b| {
        Some(Action {
            line: keyword_index(&b.body, "line")?,
            candidate: keyword_index(&b.body, "candidate")?,
        })
    })
}

fn strip_diff_prefix(path: &str) -> &str {
    let path = path.split('\t').next().unwrap_or(path).trim();
    path.strip_prefix("a/")
        .or_else(|| path.strip_prefix("b/"))
        .unwrap_or(path)
}

/// Splits a unified diff into per-file sections `(path, section_text)`.
pub fn split_unified_diff(text: &str) -> Option<Vec<(String, String)>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut sections: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.starts_with("--- ") && lines.get(i + 1).is_some_and(|n| n.starts_with("+++ ")) {
            let target = strip_diff_prefix(&lines[i + 1][4..]);
            let source = strip_diff_prefix(&line[4..]);
            let path = if target == "/dev/null" { source } else { target };
            sections.push((path.to_string(), format!("{line}\n{}\n", lines[i + 1])));
            i += 2;
            continue;
        }
        if line.starts_with("diff --git") || line.starts_with("index ") {
            i += 1;
            continue;
        }
        if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
        }
        i += 1;
    }
    if sections.is_empty() {
        return None;
    }
    for (_, body) in &sections {
        let parsed = diffy::Patch::from_str(body).ok()?;
        if parsed.hunks().is_empty() {
            return None;
        }
    }
    Some(sections)
}

/// Extracts a well-formed patch from a repair completion, or `None`.
pub fn extract_patch(task: &Task, completion: &str) -> Option<Patch> {
    match &task.workspace {
        Workspace::Synthetic(prog) => {
            let action = synth_action(completion)?;
            let replacement = prog.candidates.get(action.line)?.get(action.candidate)?;
            Some(Patch {
                edits: vec![Edit {
                    location: format!("line {}", action.line),
                    replacement: replacement.clone(),
                }],
                rendering: PatchRendering::Synthetic {
                    line: action.line,
                    candidate: action.candidate,
                },
            })
        }
        Workspace::Directory { .. } => {
            let blocks = fenced_blocks(completion);
            let diff = blocks
                .iter()
                .find(|b| b.info == "diff" || b.info == "patch")
                .or_else(|| {
                    blocks
                        .iter()
                        .find(|b| b.body.starts_with("--- ") || b.body.starts_with("diff --git"))
                })?;
            let sections = split_unified_diff(&diff.body)?;
            Some(Patch {
                edits: sections
                    .iter()
                    .map(|(path, body)| Edit {
                        location: path.clone(),
                        replacement: body.clone(),
                    })
                    .collect(),
                rendering: PatchRendering::Diff {
                    text: sections.into_iter().map(|(_, b)| b).collect(),
                },
            })
        }
    }
}
