//! Straight-line integer programs used by synthetic tasks.
//!
//! A program is a list of statements `vK = a` or `vK = a op b`, where each
//! operand is an integer literal or a variable `vJ` with `J < K`, and `op`
//! is one of `+`, `-`, `*`. Arithmetic is checked; overflow is an error.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Literal(i64),
    Var(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }

    fn apply(self, a: i64, b: i64) -> Option<i64> {
        match self {
            Op::Add => a.checked_add(b),
            Op::Sub => a.checked_sub(b),
            Op::Mul => a.checked_mul(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Statement {
    pub target: usize,
    pub lhs: Operand,
    pub rhs: Option<(Op, Operand)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("line {line}: cannot parse statement `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: assigns v{found}, expected v{line}")]
    WrongTarget { line: usize, found: usize },
    #[error("line {line}: reads v{var} before it is assigned")]
    Undefined { line: usize, var: usize },
    #[error("line {line}: integer overflow")]
    Overflow { line: usize },
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Literal(v) => write!(f, "{v}"),
            Operand::Var(j) => write!(f, "v{j}"),
        }
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{} = {}", self.target, self.lhs)?;
        if let Some((op, rhs)) = self.rhs {
            write!(f, " {} {}", op.symbol(), rhs)?;
        }
        Ok(())
    }
}

fn parse_operand(tok: &str) -> Option<Operand> {
    if let Some(idx) = tok.strip_prefix('v') {
        return idx.parse().ok().map(Operand::Var);
    }
    tok.parse().ok().map(Operand::Literal)
}

impl Statement {
    /// Parses the statement at position `line`.
    pub fn parse(line: usize, text: &str) -> Result<Self, ProgramError> {
        let syntax = || ProgramError::Syntax {
            line,
            text: text.to_string(),
        };
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 5 {
            return Err(syntax());
        }
        let target = match parse_operand(toks[0]) {
            Some(Operand::Var(t)) => t,
            _ => return Err(syntax()),
        };
        if toks[1] != "=" {
            return Err(syntax());
        }
        let lhs = parse_operand(toks[2]).ok_or_else(syntax)?;
        let rhs = if toks.len() == 5 {
            let op = match toks[3] {
                "+" => Op::Add,
                "-" => Op::Sub,
                "*" => Op::Mul,
                _ => return Err(syntax()),
            };
            Some((op, parse_operand(toks[4]).ok_or_else(syntax)?))
        } else {
            None
        };
        if target != line {
            return Err(ProgramError::WrongTarget { line, found: target });
        }
        Ok(Statement { target, lhs, rhs })
    }

    /// Variables read by this statement.
    pub fn reads(&self) -> impl Iterator<Item = usize> + '_ {
        let rhs = self.rhs.map(|(_, o)| o);
        [Some(self.lhs), rhs].into_iter().flatten().filter_map(|o| match o {
            Operand::Var(j) => Some(j),
            Operand::Literal(_) => None,
        })
    }
}

/// Result of running a program: one value per line until the first failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub values: Vec<i64>,
    pub failure: Option<ProgramError>,
}

impl Execution {
    pub fn value(&self, var: usize) -> Option<i64> {
        self.values.get(var).copied()
    }
}

/// Parses and runs `lines` top to bottom.
pub fn execute<S: AsRef<str>>(lines: &[S]) -> Execution {
    let mut values: Vec<i64> = Vec::with_capacity(lines.len());
    for (i, text) in lines.iter().enumerate() {
        let stmt = match Statement::parse(i, text.as_ref()) {
            Ok(s) => s,
            Err(e) => {
                return Execution {
                    values,
                    failure: Some(e),
                }
            }
        };
        let read = |o: Operand| -> Result<i64, ProgramError> {
            match o {
                Operand::Literal(v) => Ok(v),
                Operand::Var(j) if j < values.len() => Ok(values[j]),
                Operand::Var(j) => Err(ProgramError::Undefined { line: i, var: j }),
            }
        };
        let result = read(stmt.lhs).and_then(|a| match stmt.rhs {
            None => Ok(a),
            Some((op, rhs)) => {
                let b = read(rhs)?;
                op.apply(a, b).ok_or(ProgramError::Overflow { line: i })
            }
        });
        match result {
            Ok(v) => values.push(v),
            Err(e) => {
                return Execution {
                    values,
                    failure: Some(e),
                }
            }
        }
    }
    Execution { values, failure: None }
}

/// For each line, whether its value depends (transitively) on line `root`.
pub fn dependents_of<S: AsRef<str>>(lines: &[S], root: usize) -> Result<Vec<bool>, ProgramError> {
    let mut depends = vec![false; lines.len()];
    for (i, text) in lines.iter().enumerate() {
        let stmt = Statement::parse(i, text.as_ref())?;
        depends[i] = i == root || stmt.reads().any(|j| j < i && depends[j]);
    }
    Ok(depends)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_straight_line_program() {
        let exec = execute(&["v0 = 3", "v1 = v0 * 4", "v2 = v1 - v0", "v3 = v2 + 7"]);
        assert_eq!(exec.values, vec![3, 12, 9, 16]);
        assert!(exec.failure.is_none());
    }

    #[test]
    fn display_round_trips_parse() {
        for text in ["v0 = 5", "v3 = v1 + v2", "v2 = v0 * 3", "v1 = 4 - v0", "v4 = -2"] {
            let line = text[1..2].parse().unwrap();
            let stmt = Statement::parse(line, text).unwrap();
            assert_eq!(stmt.to_string(), text);
        }
    }

    #[test]
    fn reports_errors() {
        assert!(matches!(
            execute(&["v0 = 1", "v1 = v2 + 1"]).failure,
            Some(ProgramError::Undefined { line: 1, var: 2 })
        ));
        assert!(matches!(
            execute(&["v0 = 1", "v2 = v0"]).failure,
            Some(ProgramError::WrongTarget { line: 1, found: 2 })
        ));
        assert!(matches!(
            execute(&["v0 = 1 / 2"]).failure,
            Some(ProgramError::Syntax { .. })
        ));
        let big = format!("v0 = {}", i64::MAX);
        let exec = execute(&[big.as_str(), "v1 = v0 + 1"]);
        assert_eq!(exec.values, vec![i64::MAX]);
        assert!(matches!(exec.failure, Some(ProgramError::Overflow { line: 1 })));
    }

    #[test]
    fn dependency_closure() {
        let deps = dependents_of(&["v0 = 1", "v1 = 2", "v2 = v1 + 1", "v3 = v0 * 2", "v4 = v2 + v3"], 1).unwrap();
        assert_eq!(deps, vec![false, true, true, false, true]);
    }
}
