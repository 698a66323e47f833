//! Trial lists: `enroll_id test_id {1|0}` per line.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::inventory::Utterance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub entries: Vec<Trial>,
}

impl TrialList {
    pub fn n_target(&self) -> usize {
        self.entries
            .iter()
            .filter(|t| t.label == TrialLabel::Target)
            .count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.entries.len() - self.n_target()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let label = match fields.as_slice() {
                [_, _, "1"] => TrialLabel::Target,
                [_, _, "0"] => TrialLabel::Nontarget,
                _ => {
                    return Err(Error::Parse(format!(
                        "trial line {}: expected `enroll test {{1|0}}`, got {line:?}",
                        n + 1
                    )))
                }
            };
            entries.push(Trial {
                enroll: fields[0].to_string(),
                test: fields[1].to_string(),
                label,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.entries {
            let flag = match t.label {
                TrialLabel::Target => 1,
                TrialLabel::Nontarget => 0,
            };
            let _ = writeln!(out, "{} {} {}", t.enroll, t.test, flag);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Maps each trial to `(enroll_index, test_index, label)` in `utterances`.
    pub fn resolve(&self, utterances: &[Utterance]) -> Result<Vec<(usize, usize, TrialLabel)>> {
        let index: HashMap<&str, usize> = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownUtterance(id.to_string()))
        };
        self.entries
            .iter()
            .map(|t| Ok((lookup(&t.enroll)?, lookup(&t.test)?, t.label)))
            .collect()
    }
}
