//! Recorded dialogues and their line-delimited file format.
//!
//! ```text
//! {"target_id":"img0042","caption":"a photo of a dog","rounds":[{"q":"what color?","a":"red"}]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundText {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub target_id: String,
    pub caption: String,
    #[serde(default)]
    pub rounds: Vec<RoundText>,
}

impl DialogueRecord {
    /// Number of pipeline rounds, the caption included.
    pub fn len(&self) -> usize {
        self.rounds.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Text of pipeline round `t`: the caption at 0, else `"{q} {a}"`.
    pub fn text(&self, t: usize) -> Option<String> {
        match t {
            0 => Some(self.caption.clone()),
            _ => self.rounds.get(t - 1).map(|r| format!("{} {}", r.q, r.a)),
        }
    }

    pub fn texts(&self) -> Vec<String> {
        (0..self.len()).filter_map(|t| self.text(t)).collect()
    }
}

pub fn parse_dialogues(text: &str) -> Result<Vec<DialogueRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.target_id.is_empty() {
            return Err(Error::Schema {
                line: i + 1,
                message: "empty target_id".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn dialogues_to_jsonl(dialogues: &[DialogueRecord]) -> String {
    let mut s = String::new();
    for d in dialogues {
        s.push_str(&serde_json::to_string(d).expect("dialogue serializes"));
        s.push('\n');
    }
    s
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<DialogueRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogues(&text)
}

pub fn save_dialogues(path: impl AsRef<Path>, dialogues: &[DialogueRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dialogues_to_jsonl(dialogues)).map_err(|e| Error::io(path, e))
}
