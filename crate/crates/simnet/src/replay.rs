use std::path::Path;

use pogo_core::Height;
use serde_json::Value;

use crate::report::Transcript;
use crate::runner::run_scenario;
use crate::{ScenarioConfig, SimError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplayOutcome {
    Verified { heights: usize },
    Divergence { height: Height, detail: String },
}

/// Re-run `config` and compare against a transcript written by an earlier run.
pub fn replay(config: &ScenarioConfig, transcript_path: &Path) -> Result<ReplayOutcome, SimError> {
    let text = std::fs::read_to_string(transcript_path)
        .map_err(|e| SimError::Io(format!("{}: {e}", transcript_path.display())))?;
    let run = run_scenario(config)?;
    compare(&text, &run.transcript)
}

/// First height at which `recorded` (JSONL) and `actual` disagree. Lines are
/// compared as JSON values, so formatting differences do not count.
pub fn compare(recorded: &str, actual: &Transcript) -> Result<ReplayOutcome, SimError> {
    let recorded: Vec<Value> = recorded
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SimError::Io(format!("transcript line {}: {e}", i + 1))))
        .collect::<Result<_, _>>()?;
    for (i, line) in actual.lines.iter().enumerate() {
        // Round-trip through text so f32 fields compare in their printed form.
        let text = serde_json::to_string(line).expect("transcript line serializes");
        let expected: Value = serde_json::from_str(&text).expect("serialized JSON parses");
        match recorded.get(i) {
            None => {
                return Ok(ReplayOutcome::Divergence { height: line.height, detail: "transcript ends early".into() });
            }
            Some(r) if *r != expected => {
                let field = ["header", "record"].into_iter().find(|k| r.get(k) != expected.get(k)).unwrap_or("height");
                return Ok(ReplayOutcome::Divergence { height: line.height, detail: format!("{field} differs") });
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = recorded.get(actual.lines.len()) {
        let height = extra.get("height").and_then(Value::as_u64).unwrap_or(actual.lines.len() as u64);
        return Ok(ReplayOutcome::Divergence { height, detail: "transcript has extra heights".into() });
    }
    Ok(ReplayOutcome::Verified { heights: actual.lines.len() })
}
