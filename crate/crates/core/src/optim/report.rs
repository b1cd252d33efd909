use serde::Serialize;

use super::{AdamState, MaskedAdamState, MASKED_RECORD_BYTES};

#[derive(Clone, Copy, Debug)]
pub enum StateRef<'a> {
    Dense(&'a AdamState),
    Masked(&'a MaskedAdamState),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryLine {
    pub name: String,
    pub kind: &'static str,
    /// Coordinates with stored moments.
    pub entries: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OptimizerMemoryReport {
    pub lines: Vec<MemoryLine>,
    pub dense_bytes: usize,
    pub masked_bytes: usize,
}

impl OptimizerMemoryReport {
    pub fn total_bytes(&self) -> usize {
        self.dense_bytes + self.masked_bytes
    }
}

/// Exact byte counts: dense Adam keeps two f64 per coordinate, masked Adam
/// one [`MASKED_RECORD_BYTES`] record per touched coordinate.
pub fn optimizer_memory_report<'a, I, S>(states: I) -> OptimizerMemoryReport
where
    I: IntoIterator<Item = (S, StateRef<'a>)>,
    S: Into<String>,
{
    let mut report = OptimizerMemoryReport::default();
    for (name, state) in states {
        let line = match state {
            StateRef::Dense(s) => {
                report.dense_bytes += s.moment_bytes();
                MemoryLine {
                    name: name.into(),
                    kind: "adamw",
                    entries: s.len(),
                    bytes: s.moment_bytes(),
                }
            }
            StateRef::Masked(s) => {
                report.masked_bytes += s.touched() * MASKED_RECORD_BYTES;
                MemoryLine {
                    name: name.into(),
                    kind: "masked-adam",
                    entries: s.touched(),
                    bytes: s.state_bytes(),
                }
            }
        };
        report.lines.push(line);
    }
    report
}
