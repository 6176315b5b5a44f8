//! Trial interchange format: one JSON object per line, UTF-8.
//!
//! Every pipeline stage reads and writes this format. Unknown fields survive
//! a read/write round-trip via the `extra` maps on [`Trial`] and
//! [`GazeSample`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaze::Trial;

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut trials = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trial: Trial = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if trial.samples.is_empty() {
            return Err(Error::Schema {
                line: i + 1,
                msg: format!("trial '{}' has no samples", trial.id),
            });
        }
        trials.push(trial);
    }
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for trial in trials {
        serde_json::to_writer(&mut w, trial).map_err(|e| Error::Schema {
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
