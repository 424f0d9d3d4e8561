//! JSON / JSON Lines persistence.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simenv::Scenario;
use crate::train::{ExampleRecord, TrainingExample};
use crate::types::{TaskId, TaskInstance};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::InvalidInput(format!("{}: no such file", path.display()))
    } else {
        Error::Io(e)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path).map_err(|e| missing(path, e))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Reads and validates a dataset; every task must share one agent population shape.
pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let scenarios: Vec<Scenario> = read_jsonl(path)?;
    if scenarios.is_empty() {
        return Err(Error::InvalidInput(format!("{}: dataset is empty", path.display())));
    }
    let ids = &scenarios[0].task.agent_ids;
    for s in &scenarios {
        s.validate()?;
        if &s.task.agent_ids != ids {
            return Err(Error::InvalidInput(format!("task {}: agent ids differ from the first task", s.task.task_id)));
        }
    }
    Ok(scenarios)
}

pub fn task_index(scenarios: &[Scenario]) -> HashMap<TaskId, Arc<TaskInstance>> {
    scenarios.iter().map(|s| (s.task.task_id, Arc::clone(&s.task))).collect()
}

pub fn resolve_examples(records: &[ExampleRecord], scenarios: &[Scenario]) -> Result<Vec<TrainingExample>> {
    let index = task_index(scenarios);
    records
        .iter()
        .map(|r| {
            let task = index
                .get(&r.task_id)
                .ok_or_else(|| Error::InvalidInput(format!("example references unknown task {}", r.task_id)))?;
            r.resolve(Arc::clone(task))
        })
        .collect()
}

pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,mean_loss")?;
    for (epoch, loss) in history.iter().enumerate() {
        writeln!(w, "{},{loss}", epoch + 1)?;
    }
    w.flush()?;
    Ok(())
}
