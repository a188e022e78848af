// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{detokenize, tokenize, Dataset, Example, Provenance, Task};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Line<'a> {
    task: &'static str,
    source: String,
    target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    desired_length: Option<usize>,
    provenance: &'a str,
}

/// One example per line, UTF-8, fields in a fixed order.
pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &dataset.examples {
        let line = Line {
            task: e.task.as_str(),
            source: detokenize(&e.source),
            target: detokenize(&e.target),
            desired_length: e.desired_length,
            provenance: e.provenance.as_str(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus file. Blank lines are skipped; line numbers in errors are
/// 1-based. The dataset is named after the file stem.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_line(path, i + 1, &line)?);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset::new(name, examples))
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<Example> {
    let schema = |msg: String| Error::Schema {
        path: path.to_owned(),
        line: line_no,
        msg,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: line_no,
        msg: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("expected a JSON object".into()))?;
    let text = |field: &str| -> Result<&str> {
        obj.get(field)
            .ok_or_else(|| schema(format!("missing field {field:?}")))?
            .as_str()
            .ok_or_else(|| schema(format!("field {field:?} must be a string")))
    };
    let task_str = text("task")?;
    let task = Task::parse(task_str).ok_or_else(|| schema(format!("unknown task {task_str:?}")))?;
    let source = tokenize(text("source")?);
    let target = tokenize(text("target")?);
    let provenance = match obj.get("provenance") {
        None => Provenance::Genuine,
        Some(v) => {
            let s = v
                .as_str()
                .ok_or_else(|| schema("field \"provenance\" must be a string".into()))?;
            Provenance::parse(s).ok_or_else(|| schema(format!("unknown provenance {s:?}")))?
        }
    };
    let desired_length = match obj.get("desired_length") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| schema("desired_length must be a non-negative integer".into()))?
                as usize,
        ),
    };
    let example = Example {
        task,
        source,
        target,
        desired_length,
        provenance,
    };
    example.validate().map_err(|e| schema(e.to_string()))?;
    Ok(example)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpora, CorpusSizes, SynthSpec};

    #[test]
    fn round_trip_preserves_every_field() {
        let spec = SynthSpec {
            n_pairs: CorpusSizes {
                trans: 20,
                monosum: 20,
                xling_test: 5,
                heldout: 0,
            },
            ..SynthSpec::default()
        };
        let (trans, monosum, _) = synth_corpora(&spec).unwrap();
        let mut mixed = trans.examples.clone();
        mixed.extend(monosum.examples.iter().cloned().map(|e| e.with_provenance(Provenance::Pseudo)));
        mixed.push(Example::new(Task::PseudoTrans, tokenize("a1 a2"), tokenize("b1 b2")).with_provenance(Provenance::Pseudo));
        let ds = Dataset::new("mixed", mixed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        write_jsonl(&ds, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), ds);
    }

    fn read_str(body: &str) -> Result<Dataset> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, body).unwrap();
        read_jsonl(&path)
    }

    #[test]
    fn missing_target_names_the_line() {
        let body = "{\"task\":\"TRANS\",\"source\":\"a1\",\"target\":\"b1\"}\n{\"task\":\"TRANS\",\"source\":\"a1\"}\n";
        match read_str(body) {
            Err(Error::Schema { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("target"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_and_parse_errors() {
        assert!(matches!(
            read_str("{\"task\":\"SUMMARY\",\"source\":\"a1\",\"target\":\"b1\"}\n"),
            Err(Error::Schema { line: 1, .. })
        ));
        assert!(matches!(
            read_str("{\"task\":\"PARAPHRASE\",\"source\":\"a1\",\"target\":\"b1\"}\n"),
            Err(Error::Schema { line: 1, .. })
        ));
        assert!(matches!(
            read_str("\n{\"task\": \n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
