use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassIndex, ClassSpace, Dataset, Instance, SourceLabelMatrix, Split};
use crate::error::{Error, Result};

pub const SCHEMA: &str = "polar-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    k: usize,
    d: usize,
    m: usize,
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<i64>,
    llm: Option<i64>,
    sources: Vec<Option<i64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Drop gold labels when loading a train split.
    pub erase_train_gold: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { erase_train_gold: true }
    }
}

/// Loads a canonical JSONL dataset; train splits come back without gold labels.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    load_dataset_with(path, split, LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, split: Split, opts: LoadOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), split, opts)
}

pub fn read_dataset<R: BufRead>(reader: R, split: Split, opts: LoadOptions) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });

    let (header_line, header) = lines.next().ok_or(Error::EmptyInput("dataset file has no header line"))?;
    let header = header.map_err(|e| Error::io("<dataset>", e).at_line(header_line))?;
    let header: Header = serde_json::from_str(&header).map_err(|e| Error::Malformed(format!("header: {e}")).at_line(header_line))?;
    if header.schema != SCHEMA {
        return Err(Error::Malformed(format!("unsupported schema {:?}, expected {SCHEMA:?}", header.schema)).at_line(header_line));
    }
    if header.labels.len() != header.k {
        return Err(
            Error::Malformed(format!("header declares k={} but lists {} labels", header.k, header.labels.len())).at_line(header_line)
        );
    }
    let space = ClassSpace::new(header.labels).map_err(|e| e.at_line(header_line))?;
    let erase = split == Split::Train && opts.erase_train_gold;

    let mut instances = Vec::new();
    let mut llm = Vec::new();
    let mut sources = Vec::new();
    for (line_no, line) in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e).at_line(line_no))?;
        let (inst, llm_answer, row) = parse_record(&line, &space, &Shape { d: header.d, m: header.m }).map_err(|e| e.at_line(line_no))?;
        instances.push(Instance { gold: if erase { None } else { inst.gold }, ..inst });
        llm.push(llm_answer);
        sources.push(row);
    }
    let labels = SourceLabelMatrix::new(llm, sources, header.m)?;
    Dataset::new(space, instances, labels, split)
}

struct Shape {
    d: usize,
    m: usize,
}

type ParsedRow = (Instance, Option<ClassIndex>, Vec<Option<ClassIndex>>);

fn parse_record(line: &str, space: &ClassSpace, shape: &Shape) -> Result<ParsedRow> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Malformed(e.to_string()))?;
    if rec.features.len() != shape.d {
        return Err(Error::DimensionMismatch {
            context: format!("features of {:?}", rec.id),
            expected: shape.d,
            found: rec.features.len(),
        });
    }
    if rec.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("features of {:?}", rec.id)));
    }
    if rec.sources.len() != shape.m {
        return Err(Error::DimensionMismatch { context: format!("sources of {:?}", rec.id), expected: shape.m, found: rec.sources.len() });
    }
    let gold = rec.gold.map(|g| space.check(g, || "gold".into())).transpose()?;
    let llm = rec.llm.map(|l| space.check(l, || "llm answer".into())).transpose()?;
    let row = rec
        .sources
        .iter()
        .enumerate()
        .map(|(j, s)| s.map(|v| space.check(v, || format!("source {}", j + 1))).transpose())
        .collect::<Result<Vec<_>>>()?;
    let inst = Instance { id: rec.id, features: rec.features, text: rec.text, entities: rec.entities, gold };
    Ok((inst, llm, row))
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(data, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset<W: Write>(data: &Dataset, out: &mut W) -> Result<()> {
    let header = Header { schema: SCHEMA.to_string(), k: data.k(), d: data.d(), m: data.m(), labels: data.class_space().labels().to_vec() };
    let io = |e| Error::io("<dataset>", e);
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for (inst, row) in data.instances().iter().zip(data.labels().rows()) {
        let rec = Record {
            id: inst.id.clone(),
            features: inst.features.clone(),
            text: inst.text.clone(),
            entities: inst.entities.clone(),
            gold: inst.gold.map(|g| g.0 as i64),
            llm: row.llm.map(|c| c.0 as i64),
            sources: row.sources.iter().map(|s| s.map(|c| c.0 as i64)).collect(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"schema":"polar-v1","k":2,"d":2,"m":2,"labels":["Negative","Positive"]}"#;

    fn read(body: &str, split: Split) -> Result<Dataset> {
        read_dataset(format!("{HEADER}\n{body}").as_bytes(), split, LoadOptions::default())
    }

    #[test]
    fn loads_three_valid_lines() {
        let body = r#"{"id":"a","features":[0.1,0.2],"gold":1,"llm":1,"sources":[1,null]}
{"id":"b","features":[0.3,0.4],"text":"hello","llm":null,"sources":[null,null]}
{"id":"c","features":[0.5,0.6],"gold":0,"llm":0,"sources":[0,1]}"#;
        let data = read(body, Split::Test).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.m(), 2);
        assert_eq!(data.d(), 2);
        assert_eq!(data.instances()[1].text.as_deref(), Some("hello"));
        assert_eq!(data.row(1).llm, None);
        assert_eq!(data.row(2).answer(2), Some(ClassIndex(1)));
        assert_eq!(data.instances().iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn out_of_range_source_names_the_line() {
        let body = r#"{"id":"a","features":[0.1,0.2],"llm":1,"sources":[1,null]}
{"id":"b","features":[0.1,0.2],"llm":1,"sources":[5,null]}"#;
        let err = read(body, Split::Test).unwrap_err();
        match err {
            Error::AtLine { line, source } => {
                assert_eq!(line, 3);
                assert!(matches!(*source, Error::LabelOutOfRange { label: 5, k: 2, .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension_is_rejected() {
        let header = r#"{"schema":"polar-v1","k":2,"d":8,"m":0,"labels":["a","b"]}"#;
        let good = r#"{"id":"a","features":[0,0,0,0,0,0,0,0],"llm":0,"sources":[]}"#;
        let short = r#"{"id":"b","features":[0,0,0,0,0,0,0],"llm":0,"sources":[]}"#;
        let err = read_dataset(format!("{header}\n{good}\n{short}\n").as_bytes(), Split::Test, LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(matches!(err, Error::AtLine { source, .. } if matches!(*source, Error::DimensionMismatch { expected: 8, found: 7, .. })));
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = read("{\"id\":\"a\",", Split::Test).unwrap_err();
        assert!(matches!(err, Error::AtLine { line: 2, .. }));
    }

    #[test]
    fn train_split_hides_gold_unless_asked() {
        let body = r#"{"id":"a","features":[0.1,0.2],"gold":1,"llm":1,"sources":[1,null]}"#;
        assert!(!read(body, Split::Train).unwrap().has_gold());
        let kept = read_dataset(format!("{HEADER}\n{body}").as_bytes(), Split::Train, LoadOptions { erase_train_gold: false }).unwrap();
        assert!(kept.has_gold());
    }

    #[test]
    fn round_trip_preserves_content() {
        let body = r#"{"id":"x","features":[0.1,-2.5e-7],"text":"t","entities":["aspirin","ulcer"],"gold":0,"llm":1,"sources":[null,0]}"#;
        let data = read(body, Split::Test).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let again = read_dataset(buf.as_slice(), Split::Test, LoadOptions::default()).unwrap();
        assert_eq!(data, again);
    }
}
