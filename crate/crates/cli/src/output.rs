//! File emission. Every CSV starts with a comment block carrying the schema
//! version, the seed and the full resolved config; every JSON document
//! carries the same three fields at the top level.

use std::fs;
use std::io;
use std::path::Path;

use elsa_core::config::ExperimentConfig;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn header(schema: &str, cfg: &ExperimentConfig) -> String {
    let mut s = format!("# schema: {schema}\n# seed: {}\n# config:\n", cfg.seed);
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            s.push_str("#\n");
        } else {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e.to_string())
}

pub fn rows_to_csv<S: Serialize>(rows: &[S]) -> io::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    String::from_utf8(bytes).map_err(io::Error::other)
}

pub fn records_to_csv(header_row: &[String], records: &[Vec<String>]) -> io::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header_row).map_err(csv_err)?;
    for r in records {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    String::from_utf8(bytes).map_err(io::Error::other)
}

pub fn write_csv(path: &Path, schema: &str, cfg: &ExperimentConfig, body: &str) -> io::Result<()> {
    fs::write(path, header(schema, cfg) + body)
}

pub fn write_json<S: Serialize>(path: &Path, schema: &str, cfg: &ExperimentConfig, body: &S) -> io::Result<()> {
    let mut doc = Map::new();
    doc.insert("schema".into(), Value::from(schema));
    doc.insert("seed".into(), Value::from(cfg.seed));
    doc.insert("config".into(), serde_json::to_value(cfg)?);
    match serde_json::to_value(body)? {
        Value::Object(m) => doc.extend(m),
        other => {
            doc.insert("result".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    fs::write(path, text)
}
