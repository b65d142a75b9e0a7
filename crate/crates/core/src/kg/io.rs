use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::{EntityId, Symbols, Triple};
use super::EntityTexts;

#[derive(Clone, Debug, PartialEq)]
pub struct TripleLoad {
    /// Unique triples in first-appearance order.
    pub triples: Vec<Triple>,
    /// Lines dropped as exact duplicates of an earlier line.
    pub duplicates: usize,
}

/// Reads `head\trelation\ttail` lines, registering unseen names in `symbols`.
pub fn load_triples(path: &Path, symbols: &mut Symbols) -> Result<TripleLoad> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let load = read_triples(BufReader::new(file), path, symbols)?;
    if load.duplicates > 0 {
        info!("{}: dropped {} duplicate triple lines", path.display(), load.duplicates);
    }
    Ok(load)
}

/// Reader-based core of [`load_triples`]; `origin` only labels errors.
pub fn read_triples(reader: impl BufRead, origin: &Path, symbols: &mut Symbols) -> Result<TripleLoad> {
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    let mut duplicates = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err("empty field".into()));
        }
        if fields[0] == fields[2] {
            return Err(parse_err(format!("self-link on `{}`", fields[0])));
        }
        let t = Triple {
            head: EntityId(symbols.entities.intern(fields[0])),
            relation: super::RelationId(symbols.relations.intern(fields[1])),
            tail: EntityId(symbols.entities.intern(fields[2])),
        };
        if seen.insert(t) {
            triples.push(t);
        } else {
            duplicates += 1;
        }
    }
    Ok(TripleLoad { triples, duplicates })
}

pub fn write_triples(path: &Path, triples: &[Triple], symbols: &Symbols) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            symbols.entity_name(t.head),
            symbols.relation_name(t.relation),
            symbols.entity_name(t.tail)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextLoad {
    pub texts: EntityTexts,
    /// Ids present in the file but absent from the entity vocabulary.
    pub rejected: Vec<String>,
}

/// Reads JSON-lines `{"id": ..., "text": ...}` records for known entities.
pub fn load_entity_texts(path: &Path, symbols: &Symbols) -> Result<TextLoad> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = TextLoad::default();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("invalid text record: {e}"),
        })?;
        if let Some(prev) = first_line.insert(rec.id.clone(), lineno + 1) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("duplicate id `{}` (first seen on line {prev})", rec.id),
            });
        }
        match symbols.entities.get(&rec.id) {
            Some(i) => {
                out.texts.insert(EntityId(i), rec.text);
            }
            None => out.rejected.push(rec.id),
        }
    }
    if !out.rejected.is_empty() {
        warn!(
            "{}: {} text records name entities outside the triple vocabulary",
            path.display(),
            out.rejected.len()
        );
    }
    Ok(out)
}

pub fn write_entity_texts(path: &Path, texts: &EntityTexts, symbols: &Symbols) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, text) in texts {
        let rec = TextRecord {
            id: symbols.entity_name(*id).to_owned(),
            text: text.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use std::path::PathBuf;

    fn read(s: &str, symbols: &mut Symbols) -> Result<TripleLoad> {
        read_triples(Cursor::new(s.as_bytes()), &PathBuf::from("mem.tsv"), symbols)
    }

    #[test]
    fn duplicate_lines_collapse() {
        let mut sym = Symbols::new();
        let load = read("a\tr\tb\na\tr\tb\n", &mut sym).unwrap();
        assert_eq!(load.triples.len(), 1);
        assert_eq!(load.duplicates, 1);
    }

    #[test]
    fn empty_input_leaves_vocabulary_untouched() {
        let mut sym = Symbols::new();
        let load = read("", &mut sym).unwrap();
        assert!(load.triples.is_empty());
        assert!(sym.entities.is_empty() && sym.relations.is_empty());
    }

    #[test]
    fn registers_new_names() {
        let mut sym = Symbols::new();
        let load = read("task_336\tbase_entry_is\tprov_004_026_001\n", &mut sym).unwrap();
        assert_eq!(load.triples, vec![Triple::new(0, 0, 1)]);
        assert_eq!(sym.entities.len(), 2);
        assert_eq!(sym.relations.len(), 1);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let mut sym = Symbols::new();
        match read("a\tr\tb\na\tr\n", &mut sym) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match read("a\t\tb\n", &mut Symbols::new()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("empty"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
