//! Tab-separated corpus files.
//!
//! Corpus rows are `id<TAB>tokens<TAB>parse`; versioned rows are
//! `id<TAB>tokens<TAB>v1 parse<TAB>v2 parse<TAB>partition`. Tokens are joined
//! by single spaces and parses use the canonical bracket form.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DatasetError, Example, Partition, Provenance, UpdateSpec, VersionedDataset};
use crate::parsetree::{parse_bracketed, serialize};

fn check_field(line: usize, field: &str) -> Result<(), DatasetError> {
    if field.contains('\t') || field.contains('\n') {
        return Err(DatasetError::ParseError { line, message: "field contains a tab or newline".into() });
    }
    Ok(())
}

fn rows(text: &str, fields: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>), DatasetError>> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(move |(i, l)| {
        let line = i + 1;
        let cols: Vec<&str> = l.trim_end_matches('\r').split('\t').collect();
        if cols.len() != fields {
            return Err(DatasetError::ParseError {
                line,
                message: format!("expected {fields} tab-separated fields, found {}", cols.len()),
            });
        }
        Ok((line, cols))
    })
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Example>, DatasetError> {
    let text = fs::read_to_string(path)?;
    rows(&text, 3)
        .map(|row| {
            let (line, cols) = row?;
            let tokens = tokenize(cols[1]);
            let tree = parse_bracketed(cols[2], &tokens)
                .map_err(|e| DatasetError::ParseError { line, message: e.to_string() })?;
            Ok(Example::with_v2(cols[0], tokens, tree))
        })
        .collect()
}

pub fn save_corpus(examples: &[Example], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (i, e) in examples.iter().enumerate() {
        let label = e.v2_label.as_ref().ok_or_else(|| DatasetError::ParseError {
            line: i + 1,
            message: format!("example {} has no V2 label", e.id),
        })?;
        check_field(i + 1, &e.id)?;
        writeln!(out, "{}\t{}\t{}", e.id, e.query(), serialize(label, &e.tokens))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_versioned(data: &VersionedDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (i, e) in data.examples.iter().enumerate() {
        let missing = || DatasetError::ParseError { line: i + 1, message: format!("example {} is not versioned", e.id) };
        let v1 = e.v1_label.as_ref().ok_or_else(missing)?;
        let v2 = e.v2_label.as_ref().ok_or_else(missing)?;
        let p = e.partition.ok_or_else(missing)?;
        check_field(i + 1, &e.id)?;
        writeln!(out, "{}\t{}\t{}\t{}\t{}", e.id, e.query(), serialize(v1, &e.tokens), serialize(v2, &e.tokens), p)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_versioned(path: impl AsRef<Path>, spec: &UpdateSpec) -> Result<VersionedDataset, DatasetError> {
    let text = fs::read_to_string(path)?;
    let examples = rows(&text, 5)
        .map(|row| {
            let (line, cols) = row?;
            let tokens = tokenize(cols[1]);
            let parse = |s: &str| {
                parse_bracketed(s, &tokens).map_err(|e| DatasetError::ParseError { line, message: e.to_string() })
            };
            let v1 = parse(cols[2])?;
            let v2 = parse(cols[3])?;
            let partition = Partition::parse(cols[4]).ok_or_else(|| DatasetError::ParseError {
                line,
                message: format!("unknown partition {:?}", cols[4]),
            })?;
            Ok(Example { id: cols[0].to_string(), tokens, v1_label: Some(v1), v2_label: Some(v2), partition: Some(partition) })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(VersionedDataset { examples, spec: spec.clone() })
}

pub fn save_provenance(provenance: &[Provenance], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for p in provenance {
        writeln!(out, "{}\t{}\t{}", p.id, p.intent, p.template)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsetree::exact_match;

    const FIGURE_ROWS: &str = "\
f1\tWhere is there construction on the highway ?\t(IN:GET_INFO_TRAFFIC (SL:LOCATION \"the highway\" ) )
f2\tAre roads icy ?\t(IN:GET_INFO_ROAD_CONDITION (SL:ROAD_CONDITION \"icy\" ) )
f3\tIf I leave right now , can I get to New York City before one o'clock PM ?\t(IN:GET_ESTIMATED_ARRIVAL (SL:DATE_TIME_DEPARTURE \"right now\" ) (SL:DESTINATION \"New York City\" ) )
f4\tWhat major city has the worst traffic ?\t(IN:UNSUPPORTED_NAVIGATION )
f5\tWhich route to work has less traffic ?\t(IN:GET_DIRECTIONS (SL:DESTINATION \"work\" ) (SL:OBSTRUCTION \"traffic\" ) )
f6\tWhat is the best route to get to Atlanta to see my brother Mark ?\t(IN:GET_DIRECTIONS (SL:DESTINATION \"Atlanta\" ) )
";

    #[test]
    fn figure_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.tsv");
        fs::write(&path, FIGURE_ROWS).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 6);
        let again = dir.path().join("again.tsv");
        save_corpus(&loaded, &again).unwrap();
        assert_eq!(fs::read_to_string(&again).unwrap(), FIGURE_ROWS);
        let reloaded = load_corpus(&again).unwrap();
        for (a, b) in loaded.iter().zip(&reloaded) {
            assert_eq!(a.id, b.id);
            assert!(exact_match(a.v2_label.as_ref().unwrap(), b.v2_label.as_ref().unwrap()));
        }
    }

    #[test]
    fn malformed_bracket_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        let mut text: String = FIGURE_ROWS.to_string();
        text.push_str("g7\tdirections to work\t(IN:GET_DIRECTIONS (SL:DESTINATION \"work\" )\n");
        fs::write(&path, text).unwrap();
        match load_corpus(&path) {
            Err(DatasetError::ParseError { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_field_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "a\tb\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(DatasetError::ParseError { line: 1, .. })));
    }
}
