//! Line readers for the two supported log layouts.
//!
//! * CSV with header `user_id,group,x,y`, group one of `A`, `B`, `-`.
//! * KDD-style TSV with header `UserId\tNbDisplays\tNbClicks`; clicks become
//!   `x`, displays become `y` and the group is supplied by the caller.

use std::io::{Read, Write};

use serde::Deserialize;

use super::{AggregateError, ObservationLine};
use crate::model::Group;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    KddTsv,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    user_id: String,
    group: String,
    x: f64,
    y: f64,
}

#[derive(Debug, Deserialize)]
struct KddRow {
    #[serde(rename = "UserId")]
    user_id: String,
    #[serde(rename = "NbDisplays")]
    displays: f64,
    #[serde(rename = "NbClicks")]
    clicks: f64,
}

fn parse_error(e: csv::Error) -> AggregateError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AggregateError::Io(io),
        kind => AggregateError::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn require_header(
    rdr: &mut csv::Reader<impl Read>,
    expected: &[&str],
) -> Result<(), AggregateError> {
    let headers = rdr.headers().map_err(parse_error)?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(AggregateError::Parse {
            line: 1,
            message: format!("expected header {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}

/// Streaming iterator over a `user_id,group,x,y` CSV.
pub fn csv_lines<R: Read>(
    reader: R,
) -> impl Iterator<Item = Result<ObservationLine, AggregateError>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = require_header(&mut rdr, &["user_id", "group", "x", "y"]);
    let rows = header.is_ok().then(|| rdr.into_deserialize::<CsvRow>());
    header
        .err()
        .map(Err)
        .into_iter()
        .chain(rows.into_iter().flatten().map(|row| {
            let row = row.map_err(parse_error)?;
            let group = row.group.parse::<Group>().map_err(|e| AggregateError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            let line = ObservationLine::new(row.user_id, group, row.x, row.y);
            line.validate()?;
            Ok(line)
        }))
}

/// Streaming iterator over a KDD-style TSV; `assign` decides each user's group.
pub fn kdd_lines<R, F>(
    reader: R,
    mut assign: F,
) -> impl Iterator<Item = Result<ObservationLine, AggregateError>>
where
    R: Read,
    F: FnMut(&str) -> Group,
{
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = require_header(&mut rdr, &["UserId", "NbDisplays", "NbClicks"]);
    let rows = header.is_ok().then(|| rdr.into_deserialize::<KddRow>());
    header
        .err()
        .map(Err)
        .into_iter()
        .chain(rows.into_iter().flatten().map(move |row| {
            let row = row.map_err(parse_error)?;
            let group = assign(&row.user_id);
            let line = ObservationLine::new(row.user_id, group, row.clicks, row.displays);
            line.validate()?;
            Ok(line)
        }))
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<ObservationLine>, AggregateError> {
    csv_lines(reader).collect()
}

pub fn read_kdd<R, F>(reader: R, assign: F) -> Result<Vec<ObservationLine>, AggregateError>
where
    R: Read,
    F: FnMut(&str) -> Group,
{
    kdd_lines(reader, assign).collect()
}

pub fn write_csv<'a, W, I>(writer: W, lines: I) -> Result<(), AggregateError>
where
    W: Write,
    I: IntoIterator<Item = &'a ObservationLine>,
{
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "group", "x", "y"])
        .map_err(parse_error)?;
    for l in lines {
        w.write_record([
            l.user_id.as_str(),
            l.group.as_str(),
            &l.x.to_string(),
            &l.y.to_string(),
        ])
        .map_err(parse_error)?;
    }
    w.flush()?;
    Ok(())
}
