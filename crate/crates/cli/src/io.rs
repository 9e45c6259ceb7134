//! Count tables in and composition tables out.
//!
//! Input is delimiter-sniffed CSV/TSV: rows are cells, columns are samples.
//! A first line containing any non-numeric field is a header, and a first
//! column that is non-numeric on every data row holds row labels.

use std::io::Write;
use std::path::Path;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub row_labels: Option<Vec<String>>,
    /// Cells × samples.
    pub rows: Vec<Vec<f64>>,
    pub delimiter: u8,
}

impl Table {
    pub fn n_columns(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Names of the data columns (header minus any label column).
    pub fn column_names(&self) -> Option<Vec<String>> {
        let header = self.header.as_ref()?;
        let skip = usize::from(self.row_labels.is_some() && header.len() > self.n_columns());
        Some(header[skip..].to_vec())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

fn sniff_delimiter(text: &str) -> u8 {
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if first.contains('\t') {
        b'\t'
    } else if first.contains(',') {
        b','
    } else if first.contains(';') {
        b';'
    } else {
        b','
    }
}

fn parse_number(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_table(text: &str, source: &str) -> Result<Table, CliError> {
    let delimiter = sniff_delimiter(text);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records: Vec<(u64, Vec<String>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Parse {
            path: source.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let fields: Vec<String> = record.iter().map(str::to_string).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        records.push((line, fields));
    }
    if records.is_empty() {
        return Err(CliError::Parse {
            path: source.to_string(),
            line: 1,
            message: "no data rows".into(),
        });
    }

    let header = if records[0].1.iter().any(|f| parse_number(f).is_none()) {
        // A header needs at least one data row after it.
        if records.len() == 1 {
            let (line, fields) = &records[0];
            return Err(CliError::Parse {
                path: source.to_string(),
                line: *line,
                message: format!("non-numeric value in {fields:?} and no data rows follow"),
            });
        }
        Some(records.remove(0).1)
    } else {
        None
    };

    let labelled = records.iter().all(|(_, f)| parse_number(&f[0]).is_none())
        && records.iter().all(|(_, f)| f.len() > 1);
    let mut row_labels = labelled.then(Vec::new);
    let mut rows = Vec::with_capacity(records.len());
    let mut width = None;
    for (line, fields) in records {
        let values = if let Some(labels) = row_labels.as_mut() {
            labels.push(fields[0].clone());
            &fields[1..]
        } else {
            &fields[..]
        };
        let parsed = values
            .iter()
            .enumerate()
            .map(|(j, f)| {
                parse_number(f).ok_or_else(|| CliError::Parse {
                    path: source.to_string(),
                    line,
                    message: format!("field {} ({f:?}) is not a finite number", j + 1),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(CliError::Parse {
                    path: source.to_string(),
                    line,
                    message: format!("expected {w} values, found {}", parsed.len()),
                })
            }
            _ => {}
        }
        rows.push(parsed);
    }
    Ok(Table {
        header,
        row_labels,
        rows,
        delimiter,
    })
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text, &path.display().to_string())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io_err = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Renders a cells × samples table, keeping the input's header and labels.
pub fn render_table(
    rows: &[Vec<f64>],
    header: Option<&[String]>,
    row_labels: Option<&[String]>,
    delimiter: u8,
) -> String {
    let sep = (delimiter as char).to_string();
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(&sep));
        out.push('\n');
    }
    for (i, row) in rows.iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(labels) = row_labels {
            fields.push(labels[i].clone());
        }
        fields.extend(row.iter().map(|v| format_value(*v)));
        out.push_str(&fields.join(&sep));
        out.push('\n');
    }
    out
}
