//! Numeric CSV tables: a header of column names and a dense body.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::weights::format_float;

#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl DataTable {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Schema(format!("{} names for {} columns", names.len(), columns.len())));
        }
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Schema("columns differ in length".into()));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Schema(format!("duplicate column name '{a}'")));
            }
        }
        Ok(DataTable { names, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|j| self.columns[j].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found")))
    }

    /// Reads a header line and numeric rows. Empty cells and `NA`-style
    /// tokens are rejected.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if names.is_empty() || names.iter().any(String::is_empty) {
            return Err(Error::Schema("header has empty column names".into()));
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != names.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} fields, header has {}",
                    line + 1,
                    rec.len(),
                    names.len()
                )));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Schema(format!("row {}, column '{}': '{field}' is not a number", line + 1, names[j]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Schema(format!(
                        "row {}, column '{}': missing or non-finite value",
                        line + 1,
                        names[j]
                    )));
                }
                columns[j].push(v);
            }
        }
        if columns[0].is_empty() {
            return Err(Error::Schema("data file has no rows".into()));
        }
        DataTable::new(names, columns)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for i in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| format_float(c[i])))?;
        }
        w.flush()?;
        Ok(())
    }
}
