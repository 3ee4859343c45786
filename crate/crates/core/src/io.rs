//! Documents (JSON) and delimiter-separated tables, plus the test-set
//! archive layout.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the exact values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ph::MomentVector;
use crate::sampler::{Instance, SampleSpec};

/// Indents objects but keeps arrays on one line, so matrices stay readable.
#[derive(Debug, Default)]
struct InlineArrays {
    indent: usize,
    has_value: bool,
}

impl InlineArrays {
    fn newline<W: std::io::Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"\n")?;
        for _ in 0..self.indent {
            w.write_all(b"  ")?;
        }
        Ok(())
    }
}

impl serde_json::ser::Formatter for InlineArrays {
    fn begin_object<W: std::io::Write + ?Sized>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.indent += 1;
        self.has_value = false;
        w.write_all(b"{")
    }

    fn end_object<W: std::io::Write + ?Sized>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.indent -= 1;
        if self.has_value {
            self.newline(w)?;
        }
        w.write_all(b"}")
    }

    fn begin_object_key<W: std::io::Write + ?Sized>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        self.newline(w)
    }

    fn begin_object_value<W: std::io::Write + ?Sized>(&mut self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b": ")
    }

    fn end_object_value<W: std::io::Write + ?Sized>(&mut self, _w: &mut W) -> std::io::Result<()> {
        self.has_value = true;
        Ok(())
    }

    fn begin_array_value<W: std::io::Write + ?Sized>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, InlineArrays::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Shortest text that parses back to exactly `v`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// A header plus string cells; numeric helpers format and parse floats.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Dimension(format!(
                "row has {} cells but the table has {} columns",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_numbers(&mut self, label: Option<String>, values: &[f64]) -> Result<()> {
        let row = label.into_iter().chain(values.iter().map(|&v| fmt_f64(v))).collect();
        self.push(row)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Parses a column as floats; empty cells become `NaN`.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self
            .column_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column `{name}`")))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r[c].trim();
                if cell.is_empty() {
                    return Ok(f64::NAN);
                }
                cell.parse().map_err(|_| {
                    Error::InvalidArgument(format!("row {}, column `{name}`: `{cell}` is not a number", i + 1))
                })
            })
            .collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Table::from_csv_str(&fs::read_to_string(path)?)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const INSTANCE_DIR: &str = "instances";

/// Top-level description of a test-set archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SampleSpec,
    pub seed: u64,
    pub count: usize,
    pub instances: Vec<String>,
}

/// Moment signatures as a table: `id, m1, m2, ...`.
pub fn moments_table(instances: &[Instance]) -> Result<Table> {
    let l = instances.first().map_or(0, |i| i.moments.len());
    let mut t = Table::new(std::iter::once("id".to_string()).chain((1..=l).map(|i| format!("m{i}"))));
    for inst in instances {
        t.push_numbers(Some(inst.id.clone()), &inst.moments)?;
    }
    Ok(t)
}

/// Writes `manifest.json`, `moments.csv` and one document per instance.
pub fn write_testset(dir: impl AsRef<Path>, spec: &SampleSpec, instances: &[Instance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(INSTANCE_DIR))?;
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        count: instances.len(),
        instances: instances.iter().map(|i| i.id.clone()).collect(),
    };
    write_json(dir.join(MANIFEST_FILE), &manifest)?;
    moments_table(instances)?.write_csv(dir.join(MOMENTS_FILE))?;
    for inst in instances {
        write_json(instance_path(dir, &inst.id), inst)?;
    }
    Ok(())
}

fn instance_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(INSTANCE_DIR).join(format!("{id}.json"))
}

pub fn read_testset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<Instance>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(dir.join(MANIFEST_FILE))?;
    let instances = manifest
        .instances
        .iter()
        .map(|id| {
            let inst: Instance = read_json(instance_path(dir, id))?;
            if &inst.id != id {
                return Err(Error::InvalidArgument(format!(
                    "instance file for `{id}` holds `{}`",
                    inst.id
                )));
            }
            Ok(inst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, instances))
}

/// Reads moment signatures back from a moments table.
pub fn read_moments_table(table: &Table) -> Result<Vec<(String, MomentVector)>> {
    let cols: Vec<String> = table.header.iter().skip(1).cloned().collect();
    let columns = cols
        .iter()
        .map(|c| table.numeric_column(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r[0].clone(), MomentVector(columns.iter().map(|c| c[i]).collect())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::Family;
    use crate::sampler::generate_testset;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.0, 1.0, 0.1, 1.0 / 3.0, 1e-300, 6.02e23, -2.5e-7, 123456.789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn documents_keep_arrays_inline() {
        let ph = crate::ph::MarkovianPH::erlang(2, 3.0);
        let text = to_json(&ph).unwrap();
        assert_eq!(
            text,
            "{\n  \"n\": 2,\n  \"alpha\": [1.0, 0.0],\n  \"T\": [[-3.0, 3.0], [0.0, -3.0]]\n}\n"
        );
        let back: crate::ph::MarkovianPH = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ph);
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(["k", "p"]);
        t.push_numbers(None, &[0.0, 0.3]).unwrap();
        t.push_numbers(None, &[1.0, 0.21]).unwrap();
        assert!(t.push(vec!["1".into()]).is_err());
        let back = Table::from_csv_str(&t.to_csv_string().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.numeric_column("p").unwrap(), vec![0.3, 0.21]);
        assert!(back.numeric_column("q").is_err());
    }

    #[test]
    fn testset_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SampleSpec::new(Family::HyperErlang, 4, 9).with_size_range(1, 12);
        let set = generate_testset(&spec).unwrap();
        write_testset(dir.path(), &spec, &set).unwrap();
        let (manifest, back) = read_testset(dir.path()).unwrap();
        assert_eq!(manifest.spec, spec);
        assert_eq!(back, set);
        let table = Table::read_csv(dir.path().join(MOMENTS_FILE)).unwrap();
        assert_eq!(table.header.len(), 21);
        let sigs = read_moments_table(&table).unwrap();
        assert_eq!(sigs[2].1, set[2].moments);
    }
}
