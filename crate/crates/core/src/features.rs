//! Feature matrices and their on-disk formats.
//!
//! Binary layout (little-endian): magic `PFV1`, `u32` rows, `u32` dim, then per
//! row a `u32` id length, the UTF-8 id and `dim` `f32` values. The CSV export
//! has header `id,f0,...,f{D-1}`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_f32s, read_u32, write_f32s};

pub const MAGIC: &[u8; 4] = b"PFV1";

/// Row-major `N x D` matrix of features keyed by unique row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    ids: Vec<String>,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != ids.len() * dim {
            return Err(Error::shape(format!(
                "{} values for {} rows of width {dim}",
                values.len(),
                ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalError("feature matrix contains NaN or Inf".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate feature row id {dup}")));
        }
        Ok(Self { ids, dim, values })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows as `f64` vectors, in the order of `ids`.
    pub fn select_f64(&self, ids: &[String]) -> Result<Vec<Vec<f64>>> {
        let lookup: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .map(|&i| self.row(i).iter().map(|&v| v as f64).collect())
                    .ok_or_else(|| Error::invalid(format!("no feature row for {id}")))
            })
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            write_f32s(&mut w, self.row(i))?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a PFV1 feature file".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            ids.push(String::from_utf8(id).map_err(|_| Error::Format("row id is not UTF-8".into()))?);
            values.extend(read_f32s(&mut r, dim)?);
        }
        Self::new(ids, dim, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)
            .map_err(|e| Error::ItemError { path: path.to_path_buf(), message: e.to_string() })?;
        Self::read(BufReader::new(f))
    }

    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for j in 0..self.dim {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in self.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty feature CSV".into()))?;
        let dim = header.split(',').count() - 1;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut fields = line.split(',');
            ids.push(fields.next().unwrap_or_default().to_string());
            let row: Vec<f32> = fields
                .map(|f| f.parse::<f32>().map_err(|_| Error::Format(format!("bad feature value {f:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(Error::Format(format!("row {} has {} values, expected {dim}", ids.len(), row.len())));
            }
            values.extend(row);
        }
        Self::new(ids, dim, values)
    }
}
