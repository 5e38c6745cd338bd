//! Vectors, matrices and tensors as long CSV: one row per index tuple,
//! 0-based indices, a trailing `value` column; absent entries are zero.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use harmonize_core::io::format_value;
use harmonize_core::ipf::{Matrix, Tensor3};

fn read_long(path: &Path, index: &[&str], value: &str) -> Result<BTreeMap<Vec<usize>, f64>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: missing column {name:?}", path.display()))
    };
    let idx: Vec<usize> = index.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let vcol = col(value)?;
    let mut out = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = |c: usize| rec.get(c).unwrap_or("").trim();
        let key: Vec<usize> = idx
            .iter()
            .map(|&c| at(c).parse().with_context(|| format!("{} line {}: bad index {:?}", path.display(), line + 2, at(c))))
            .collect::<Result<_>>()?;
        let v: f64 = at(vcol)
            .parse()
            .with_context(|| format!("{} line {}: bad value {:?}", path.display(), line + 2, at(vcol)))?;
        if out.insert(key, v).is_some() {
            bail!("{} line {}: duplicate index", path.display(), line + 2);
        }
    }
    Ok(out)
}

fn extent(cells: &BTreeMap<Vec<usize>, f64>, axis: usize) -> usize {
    cells.keys().map(|k| k[axis] + 1).max().unwrap_or(0)
}

pub fn read_vector_named(path: &Path, index: &str, value: &str) -> Result<Vec<f64>> {
    let cells = read_long(path, &[index], value)?;
    let mut v = vec![0.0; extent(&cells, 0)];
    for (k, x) in cells {
        v[k[0]] = x;
    }
    Ok(v)
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    read_vector_named(path, "i", "value")
}

fn fill_matrix(cells: BTreeMap<Vec<usize>, f64>, rows: usize, cols: usize, path: &Path) -> Result<Matrix> {
    let mut m = Matrix::filled(rows, cols, 0.0);
    for (k, v) in cells {
        if k[0] >= rows || k[1] >= cols {
            bail!("{}: index ({}, {}) outside {rows}x{cols}", path.display(), k[0], k[1]);
        }
        m.set(k[0], k[1], v);
    }
    Ok(m)
}

/// Matrix with columns `i,j,value`; `dims` fixes the shape.
pub fn read_matrix(path: &Path, dims: Option<(usize, usize)>) -> Result<Matrix> {
    read_matrix_named(path, ["i", "j"], dims)
}

fn read_matrix_named(path: &Path, names: [&str; 2], dims: Option<(usize, usize)>) -> Result<Matrix> {
    let cells = read_long(path, &names, "value")?;
    let (r, c) = dims.unwrap_or((extent(&cells, 0), extent(&cells, 1)));
    fill_matrix(cells, r, c, path)
}

/// The three two-way margins: `A` over (i,j), `B` over (j,k), `C` over
/// (i,k). Shapes come from the largest index seen in any of them.
pub fn read_margins(ab: &Path, bc: &Path, ac: &Path) -> Result<(Matrix, Matrix, Matrix)> {
    let a = read_long(ab, &["i", "j"], "value")?;
    let b = read_long(bc, &["j", "k"], "value")?;
    let c = read_long(ac, &["i", "k"], "value")?;
    let m = extent(&a, 0).max(extent(&c, 0));
    let n = extent(&a, 1).max(extent(&b, 0));
    let r = extent(&b, 1).max(extent(&c, 1));
    Ok((fill_matrix(a, m, n, ab)?, fill_matrix(b, n, r, bc)?, fill_matrix(c, m, r, ac)?))
}

pub fn read_tensor(path: &Path, dims: [usize; 3]) -> Result<Tensor3> {
    let cells = read_long(path, &["i", "j", "k"], "value")?;
    let mut data = vec![0.0; dims[0] * dims[1] * dims[2]];
    for (k, v) in cells {
        if k[0] >= dims[0] || k[1] >= dims[1] || k[2] >= dims[2] {
            bail!("{}: index {k:?} outside {dims:?}", path.display());
        }
        data[(k[0] * dims[1] + k[1]) * dims[2] + k[2]] = v;
    }
    Ok(Tensor3::new(dims, data)?)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Every entry is written, zeros included, so the shape survives.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["i", "j", "value"])?;
    for i in 0..m.rows {
        for j in 0..m.cols {
            w.write_record([i.to_string(), j.to_string(), format_value(m.get(i, j))])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor3) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["i", "j", "k", "value"])?;
    let [m, n, r] = t.dims;
    for i in 0..m {
        for j in 0..n {
            for k in 0..r {
                w.write_record([i.to_string(), j.to_string(), k.to_string(), format_value(t.get(i, j, k))])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
