//! Iterative proportional fitting in two and three dimensions.
//!
//! Residuals are L1 sums of marginal mismatches. A run stops when the
//! residual drops below `tol`, when it improves by less than 1e-15 for three
//! consecutive sweeps, or after `max_iter` sweeps.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_TOL_2D: f64 = 1e-10;
pub const DEFAULT_TOL_3D: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 10_000;
const STALL_EPS: f64 = 1e-15;
const STALL_SWEEPS: usize = 3;
const TOTAL_REL: f64 = 1e-9;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Dense tensor indexed `(i, j, k)` with `k` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid(format!("{} values for a {:?} tensor", data.len(), dims)));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn filled(dims: [usize; 3], v: f64) -> Self {
        Tensor3 { dims, data: vec![v; dims[0] * dims[1] * dims[2]] }
    }

    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let n = self.idx(i, j, k);
        self.data[n] = v;
    }

    /// Sum over `k`: m×n.
    pub fn margin_ij(&self) -> Matrix {
        let [m, n, r] = self.dims;
        let data = (0..m * n).map(|ij| self.data[ij * r..(ij + 1) * r].iter().sum()).collect();
        Matrix { rows: m, cols: n, data }
    }

    /// Sum over `i`: n×r.
    pub fn margin_jk(&self) -> Matrix {
        let [m, n, r] = self.dims;
        let mut out = vec![0.0; n * r];
        for i in 0..m {
            let slab = &self.data[i * n * r..(i + 1) * n * r];
            for (acc, v) in out.iter_mut().zip(slab) {
                *acc += v;
            }
        }
        Matrix { rows: n, cols: r, data: out }
    }

    /// Sum over `j`: m×r.
    pub fn margin_ik(&self) -> Matrix {
        let [m, n, r] = self.dims;
        let mut out = vec![0.0; m * r];
        for i in 0..m {
            for j in 0..n {
                let base = (i * n + j) * r;
                for k in 0..r {
                    out[i * r + k] += self.data[base + k];
                }
            }
        }
        Matrix { rows: m, cols: r, data: out }
    }
}

#[derive(Clone, Debug)]
pub struct IpfOutcome<T> {
    pub fitted: T,
    /// Full sweeps performed.
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Residual before the first sweep and after each sweep.
    pub trace: Vec<f64>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_nonneg(name: &str, v: &[f64]) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::invalid(format!("{name} has invalid entry {x}")));
    }
    Ok(())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOTAL_REL * a.abs().max(b.abs()).max(1.0)
}

pub fn residual2(x: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    l1(&x.row_sums(), a) + l1(&x.col_sums(), b)
}

/// Scales every row slice of `data` (length `len`) to its target.
fn scale_rows(data: &mut [f64], len: usize, target: &[f64]) {
    data.par_chunks_mut(len).zip(target.par_iter()).for_each(|(row, &t)| {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            let f = t / s;
            row.iter_mut().for_each(|v| *v *= f);
        }
    });
}

struct StopRule {
    tol: f64,
    stall: usize,
}

impl StopRule {
    fn new(tol: f64) -> Self {
        StopRule { tol, stall: 0 }
    }

    /// `Some(converged)` when the run should end.
    fn check(&mut self, prev: f64, res: f64) -> Option<bool> {
        if res < self.tol {
            return Some(true);
        }
        if prev - res < STALL_EPS {
            self.stall += 1;
            if self.stall >= STALL_SWEEPS {
                return Some(false);
            }
        } else {
            self.stall = 0;
        }
        None
    }
}

pub fn ipf2(m0: &Matrix, a: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Result<IpfOutcome<Matrix>> {
    if a.len() != m0.rows || b.len() != m0.cols {
        return Err(Error::invalid("marginal lengths do not match the matrix"));
    }
    check_nonneg("initial matrix", &m0.data)?;
    check_nonneg("row targets", a)?;
    check_nonneg("column targets", b)?;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if !close(sa, sb) {
        return Err(Error::invalid(format!("row total {sa} differs from column total {sb}")));
    }
    let rs = m0.row_sums();
    let cs = m0.col_sums();
    for (i, (&t, &s)) in a.iter().zip(&rs).enumerate() {
        if t > 0.0 && s == 0.0 {
            return Err(Error::invalid(format!("row {i} has target {t} but no support")));
        }
    }
    for (j, (&t, &s)) in b.iter().zip(&cs).enumerate() {
        if t > 0.0 && s == 0.0 {
            return Err(Error::invalid(format!("column {j} has target {t} but no support")));
        }
    }

    let mut x = m0.clone();
    let mut res = residual2(&x, a, b);
    let mut trace = vec![res];
    let mut rule = StopRule::new(tol);
    if res < tol {
        return Ok(IpfOutcome { fitted: x, iterations: 0, residual: res, converged: true, trace });
    }
    let (rows, cols) = (x.rows, x.cols);
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        scale_rows(&mut x.data, cols, a);
        let cs = x.col_sums();
        let f: Vec<f64> = cs.iter().zip(b).map(|(&s, &t)| if s > 0.0 { t / s } else { 1.0 }).collect();
        x.data.par_chunks_mut(cols).for_each(|row| {
            for (v, fj) in row.iter_mut().zip(&f) {
                *v *= fj;
            }
        });
        let prev = res;
        res = residual2(&x, a, b);
        trace.push(res);
        if let Some(c) = rule.check(prev, res) {
            converged = c;
            break;
        }
    }
    if !converged {
        log::warn!("ipf2 on {rows}x{cols} stopped after {it} sweeps at residual {res:e}");
    }
    Ok(IpfOutcome { fitted: x, iterations: it, residual: res, converged, trace })
}

pub fn residual3(x: &Tensor3, a: &Matrix, b: &Matrix, c: &Matrix) -> f64 {
    l1(&x.margin_ij().data, &a.data) + l1(&x.margin_jk().data, &b.data) + l1(&x.margin_ik().data, &c.data)
}

/// Fits `x[i,j,k]` to `A` (sum over k, m×n), `B` (sum over i, n×r) and `C`
/// (sum over j, m×r), sweeping in that order.
pub fn ipf3(
    m0: &Tensor3,
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<IpfOutcome<Tensor3>> {
    let [m, n, r] = m0.dims;
    if (a.rows, a.cols) != (m, n) || (b.rows, b.cols) != (n, r) || (c.rows, c.cols) != (m, r) {
        return Err(Error::invalid("marginal shapes do not match the tensor"));
    }
    check_nonneg("initial tensor", &m0.data)?;
    check_nonneg("A", &a.data)?;
    check_nonneg("B", &b.data)?;
    check_nonneg("C", &c.data)?;
    // pairwise consistency: shared one-dimensional margins must agree
    let pairs = [
        ("A cols vs B rows", a.col_sums(), b.row_sums()),
        ("A rows vs C rows", a.row_sums(), c.row_sums()),
        ("B cols vs C cols", b.col_sums(), c.col_sums()),
    ];
    for (name, u, v) in &pairs {
        for (x, y) in u.iter().zip(v) {
            if !close(*x, *y) {
                return Err(Error::invalid(format!("inconsistent marginals ({name}): {x} vs {y}")));
            }
        }
    }

    let mut x = m0.clone();
    let mut res = residual3(&x, a, b, c);
    let mut trace = vec![res];
    if res < tol {
        return Ok(IpfOutcome { fitted: x, iterations: 0, residual: res, converged: true, trace });
    }
    let mut rule = StopRule::new(tol);
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        // A: fibers over k
        scale_rows(&mut x.data, r, &a.data);
        // B: fibers over i for each (j,k)
        let mb = x.margin_jk();
        let fb: Vec<f64> = mb.data.iter().zip(&b.data).map(|(&s, &t)| if s > 0.0 { t / s } else { 1.0 }).collect();
        x.data.par_chunks_mut(n * r).for_each(|slab| {
            for (v, f) in slab.iter_mut().zip(&fb) {
                *v *= f;
            }
        });
        // C: fibers over j for each (i,k)
        let mc = x.margin_ik();
        x.data.par_chunks_mut(n * r).enumerate().for_each(|(i, slab)| {
            for row in slab.chunks_mut(r) {
                for k in 0..r {
                    let s = mc.data[i * r + k];
                    if s > 0.0 {
                        row[k] *= c.data[i * r + k] / s;
                    }
                }
            }
        });
        let prev = res;
        res = residual3(&x, a, b, c);
        trace.push(res);
        if let Some(cv) = rule.check(prev, res) {
            converged = cv;
            break;
        }
    }
    if !converged {
        log::warn!("ipf3 on {m}x{n}x{r} stopped after {it} sweeps at residual {res:e}");
    }
    Ok(IpfOutcome { fitted: x, iterations: it, residual: res, converged, trace })
}
