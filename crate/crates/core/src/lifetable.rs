//! Period life tables and fertility indicators.

use crate::error::{Error, Result};
use crate::rates::AlphaProfile;

pub const DEFAULT_RADIX: f64 = 100_000.0;
pub const DEFAULT_A_MAX: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LifeTable {
    pub q: Vec<f64>,
    pub l: Vec<f64>,
    pub d: Vec<f64>,
    pub big_l: Vec<f64>,
    pub t: Vec<f64>,
    pub e: Vec<f64>,
    pub radix: f64,
}

fn check_q(q: &[f64], a_max: usize) -> Result<()> {
    if q.len() <= a_max {
        return Err(Error::invalid(format!("{} death probabilities for a_max {a_max}", q.len())));
    }
    if let Some(v) = q[..=a_max].iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("death probability {v} outside [0,1]")));
    }
    if q[a_max] == 0.0 {
        return Err(Error::domain("death probability at the open age is zero; the tail diverges"));
    }
    Ok(())
}

/// Remaining life expectancy for every age, computed backwards from the
/// closed-form tail `(1 - alpha q) / q`. Independent of the radix and
/// defined even where no one survives.
fn expectancies(q: &[f64], alpha: &AlphaProfile, a_max: usize) -> Vec<f64> {
    let mut e = vec![0.0; a_max + 1];
    let qa = q[a_max];
    e[a_max] = (1.0 - alpha.at(a_max) * qa) / qa;
    for i in (0..a_max).rev() {
        e[i] = (1.0 - alpha.at(i) * q[i]) + (1.0 - q[i]) * e[i + 1];
    }
    e
}

/// Builds the table from `q[0..=a_max]`; `q[a_max]` holds for all older ages.
pub fn build_life_table(q: &[f64], alpha: &AlphaProfile, a_max: usize, l0: f64) -> Result<LifeTable> {
    check_q(q, a_max)?;
    if !(l0 > 0.0 && l0.is_finite()) {
        return Err(Error::invalid(format!("radix {l0} must be positive")));
    }
    let n = a_max + 1;
    let q = q[..n].to_vec();
    let mut l = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut big_l = vec![0.0; n];
    l[0] = l0;
    for i in 0..n {
        d[i] = l[i] * q[i];
        big_l[i] = l[i] - alpha.at(i) * d[i];
        if i + 1 < n {
            l[i + 1] = l[i] - d[i];
        }
    }
    let mut t = vec![0.0; n];
    t[a_max] = l[a_max] * (1.0 - alpha.at(a_max) * q[a_max]) / q[a_max];
    for i in (0..a_max).rev() {
        t[i] = big_l[i] + t[i + 1];
    }
    let e = expectancies(&q, alpha, a_max);
    Ok(LifeTable { q, l, d, big_l, t, e, radix: l0 })
}

/// Life expectancy at age `a`.
pub fn life_expectancy(q: &[f64], a: usize, alpha: &AlphaProfile, a_max: usize) -> Result<f64> {
    check_q(q, a_max)?;
    if a > a_max {
        return Err(Error::invalid(format!("age {a} beyond a_max {a_max}")));
    }
    Ok(expectancies(q, alpha, a_max)[a])
}

/// Total fertility rate.
pub fn tfr(rates: &[f64]) -> f64 {
    rates.iter().sum()
}

/// Mean age at childbearing, weighting the exact age index.
pub fn mac(rates: &[f64]) -> Result<f64> {
    let s: f64 = rates.iter().sum();
    if s <= 0.0 {
        return Err(Error::domain("mean age of zero fertility is undefined"));
    }
    Ok(rates.iter().enumerate().map(|(a, r)| a as f64 * r).sum::<f64>() / s)
}
