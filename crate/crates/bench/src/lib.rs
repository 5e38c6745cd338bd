//! Deterministic inputs for the benchmarks.

use harmonize_core::census::{AgeClass, CensusKey, CensusTable, RegionId, ResolutionSpec, Sex, ValueKind};
use harmonize_core::ipf::{Matrix, Tensor3};
use harmonize_core::region::RegionLevel;
use harmonize_core::simulate::{Parameters, MAX_AGE};

/// Cheap reproducible numbers in (0, 1).
fn noise(i: usize) -> f64 {
    let x = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11;
    (x as f64 + 0.5) / (1u64 << 53) as f64
}

pub fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 + 100.0 * noise(i)).collect()
}

/// Positive matrix with its row and column sums.
pub fn ipf2_case(m: usize, n: usize) -> (Matrix, Vec<f64>, Vec<f64>) {
    let truth = Matrix::new(m, n, (0..m * n).map(noise).collect()).unwrap();
    let (a, b) = (truth.row_sums(), truth.col_sums());
    (Matrix::filled(m, n, 1.0), a, b)
}

pub fn ipf3_case(dims: [usize; 3]) -> (Tensor3, Matrix, Matrix, Matrix) {
    let len = dims[0] * dims[1] * dims[2];
    let truth = Tensor3::new(dims, (0..len).map(noise).collect()).unwrap();
    (Tensor3::filled(dims, 1.0), truth.margin_ij(), truth.margin_jk(), truth.margin_ik())
}

pub fn gompertz_q() -> Vec<f64> {
    (0..=100).map(|a| (1e-4 * (0.09 * a as f64).exp()).min(0.7)).collect()
}

/// `per_cell` persons in every age and sex of two municipalities, with a
/// flat death probability.
pub fn mortality_scenario(per_cell: f64, q: f64) -> Parameters {
    let ages = AgeClass::single_years(MAX_AGE);
    let level = RegionLevel::MunicipalitiesDistricts;
    let mut pop = CensusTable::new(ResolutionSpec::new(2000..=2000, level).with_sexes().with_ages(ages.clone()), ValueKind::Integer);
    let mut dp = CensusTable::new(
        ResolutionSpec::new(2000..=2004, RegionLevel::FederalStates).with_sexes().with_ages(ages.clone()),
        ValueKind::Real,
    );
    for s in [Sex::Male, Sex::Female] {
        for a in &ages {
            for m in ["10101", "30101"] {
                pop.set(CensusKey::new(2000, RegionId::new(m), s, Some(*a)), per_cell).unwrap();
            }
            for y in 2000..=2004 {
                for f in ["AT-1", "AT-3"] {
                    dp.set(CensusKey::new(y, RegionId::new(f), s, Some(*a)), q).unwrap();
                }
            }
        }
    }
    let mut p = Parameters::new(pop);
    p.deaths = Some(dp);
    p
}
