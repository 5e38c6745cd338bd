//! Long-format CSV for census tables.
//!
//! Columns are `year,region,sex,age,value`; flow tables use
//! `year,region,sex,region2,value` or `year,region,sex,age,region2,value`.
//! `-` marks an absent sex or age. Values use the shortest round-trip
//! decimal form.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::census::{AgeClass, CensusKey, CensusTable, RegionId, ResolutionSpec, Sex, ValueKind};
use crate::error::{Error, Result};
use crate::region::{validate_code, RegionLevel};

pub fn write_table<W: Write>(table: &CensusTable, w: W) -> Result<()> {
    let res = table.resolution();
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let with_age = !res.od || res.ages.is_some();
    let mut header = vec!["year", "region", "sex"];
    if with_age {
        header.push("age");
    }
    if res.od {
        header.push("region2");
    }
    header.push("value");
    wtr.write_record(&header)?;
    for (k, v) in table.iter() {
        let mut rec = vec![k.year.to_string(), k.region.to_string(), k.sex.token().to_string()];
        if with_age {
            rec.push(k.age.map_or_else(|| "-".to_string(), |a| a.to_string()));
        }
        if let Some(r2) = &k.region2 {
            rec.push(r2.to_string());
        }
        rec.push(format_value(v));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

pub fn save_table(table: &CensusTable, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
    }
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_table(table, &mut w)?;
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Constraints applied when reading.
#[derive(Clone, Debug, Default)]
pub struct ReadOptions {
    /// Region level; inferred from the codes when absent.
    pub level: Option<RegionLevel>,
    pub kind: Option<ValueKind>,
    /// Age classes of the resolution; the classes seen when absent.
    pub ages: Option<Vec<AgeClass>>,
}

impl ReadOptions {
    pub fn level(level: RegionLevel) -> Self {
        ReadOptions { level: Some(level), ..Default::default() }
    }
}

pub fn load_table(path: &Path, opts: &ReadOptions) -> Result<CensusTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_table(std::io::BufReader::new(f), opts).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub fn read_table<R: Read>(reader: R, opts: &ReadOptions) -> Result<CensusTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let allowed = [
        vec!["year", "region", "sex", "age", "value"],
        vec!["year", "region", "sex", "region2", "value"],
        vec!["year", "region", "sex", "age", "region2", "value"],
    ];
    if !allowed.iter().any(|a| a.iter().map(|s| s.to_string()).collect::<Vec<_>>() == headers) {
        return Err(Error::Parse { line: 1, msg: format!("unexpected columns {}", headers.join(",")) });
    }
    let has_age = headers.iter().any(|h| h == "age");
    let od = headers.iter().any(|h| h == "region2");
    let mut rows: Vec<(CensusKey, f64, usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let perr = |msg: String| Error::Parse { line, msg };
        let year: i32 = rec[0].trim().parse().map_err(|_| perr(format!("bad year {:?}", &rec[0])))?;
        let region = RegionId::new(rec[1].trim());
        let sex: Sex = rec[2].trim().parse().map_err(|e: Error| perr(e.to_string()))?;
        let mut col = 3;
        let age = if has_age {
            let tok = rec[col].trim();
            col += 1;
            if tok == "-" {
                None
            } else {
                Some(tok.parse::<AgeClass>().map_err(|e| perr(e.to_string()))?)
            }
        } else {
            None
        };
        let region2 = if od {
            let r = RegionId::new(rec[col].trim());
            col += 1;
            Some(r)
        } else {
            None
        };
        let value: f64 = rec[col].trim().parse().map_err(|_| perr(format!("bad value {:?}", &rec[col])))?;
        rows.push((CensusKey { year, region, sex, age, region2 }, value, line));
    }

    let codes: BTreeSet<&str> = rows
        .iter()
        .flat_map(|(k, _, _)| std::iter::once(k.region.as_str()).chain(k.region2.as_ref().map(|r| r.as_str())))
        .collect();
    let level = match opts.level {
        Some(l) => l,
        None => infer_level(&codes)?,
    };
    for (k, _, line) in &rows {
        validate_code(k.region.as_str(), level).map_err(|e| Error::Parse { line: *line, msg: e.to_string() })?;
        if let Some(r2) = &k.region2 {
            validate_code(r2.as_str(), level).map_err(|e| Error::Parse { line: *line, msg: e.to_string() })?;
        }
    }
    let (first_year, last_year) = match (rows.iter().map(|r| r.0.year).min(), rows.iter().map(|r| r.0.year).max()) {
        (Some(a), Some(b)) => (a, b),
        _ => (0, 0),
    };
    let sexes: BTreeSet<Sex> = rows.iter().map(|r| r.0.sex).collect();
    let sexes = if sexes.is_empty() || sexes == BTreeSet::from([Sex::Total]) {
        None
    } else if sexes.contains(&Sex::Total) {
        return Err(Error::Parse { line: 2, msg: "mixes '-' with m/f in the sex column".into() });
    } else {
        Some(vec![Sex::Male, Sex::Female])
    };
    let seen_ages: BTreeSet<Option<AgeClass>> = rows.iter().map(|r| r.0.age).collect();
    let ages = if !has_age || seen_ages.iter().all(|a| a.is_none()) {
        None
    } else if seen_ages.contains(&None) {
        return Err(Error::Parse { line: 2, msg: "mixes '-' with age classes".into() });
    } else {
        Some(match &opts.ages {
            Some(a) => a.clone(),
            None => seen_ages.into_iter().flatten().collect(),
        })
    };
    let res = ResolutionSpec { first_year, last_year, level, sexes, ages, od };
    let kind = match opts.kind {
        Some(k) => k,
        None if rows.iter().any(|r| r.1 < 0.0) => ValueKind::Signed,
        None if rows.iter().all(|r| r.1.fract() == 0.0) => ValueKind::Integer,
        None => ValueKind::Real,
    };
    let mut cells = BTreeMap::new();
    let mut table = CensusTable::new(res, kind);
    for (k, v, line) in rows {
        if cells.insert(k.clone(), ()).is_some() {
            return Err(Error::Parse { line, msg: format!("duplicate key {k}") });
        }
        table.set(k, v).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
    }
    Ok(table)
}

/// Finest level at which every code is valid. Registration districts are
/// only inferred when a 7-digit code is present.
fn infer_level(codes: &BTreeSet<&str>) -> Result<RegionLevel> {
    if codes.is_empty() {
        return Ok(RegionLevel::Country);
    }
    let seven = codes.iter().any(|c| c.len() == 7);
    for level in RegionLevel::ALL.iter().rev() {
        if *level == RegionLevel::MunicipalitiesRegistrationDistricts && !seven {
            continue;
        }
        if codes.iter().all(|c| validate_code(c, *level).is_ok()) {
            return Ok(*level);
        }
    }
    Err(Error::Parse { line: 2, msg: "region codes fit no single level".into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitexact() {
        let text = "year,region,sex,age,value\n2000,90101,m,100+,0.1\n2000,90101,f,0,1\n2001,10101,m,5,12.5\n";
        let t = read_table(text.as_bytes(), &ReadOptions::default()).unwrap();
        assert_eq!(t.level(), RegionLevel::MunicipalitiesDistricts);
        assert_eq!(t.kind(), ValueKind::Real);
        let mut out = Vec::new();
        write_table(&t, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn od_header() {
        let text = "year,region,sex,region2,value\n2000,901,-,902,3\n";
        let t = read_table(text.as_bytes(), &ReadOptions::default()).unwrap();
        assert!(t.resolution().od);
        let mut out = Vec::new();
        write_table(&t, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn rejects_unknown_columns_and_codes() {
        assert!(read_table("year,region,sex,age,value,x\n".as_bytes(), &ReadOptions::default()).is_err());
        assert!(read_table(
            "year,region,sex,age,value\n2000,900,m,1,1\n".as_bytes(),
            &ReadOptions::level(RegionLevel::DistrictsDistricts)
        )
        .is_err());
        assert!(read_table("year,region,sex,age,value\n2000,AT,m,1,1\n2000,AT,m,1,2\n".as_bytes(), &ReadOptions::default()).is_err());
    }

    #[test]
    fn shortest_roundtrip_floats() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456789.0, 2.5e20] {
            assert_eq!(format_value(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(format_value(5.0), "5");
    }
}
