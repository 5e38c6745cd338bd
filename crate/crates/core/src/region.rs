//! Austrian region codes, their levels and the coarsening partial order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Region code. Cheap to clone.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(Arc<str>);

impl RegionId {
    pub fn new(code: &str) -> Self {
        RegionId(Arc::from(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn country() -> Self {
        RegionId::new("AT")
    }
}

impl fmt::Debug for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RegionId {
    fn from(s: &str) -> Self {
        RegionId::new(s)
    }
}

impl std::borrow::Borrow<str> for RegionId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionLevel {
    Country,
    FederalStates,
    Districts,
    DistrictsDistricts,
    Municipalities,
    MunicipalitiesDistricts,
    MunicipalitiesRegistrationDistricts,
}

/// How one level relates to another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelOrder {
    Equal,
    Finer,
    Coarser,
    Incomparable,
}

impl RegionLevel {
    pub const ALL: [RegionLevel; 7] = [
        RegionLevel::Country,
        RegionLevel::FederalStates,
        RegionLevel::Districts,
        RegionLevel::DistrictsDistricts,
        RegionLevel::Municipalities,
        RegionLevel::MunicipalitiesDistricts,
        RegionLevel::MunicipalitiesRegistrationDistricts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegionLevel::Country => "country",
            RegionLevel::FederalStates => "federalstates",
            RegionLevel::Districts => "districts",
            RegionLevel::DistrictsDistricts => "districts_districts",
            RegionLevel::Municipalities => "municipalities",
            RegionLevel::MunicipalitiesDistricts => "municipalities_districts",
            RegionLevel::MunicipalitiesRegistrationDistricts => {
                "municipalities_registrationdistricts"
            }
        }
    }

    fn rank(self) -> u8 {
        self as u8
    }

    /// Relation of `self` to `other`.
    pub fn compare(self, other: RegionLevel) -> LevelOrder {
        use RegionLevel::*;
        if self == other {
            return LevelOrder::Equal;
        }
        let pair = (self, other);
        if pair == (Municipalities, DistrictsDistricts) || pair == (DistrictsDistricts, Municipalities)
        {
            return LevelOrder::Incomparable;
        }
        if self.rank() > other.rank() {
            LevelOrder::Finer
        } else {
            LevelOrder::Coarser
        }
    }

    /// True when `self` is equal to or coarser than `other`.
    pub fn is_coarser_or_equal(self, other: RegionLevel) -> bool {
        matches!(self.compare(other), LevelOrder::Equal | LevelOrder::Coarser)
    }

    pub fn is_finer_or_equal(self, other: RegionLevel) -> bool {
        matches!(self.compare(other), LevelOrder::Equal | LevelOrder::Finer)
    }
}

impl fmt::Display for RegionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegionLevel::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown region level {s:?}")))
    }
}

/// Greatest lower bound of two levels in the coarsening order: the coarsest
/// level both can be aggregated to.
pub fn common_coarser(a: RegionLevel, b: RegionLevel) -> RegionLevel {
    match a.compare(b) {
        LevelOrder::Equal | LevelOrder::Coarser => a,
        LevelOrder::Finer => b,
        LevelOrder::Incomparable => RegionLevel::Districts,
    }
}

fn digits(s: &str, n: usize) -> bool {
    s.len() == n && s.bytes().all(|b| b.is_ascii_digit())
}

fn vienna_subdistrict(prefix: &str) -> bool {
    matches!(prefix.parse::<u32>(), Ok(901..=923))
}

/// Checks that `code` is a well formed code at `level`.
pub fn validate_code(code: &str, level: RegionLevel) -> Result<()> {
    use RegionLevel::*;
    let ok = match level {
        Country => code == "AT",
        FederalStates => {
            code.len() == 4 && code.starts_with("AT-") && matches!(code.as_bytes()[3], b'1'..=b'9')
        }
        Districts => {
            digits(code, 3) && !code.starts_with('0') && (!code.starts_with('9') || code == "900")
        }
        DistrictsDistricts => {
            digits(code, 3) && !code.starts_with('0') && (!code.starts_with('9') || vienna_subdistrict(code))
        }
        Municipalities => {
            digits(code, 5) && !code.starts_with('0') && (!code.starts_with('9') || code == "90001")
        }
        MunicipalitiesDistricts => {
            digits(code, 5)
                && !code.starts_with('0')
                && (!code.starts_with('9') || vienna_subdistrict(&code[..3]))
        }
        MunicipalitiesRegistrationDistricts => {
            if code.starts_with('9') {
                digits(code, 7) && vienna_subdistrict(&code[..3])
            } else {
                digits(code, 5) && !code.starts_with('0')
            }
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidRegion { code: code.to_string(), level: level.to_string() })
    }
}

/// Maps a code at `from` to its ancestor at the coarser level `to`.
pub fn parent_region(id: &RegionId, from: RegionLevel, to: RegionLevel) -> Result<RegionId> {
    use RegionLevel::*;
    let code = id.as_str();
    validate_code(code, from)?;
    match to.compare(from) {
        LevelOrder::Equal => return Ok(id.clone()),
        LevelOrder::Coarser => {}
        LevelOrder::Incomparable => {
            return Err(Error::IncomparableLevels { from: from.to_string(), to: to.to_string() })
        }
        LevelOrder::Finer => {
            return Err(Error::NotCoarser { from: from.to_string(), to: to.to_string() })
        }
    }
    let vienna = code.starts_with('9');
    let out = match to {
        Country => "AT".to_string(),
        FederalStates => format!("AT-{}", &code[..1]),
        Districts => {
            if vienna {
                "900".to_string()
            } else {
                code[..3].to_string()
            }
        }
        DistrictsDistricts => code[..3].to_string(),
        Municipalities => {
            if vienna {
                "90001".to_string()
            } else {
                code[..5].to_string()
            }
        }
        MunicipalitiesDistricts => code[..5].to_string(),
        MunicipalitiesRegistrationDistricts => unreachable!("no level is finer"),
    };
    Ok(RegionId::new(&out))
}

/// Region universe per level, loaded from a `code,level` manifest and closed
/// under coarsening.
#[derive(Clone, Debug, Default)]
pub struct RegionHierarchy {
    levels: BTreeMap<RegionLevel, BTreeSet<RegionId>>,
}

impl RegionHierarchy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a code and every ancestor at comparable coarser levels.
    pub fn insert(&mut self, code: &str, level: RegionLevel) -> Result<()> {
        validate_code(code, level)?;
        let id = RegionId::new(code);
        for to in RegionLevel::ALL {
            if to != level && to.compare(level) == LevelOrder::Coarser {
                let p = parent_region(&id, level, to)?;
                self.levels.entry(to).or_default().insert(p);
            }
        }
        self.levels.entry(level).or_default().insert(id);
        Ok(())
    }

    pub fn read_manifest<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["code", "level"] {
            return Err(Error::Parse { line: 1, msg: "expected header code,level".into() });
        }
        let mut h = RegionHierarchy::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let level: RegionLevel = rec[1]
                .trim()
                .parse()
                .map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?;
            h.insert(rec[0].trim(), level)
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        }
        Ok(h)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_manifest(f)
    }

    /// Writes the codes at the levels that were not derived from finer ones.
    pub fn write_manifest<W: std::io::Write>(&self, w: W, levels: &[RegionLevel]) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wtr.write_record(["code", "level"])?;
        for &l in levels {
            for id in self.regions(l) {
                wtr.write_record([id.as_str(), l.name()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn regions(&self, level: RegionLevel) -> Vec<RegionId> {
        self.levels.get(&level).map(|s| s.iter().cloned().collect()).unwrap_or_default()
    }

    pub fn contains(&self, id: &RegionId, level: RegionLevel) -> bool {
        self.levels.get(&level).is_some_and(|s| s.contains(id))
    }

    /// Codes at `child_level` whose ancestor at `parent_level` is `parent`.
    pub fn children(
        &self,
        parent: &RegionId,
        parent_level: RegionLevel,
        child_level: RegionLevel,
    ) -> Result<Vec<RegionId>> {
        match parent_level.compare(child_level) {
            LevelOrder::Equal => return Ok(vec![parent.clone()]),
            LevelOrder::Coarser => {}
            LevelOrder::Incomparable => {
                return Err(Error::IncomparableLevels {
                    from: child_level.to_string(),
                    to: parent_level.to_string(),
                })
            }
            LevelOrder::Finer => {
                return Err(Error::NotCoarser {
                    from: child_level.to_string(),
                    to: parent_level.to_string(),
                })
            }
        }
        let mut out = Vec::new();
        for c in self.levels.get(&child_level).into_iter().flatten() {
            if &parent_region(c, child_level, parent_level)? == parent {
                out.push(c.clone());
            }
        }
        Ok(out)
    }
}
