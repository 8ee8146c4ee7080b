use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::stats::LevelStats;

/// Which variance estimator drives the gradient samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Single ordered set with circular neighbours.
    #[default]
    Shifted,
    /// Every sample paired with an independent partner realization.
    TwoSet,
}

impl SamplerKind {
    fn name(self) -> &'static str {
        match self {
            SamplerKind::Shifted => "shifted",
            SamplerKind::TwoSet => "two-set",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "shifted" => Some(SamplerKind::Shifted),
            "two-set" => Some(SamplerKind::TwoSet),
            _ => None,
        }
    }
}

/// Deterministic stream of 64-bit seeds derived from a master seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSequence {
    master: u64,
    counter: u64,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedSequence {
    pub fn new(master: u64) -> Self {
        SeedSequence { master, counter: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = splitmix64(self.master ^ splitmix64(self.counter));
        self.counter += 1;
        s
    }

    pub fn drawn(&self) -> u64 {
        self.counter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenLevel {
    pub level: usize,
    pub base_seed: u64,
    /// Samples use indices `0..count` of the ordered set.
    pub count: usize,
}

/// Seeds and counts of a finished estimator run; replaying it is
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenSampleSet {
    pub levels: Vec<FrozenLevel>,
    pub epsilon: f64,
    pub return_level: usize,
    pub sampler: SamplerKind,
    #[serde(skip)]
    pub stats: Vec<LevelStats>,
}

impl FrozenSampleSet {
    /// Finest level `L` holding samples.
    pub fn finest_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.count).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Format {
            what: "frozen sample set",
            reason,
        };
        if self.levels.is_empty() {
            return Err(bad("no levels".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.level != i {
                return Err(bad(format!("level {} listed at position {i}", l.level)));
            }
            if l.count == 0 {
                return Err(bad(format!("level {i} has no samples")));
            }
        }
        if self.finest_level() > self.return_level {
            return Err(bad("finest level exceeds return level".into()));
        }
        Ok(())
    }

    /// Text form, one `level` line per level:
    ///
    /// ```text
    /// frozen-sample-set 1
    /// epsilon 1e-2
    /// finest-level 2
    /// return-level 3
    /// sampler shifted
    /// level 0 seed 1234 range 0..140 count 140
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::from("frozen-sample-set 1\n");
        let _ = writeln!(s, "epsilon {:e}", self.epsilon);
        let _ = writeln!(s, "finest-level {}", self.finest_level());
        let _ = writeln!(s, "return-level {}", self.return_level);
        let _ = writeln!(s, "sampler {}", self.sampler.name());
        for l in &self.levels {
            let _ = writeln!(
                s,
                "level {} seed {} range 0..{} count {}",
                l.level, l.base_seed, l.count, l.count
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "frozen sample set",
            reason,
        };
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("frozen-sample-set 1") {
            return Err(bad("missing header line".into()));
        }
        let mut epsilon = None;
        let mut finest = None;
        let mut return_level = None;
        let mut sampler = None;
        let mut levels = Vec::new();
        for line in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("`{line}`: {e}")));
            match t.as_slice() {
                ["epsilon", v] => {
                    epsilon = Some(v.parse::<f64>().map_err(|e| bad(format!("epsilon: {e}")))?)
                }
                ["finest-level", v] => finest = Some(num(v)? as usize),
                ["return-level", v] => return_level = Some(num(v)? as usize),
                ["sampler", v] => {
                    sampler = Some(SamplerKind::parse(v).ok_or_else(|| bad(format!("unknown sampler `{v}`")))?)
                }
                ["level", l, "seed", seed, "range", range, "count", count] => {
                    let (lo, hi) = range
                        .split_once("..")
                        .ok_or_else(|| bad(format!("bad range `{range}`")))?;
                    let count = num(count)? as usize;
                    if num(lo)? != 0 || num(hi)? as usize != count {
                        return Err(bad(format!("range `{range}` does not match count {count}")));
                    }
                    levels.push(FrozenLevel {
                        level: num(l)? as usize,
                        base_seed: num(seed)?,
                        count,
                    });
                }
                _ => return Err(bad(format!("unrecognized line `{line}`"))),
            }
        }
        let set = FrozenSampleSet {
            levels,
            epsilon: epsilon.ok_or_else(|| bad("missing epsilon".into()))?,
            return_level: return_level.ok_or_else(|| bad("missing return-level".into()))?,
            sampler: sampler.unwrap_or_default(),
            stats: Vec::new(),
        };
        set.validate()?;
        if let Some(f) = finest {
            if f != set.finest_level() {
                return Err(bad(format!("finest-level {f} but {} levels listed", set.levels.len())));
            }
        }
        Ok(set)
    }
}
