//! Frame-level causal cross-attention masks.
//!
//! Two causal rules are provided because they disagree at block boundaries:
//!
//! * [`MaskRule::CcamFloor`]: query `i` sees frame `j` iff `i >= j * floor(N / T)`.
//! * [`MaskRule::CcamContinuous`]: query `i` sees frame `j` iff `j * dt <= T_i`
//!   with `dt = D / T` and `T_i = (i + 1) D / N`, i.e. `j * N <= (i + 1) * T`.
//!
//! For `N = 4, T = 2` the floor rule hides frame 1 from query 1 while the
//! continuous rule shows it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::TokenMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRule {
    Full,
    #[default]
    CcamFloor,
    CcamContinuous,
}

impl MaskRule {
    pub const ALL: [MaskRule; 3] = [MaskRule::Full, MaskRule::CcamFloor, MaskRule::CcamContinuous];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskRule::Full => "full",
            MaskRule::CcamFloor => "ccam-floor",
            MaskRule::CcamContinuous => "ccam-continuous",
        }
    }

    /// Defining predicate of the rule, evaluated directly.
    pub fn visible(self, query: usize, frame: usize, n_queries: usize, n_frames: usize) -> bool {
        match self {
            MaskRule::Full => true,
            MaskRule::CcamFloor => query >= frame * (n_queries / n_frames),
            MaskRule::CcamContinuous => frame * n_queries <= (query + 1) * n_frames,
        }
    }

    pub fn build(self, n_queries: usize, n_frames: usize) -> Result<FrameMask> {
        match self {
            MaskRule::Full => build_full(n_queries, n_frames),
            MaskRule::CcamFloor => build_ccam_floor(n_queries, n_frames),
            MaskRule::CcamContinuous => build_ccam_continuous(n_queries, n_frames),
        }
    }
}

impl fmt::Display for MaskRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MaskRule::Full),
            "ccam-floor" | "ccam" => Ok(MaskRule::CcamFloor),
            "ccam-continuous" => Ok(MaskRule::CcamContinuous),
            other => Err(Error::invalid(format!(
                "unknown mask rule `{other}` (expected full, ccam-floor or ccam-continuous)"
            ))),
        }
    }
}

/// `n_queries x n_frames` visibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    n_queries: usize,
    n_frames: usize,
    bits: Vec<bool>,
    rule: MaskRule,
}

fn check_dims(n_queries: usize, n_frames: usize) -> Result<()> {
    if n_queries == 0 || n_frames == 0 {
        return Err(Error::invalid(format!(
            "mask dimensions must be positive (got {n_queries} queries, {n_frames} frames)"
        )));
    }
    Ok(())
}

fn from_rule(rule: MaskRule, n_queries: usize, n_frames: usize) -> FrameMask {
    let mut bits = Vec::with_capacity(n_queries * n_frames);
    for i in 0..n_queries {
        for j in 0..n_frames {
            bits.push(rule.visible(i, j, n_queries, n_frames));
        }
    }
    FrameMask {
        n_queries,
        n_frames,
        bits,
        rule,
    }
}

pub fn build_full(n_queries: usize, n_frames: usize) -> Result<FrameMask> {
    check_dims(n_queries, n_frames)?;
    Ok(from_rule(MaskRule::Full, n_queries, n_frames))
}

/// Block-causal mask with block size `floor(N / T)`. Requires `N >= T`; with
/// fewer queries than frames the block size is zero and the mask would
/// silently become full.
pub fn build_ccam_floor(n_queries: usize, n_frames: usize) -> Result<FrameMask> {
    check_dims(n_queries, n_frames)?;
    if n_queries < n_frames {
        return Err(Error::invalid(format!(
            "ccam-floor needs n_queries >= n_frames (got {n_queries} < {n_frames}); use ccam-continuous"
        )));
    }
    Ok(from_rule(MaskRule::CcamFloor, n_queries, n_frames))
}

pub fn build_ccam_continuous(n_queries: usize, n_frames: usize) -> Result<FrameMask> {
    check_dims(n_queries, n_frames)?;
    Ok(from_rule(MaskRule::CcamContinuous, n_queries, n_frames))
}

impl FrameMask {
    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn rule(&self) -> MaskRule {
        self.rule
    }

    #[inline]
    pub fn get(&self, query: usize, frame: usize) -> bool {
        self.bits[query * self.n_frames + frame]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.bits[query * self.n_frames..(query + 1) * self.n_frames]
    }

    /// Number of leading frames visible to `query`.
    pub fn prefix_len(&self, query: usize) -> usize {
        self.row(query).iter().take_while(|&&b| b).count()
    }

    /// Frames visible to `query`, ascending.
    pub fn visible_frames(&self, query: usize) -> Vec<usize> {
        (0..self.n_frames).filter(|&j| self.get(query, j)).collect()
    }

    /// Checks the structural invariants: every row non-empty and a prefix,
    /// prefixes non-decreasing, last row complete.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prev = 0;
        for i in 0..self.n_queries {
            let len = self.prefix_len(i);
            if len == 0 {
                return Err(Error::EmptyMaskRow { row: i });
            }
            if self.row(i)[len..].contains(&true) {
                return Err(Error::invalid(format!("mask row {i} is not a prefix")));
            }
            if len < prev {
                return Err(Error::invalid(format!("mask row {i} shrinks coverage")));
            }
            prev = len;
        }
        if prev != self.n_frames {
            return Err(Error::invalid("last mask row is not all-true"));
        }
        Ok(())
    }

    /// Replicates each frame column `tokens_per_frame` times.
    pub fn expand_to_tokens(&self, tokens_per_frame: usize) -> Result<TokenMask> {
        if tokens_per_frame == 0 {
            return Err(Error::invalid("tokens per frame must be positive"));
        }
        let n_keys = self.n_frames * tokens_per_frame;
        let mut bits = Vec::with_capacity(self.n_queries * n_keys);
        for i in 0..self.n_queries {
            for &b in self.row(i) {
                bits.extend(std::iter::repeat_n(b, tokens_per_frame));
            }
        }
        TokenMask::from_bits(self.n_queries, n_keys, bits)
    }

    /// Rows of `0`/`1` separated by spaces, one line per query.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n_queries * (2 * self.n_frames + 1));
        for i in 0..self.n_queries {
            let line: Vec<&str> = self.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Header `query,f0,f1,...` followed by one `0`/`1` row per query.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query");
        for j in 0..self.n_frames {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for i in 0..self.n_queries {
            s.push_str(&i.to_string());
            for &b in self.row(i) {
                s.push_str(if b { ",1" } else { ",0" });
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &FrameMask) -> Vec<Vec<u8>> {
        (0..m.n_queries())
            .map(|i| m.row(i).iter().map(|&b| b as u8).collect())
            .collect()
    }

    #[test]
    fn full_masks() {
        assert_eq!(rows(&build_full(4, 2).unwrap()), vec![vec![1, 1]; 4]);
        assert_eq!(rows(&build_full(1, 1).unwrap()), vec![vec![1]]);
        let big = build_full(1024, 16).unwrap();
        assert!((0..1024).all(|i| big.prefix_len(i) == 16));
        assert_eq!(big.rule(), MaskRule::Full);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(build_full(0, 2).is_err());
        assert!(build_ccam_floor(3, 0).is_err());
        assert!(build_ccam_continuous(0, 0).is_err());
    }

    #[test]
    fn floor_small_cases() {
        assert_eq!(rows(&build_ccam_floor(4, 2).unwrap()), vec![vec![1, 0], vec![1, 0], vec![1, 1], vec![1, 1]]);
        assert_eq!(
            rows(&build_ccam_floor(3, 3).unwrap()),
            vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]
        );
    }

    #[test]
    fn floor_at_default_query_count() {
        let m = build_ccam_floor(1024, 16).unwrap();
        assert_eq!(m.visible_frames(63), vec![0]);
        assert_eq!(m.visible_frames(64), vec![0, 1]);
        assert_eq!(m.prefix_len(1023), 16);
    }

    #[test]
    fn floor_rejects_fewer_queries_than_frames() {
        let msg = build_ccam_floor(2, 4).unwrap_err().to_string();
        assert!(msg.contains("ccam-continuous"), "{msg}");
    }

    #[test]
    fn continuous_small_cases() {
        let m = build_ccam_continuous(4, 2).unwrap();
        assert_eq!(rows(&m), vec![vec![1, 0], vec![1, 1], vec![1, 1], vec![1, 1]]);
        assert_ne!(m.row(1), build_ccam_floor(4, 2).unwrap().row(1));
        assert_eq!(
            rows(&build_ccam_continuous(3, 3).unwrap()),
            vec![vec![1, 1, 0], vec![1, 1, 1], vec![1, 1, 1]]
        );
        for n in 1..6 {
            assert!(build_ccam_continuous(n, 1).unwrap().row(0) == [true]);
        }
    }

    #[test]
    fn continuous_allows_fewer_queries_than_frames() {
        let m = build_ccam_continuous(2, 8).unwrap();
        m.check_invariants().unwrap();
        assert_eq!(m.prefix_len(0), 5);
    }

    #[test]
    fn expansion() {
        let one_row = FrameMask {
            n_queries: 1,
            n_frames: 2,
            bits: vec![true, false],
            rule: MaskRule::CcamFloor,
        };
        let t = one_row.expand_to_tokens(3).unwrap();
        assert_eq!(t.row(0), &[true, true, true, false, false, false]);

        let t = build_full(3, 2).unwrap().expand_to_tokens(2).unwrap();
        assert_eq!((t.n_queries(), t.n_keys()), (3, 4));
        assert!((0..3).all(|q| t.row(q).iter().all(|&b| b)));

        let t = build_ccam_floor(4, 2).unwrap().expand_to_tokens(2).unwrap();
        assert_eq!(t.row(1), &[true, true, false, false]);

        assert!(one_row.expand_to_tokens(0).is_err());
    }

    #[test]
    fn text_dumps() {
        let m = build_ccam_floor(4, 2).unwrap();
        assert_eq!(m.to_grid(), "1 0\n1 0\n1 1\n1 1\n");
        assert_eq!(m.to_csv(), "query,f0,f1\n0,1,0\n1,1,0\n2,1,1\n3,1,1\n");
    }

    #[test]
    fn rule_names_round_trip() {
        for rule in MaskRule::ALL {
            assert_eq!(rule.as_str().parse::<MaskRule>().unwrap(), rule);
        }
        assert!("causal".parse::<MaskRule>().is_err());
    }
}
