use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::Error;
use crate::matrix::AdditiveMask;

/// Declarative description of which (query i, key j) pairs may attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSpec {
    /// Every pair.
    Full,
    /// `j <= i`.
    GlobalCausal,
    /// `0 <= i - j <= span`: the current token plus `span` predecessors.
    LocalCausal { span: usize },
    /// `i - left <= j <= i + right`.
    TwoSidedLocal { left: usize, right: usize },
}

impl MaskSpec {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            MaskSpec::Full => true,
            MaskSpec::GlobalCausal => j <= i,
            MaskSpec::LocalCausal { span } => j <= i && i - j <= span,
            MaskSpec::TwoSidedLocal { left, right } => j + left >= i && j <= i + right,
        }
    }

    /// Contiguous key positions query `i` may see among `n_keys` keys.
    #[inline]
    pub fn key_range(&self, i: usize, n_keys: usize) -> Range<usize> {
        let (lo, hi) = match *self {
            MaskSpec::Full => (0, n_keys),
            MaskSpec::GlobalCausal => (0, i + 1),
            MaskSpec::LocalCausal { span } => (i.saturating_sub(span), i + 1),
            MaskSpec::TwoSidedLocal { left, right } => (
                i.saturating_sub(left),
                i.saturating_add(right).saturating_add(1),
            ),
        };
        let hi = hi.min(n_keys);
        lo.min(hi)..hi
    }

    /// Number of allowed pairs in an `n x n` mask.
    pub fn allowed_pairs(&self, n: usize) -> u64 {
        (0..n).map(|i| self.key_range(i, n).len() as u64).sum()
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Full => write!(f, "full"),
            MaskSpec::GlobalCausal => write!(f, "global"),
            MaskSpec::LocalCausal { span } => write!(f, "local:{span}"),
            MaskSpec::TwoSidedLocal { left, right } => write!(f, "two-sided:{left}:{right}"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    /// Accepts `full`, `global`, `local:<span>` and `two-sided:<left>:<right>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::InvalidArgument(format!("unrecognized mask '{s}'"));
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["full"] => Ok(MaskSpec::Full),
            ["global"] | ["global-causal"] => Ok(MaskSpec::GlobalCausal),
            ["local", span] | ["local-causal", span] => {
                Ok(MaskSpec::LocalCausal { span: num(span)? })
            }
            ["two-sided", l, r] => Ok(MaskSpec::TwoSidedLocal {
                left: num(l)?,
                right: num(r)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Materializes `spec` as an `n x n` boolean mask.
pub fn build_mask(spec: &MaskSpec, n: usize) -> AdditiveMask {
    AdditiveMask::from_fn(n, n, |i, j| spec.allows(i, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_causal_is_lower_triangle() {
        let m = build_mask(&MaskSpec::GlobalCausal, 3);
        assert_eq!(m.allowed_count(), 6);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_allowed(i, j), j <= i);
            }
            assert_eq!(m.row_count(i), i + 1);
        }
    }

    #[test]
    fn local_span_two_over_six_tokens() {
        let m = build_mask(&MaskSpec::LocalCausal { span: 2 }, 6);
        assert_eq!(m.allowed_count(), 15);
        let per_row: Vec<usize> = (0..6).map(|i| m.row_count(i)).collect();
        assert_eq!(per_row, vec![1, 2, 3, 3, 3, 3]);
        assert!(m.is_allowed(4, 4) && m.is_allowed(4, 2) && !m.is_allowed(4, 1));
    }

    #[test]
    fn wide_window_collapses_to_global() {
        for n in 1..10 {
            let g = build_mask(&MaskSpec::GlobalCausal, n);
            for span in n - 1..n + 3 {
                assert_eq!(build_mask(&MaskSpec::LocalCausal { span }, n), g);
            }
        }
    }

    #[test]
    fn key_range_agrees_with_allows() {
        let specs = [
            MaskSpec::Full,
            MaskSpec::GlobalCausal,
            MaskSpec::LocalCausal { span: 0 },
            MaskSpec::LocalCausal { span: 3 },
            MaskSpec::TwoSidedLocal { left: 2, right: 1 },
            MaskSpec::TwoSidedLocal { left: 0, right: 0 },
        ];
        for spec in specs {
            for n in 1..9 {
                for i in 0..n {
                    let r = spec.key_range(i, n);
                    for j in 0..n {
                        assert_eq!(
                            r.contains(&j),
                            spec.allows(i, j),
                            "{spec} n={n} i={i} j={j}"
                        );
                    }
                }
                assert_eq!(
                    spec.allowed_pairs(n) as usize,
                    build_mask(&spec, n).allowed_count()
                );
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for spec in [
            MaskSpec::Full,
            MaskSpec::GlobalCausal,
            MaskSpec::LocalCausal { span: 50 },
            MaskSpec::TwoSidedLocal { left: 4, right: 2 },
        ] {
            assert_eq!(spec.to_string().parse::<MaskSpec>().unwrap(), spec);
        }
        assert!("local".parse::<MaskSpec>().is_err());
        assert!("sparse:3".parse::<MaskSpec>().is_err());
    }
}
