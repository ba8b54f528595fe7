//! Orderings of the class set for the classifier chain.
//!
//! An order is a permutation: position i holds the class decided i-th.
//! Score-derived orders break ties toward the smaller class index, so a
//! given score vector always yields the same permutation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrderError {
    #[error("not a permutation of 0..{classes}: {positions:?}")]
    NotAPermutation { classes: usize, positions: Vec<usize> },
    #[error("order needs at least one class")]
    Empty,
    #[error("score for class {0} is not finite")]
    NonFiniteScore(usize),
    #[error("unknown order strategy {0:?}")]
    UnknownStrategy(String),
}

/// How a chain order is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderStrategy {
    /// Best-detected class first, from per-class F1 of a reference model.
    HigherF1,
    /// Worst-detected class first.
    LowerF1,
    /// Most frequently active class first (training-split frame counts).
    HigherFreq,
    /// Rarest class first.
    LowerFreq,
    /// Seeded uniform shuffle.
    Random(u64),
}

impl OrderStrategy {
    /// True when deriving this order needs per-class F1 scores of a
    /// reference model.
    pub fn needs_reference_f1(&self) -> bool {
        matches!(self, OrderStrategy::HigherF1 | OrderStrategy::LowerF1)
    }

    /// True when deriving this order needs class frequencies.
    pub fn needs_frequencies(&self) -> bool {
        matches!(self, OrderStrategy::HigherFreq | OrderStrategy::LowerFreq)
    }
}

impl fmt::Display for OrderStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderStrategy::HigherF1 => write!(f, "higher-f1"),
            OrderStrategy::LowerF1 => write!(f, "lower-f1"),
            OrderStrategy::HigherFreq => write!(f, "higher-freq"),
            OrderStrategy::LowerFreq => write!(f, "lower-freq"),
            OrderStrategy::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for OrderStrategy {
    type Err = OrderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "higher-f1" => Ok(OrderStrategy::HigherF1),
            "lower-f1" => Ok(OrderStrategy::LowerF1),
            "higher-freq" => Ok(OrderStrategy::HigherFreq),
            "lower-freq" => Ok(OrderStrategy::LowerFreq),
            other => {
                if let Some(seed) = other.strip_prefix("random:") {
                    seed.parse::<u64>()
                        .map(OrderStrategy::Random)
                        .map_err(|_| OrderError::UnknownStrategy(other.to_string()))
                } else {
                    Err(OrderError::UnknownStrategy(other.to_string()))
                }
            }
        }
    }
}

/// A chain order: `positions[i]` is the class index decided at position i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassOrder {
    positions: Vec<usize>,
}

impl ClassOrder {
    pub fn from_permutation(positions: Vec<usize>) -> Result<Self, OrderError> {
        if positions.is_empty() {
            return Err(OrderError::Empty);
        }
        let classes = positions.len();
        let mut seen = vec![false; classes];
        for &p in &positions {
            if p >= classes || seen[p] {
                return Err(OrderError::NotAPermutation { classes, positions });
            }
            seen[p] = true;
        }
        Ok(ClassOrder { positions })
    }

    /// Class 0 first, class L-1 last.
    pub fn identity(classes: usize) -> Result<Self, OrderError> {
        ClassOrder::from_permutation((0..classes).collect())
    }

    /// Highest score first; ties go to the smaller class index.
    pub fn by_score_desc(scores: &[f64]) -> Result<Self, OrderError> {
        Self::by_score(scores, true)
    }

    /// Lowest score first; ties go to the smaller class index.
    pub fn by_score_asc(scores: &[f64]) -> Result<Self, OrderError> {
        Self::by_score(scores, false)
    }

    fn by_score(scores: &[f64], descending: bool) -> Result<Self, OrderError> {
        if scores.is_empty() {
            return Err(OrderError::Empty);
        }
        for (i, s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(OrderError::NonFiniteScore(i));
            }
        }
        let mut classes: Vec<usize> = (0..scores.len()).collect();
        classes.sort_by(|&a, &b| {
            let ord = scores[a].partial_cmp(&scores[b]).unwrap();
            let ord = if descending { ord.reverse() } else { ord };
            ord.then(a.cmp(&b))
        });
        ClassOrder::from_permutation(classes)
    }

    /// Seeded Fisher-Yates shuffle; the same seed always gives the same order.
    pub fn random(classes: usize, seed: u64) -> Result<Self, OrderError> {
        if classes == 0 {
            return Err(OrderError::Empty);
        }
        let mut positions: Vec<usize> = (0..classes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        positions.shuffle(&mut rng);
        ClassOrder::from_permutation(positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Class decided at a chain position.
    pub fn class_at(&self, position: usize) -> usize {
        self.positions[position]
    }

    /// Chain position at which a class is decided.
    pub fn position_of(&self, class: usize) -> Option<usize> {
        self.positions.iter().position(|&c| c == class)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.positions
    }

    /// Renders the order as class names joined by " > ".
    pub fn format_with_names(&self, names: &[String]) -> String {
        self.positions
            .iter()
            .map(|&c| names.get(c).map(|s| s.as_str()).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" > ")
    }
}

impl fmt::Display for ClassOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.positions.iter().map(|p| p.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}
