//! The three two-wave average treatment effects.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lambda {
    /// `E[Y_{1,0}] - E[Y_{0,0}]`
    L10,
    /// `E[Y_{0,1}] - E[Y_{0,0}]`
    L01,
    /// `E[Y_{1,1}] - E[Y_{1,0}]`
    L11,
}

impl Lambda {
    pub const ALL: [Lambda; 3] = [Lambda::L10, Lambda::L01, Lambda::L11];

    /// `(treated arm, reference arm)` as `(a1, a2)` pairs.
    pub fn arms(self) -> ((u8, u8), (u8, u8)) {
        match self {
            Lambda::L10 => ((1, 0), (0, 0)),
            Lambda::L01 => ((0, 1), (0, 0)),
            Lambda::L11 => ((1, 1), (1, 0)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lambda::L10 => "lambda10",
            Lambda::L01 => "lambda01",
            Lambda::L11 => "lambda11",
        }
    }
}

/// The four two-wave arms in lexicographic order.
pub const ARMS: [(u8, u8); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

pub fn arm_index(arm: (u8, u8)) -> usize {
    (arm.0 as usize) * 2 + arm.1 as usize
}

/// Estimates of all three contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteTriple {
    pub l10: f64,
    pub l01: f64,
    pub l11: f64,
}

impl AteTriple {
    /// True effects of the two-wave benchmark in every setting.
    pub const TRUTH: AteTriple = AteTriple {
        l10: 0.2,
        l01: 0.2,
        l11: 0.3,
    };

    pub fn get(&self, l: Lambda) -> f64 {
        match l {
            Lambda::L10 => self.l10,
            Lambda::L01 => self.l01,
            Lambda::L11 => self.l11,
        }
    }

    /// Builds the triple from arm means indexed by [`arm_index`].
    pub fn from_arm_means(m: &[f64; 4]) -> Self {
        let at = |a: (u8, u8)| m[arm_index(a)];
        AteTriple {
            l10: at((1, 0)) - at((0, 0)),
            l01: at((0, 1)) - at((0, 0)),
            l11: at((1, 1)) - at((1, 0)),
        }
    }
}

/// Arm with the largest outcome; ties go to the lexicographically smallest arm.
pub fn best_arm(outcomes: &[f64; 4]) -> (u8, u8) {
    let mut best = 0;
    for k in 1..4 {
        if outcomes[k] > outcomes[best] {
            best = k;
        }
    }
    ARMS[best]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_arm_tie_break() {
        assert_eq!(best_arm(&[1.0; 4]), (0, 0));
        assert_eq!(best_arm(&[0.0, 2.0, 2.0, 1.0]), (0, 1));
        assert_eq!(best_arm(&[0.0, 0.0, 0.0, 0.1]), (1, 1));
    }

    #[test]
    fn contrasts_from_arm_means() {
        let t = AteTriple::from_arm_means(&[0.0, 0.2, 0.2, 0.5]);
        assert!((t.l10 - 0.2).abs() < 1e-15 && (t.l01 - 0.2).abs() < 1e-15 && (t.l11 - 0.3).abs() < 1e-15);
    }
}
