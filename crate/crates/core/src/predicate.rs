//! Split predicates on a single attribute.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::database::AttrRef;
use crate::relstore::{Datum, NULL_KEY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "snake_case")]
pub enum SplitOp {
    /// Numeric `A <= v`.
    Le(f64),
    /// Categorical `A == code`.
    Eq(u32),
}

/// `attr op value`, or its complement when `negated`. Nulls go to the
/// non-negated side iff `missing_left`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPredicate {
    /// Position of `attr` in the model's feature list.
    pub feature: usize,
    pub attr: AttrRef,
    pub op: SplitOp,
    pub negated: bool,
    pub missing_left: bool,
}

impl SplitPredicate {
    /// Whether `d` falls on the left (non-negated) side.
    #[inline]
    pub fn goes_left(&self, d: Datum) -> bool {
        match (self.op, d) {
            (_, Datum::Null) | (_, Datum::Code(NULL_KEY)) => self.missing_left,
            (SplitOp::Le(t), Datum::Num(v)) => v <= t,
            (SplitOp::Le(t), Datum::Code(c)) => (c as f64) <= t,
            (SplitOp::Eq(e), Datum::Code(c)) => c == e,
            (SplitOp::Eq(_), Datum::Num(_)) => false,
        }
    }

    #[inline]
    pub fn matches(&self, d: Datum) -> bool {
        self.goes_left(d) != self.negated
    }

    pub fn negate(&self) -> Self {
        SplitPredicate {
            negated: !self.negated,
            ..self.clone()
        }
    }
}

impl fmt::Display for SplitPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, value) = match (self.op, self.negated) {
            (SplitOp::Le(v), false) => ("<=", v.to_string()),
            (SplitOp::Le(v), true) => (">", v.to_string()),
            (SplitOp::Eq(c), false) => ("==", format!("#{c}")),
            (SplitOp::Eq(c), true) => ("!=", format!("#{c}")),
        };
        let nulls = if self.missing_left != self.negated { "in" } else { "out" };
        write!(f, "{} {op} {value} (nulls {nulls})", self.attr)
    }
}
