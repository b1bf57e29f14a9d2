//! Commutative semirings carried as row annotations, their lifts, and the
//! split criteria and boosting objectives computed from aggregates.
//!
//! Annotations are flat `f64` slices. Layouts:
//! - variance: `[c, s, q]`
//! - class count: `[c, c_0, .., c_{k-1}]`
//! - gradient: `[h, g]`
//! - gradient vector: `[h_0, g_0, .., h_{k-1}, g_{k-1}]`

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SemiRing {
    Variance,
    ClassCount { k: usize },
    Gradient,
    GradientVector { k: usize },
}

impl SemiRing {
    pub fn width(self) -> usize {
        match self {
            SemiRing::Variance => 3,
            SemiRing::ClassCount { k } => k + 1,
            SemiRing::Gradient => 2,
            SemiRing::GradientVector { k } => 2 * k,
        }
    }

    pub fn zero(self) -> Vec<f64> {
        vec![0.0; self.width()]
    }

    pub fn one(self) -> Vec<f64> {
        let mut v = self.zero();
        match self {
            SemiRing::GradientVector { k } => {
                for i in 0..k {
                    v[2 * i] = 1.0;
                }
            }
            _ => v[0] = 1.0,
        }
        v
    }

    pub fn is_zero(self, x: &[f64]) -> bool {
        x.iter().all(|&v| v == 0.0)
    }

    pub fn is_one(self, x: &[f64]) -> bool {
        x == self.one().as_slice()
    }

    /// `acc ⊕= x`. Addition is componentwise for every semiring here.
    #[inline]
    pub fn add_assign(self, acc: &mut [f64], x: &[f64]) {
        for (a, b) in acc.iter_mut().zip(x) {
            *a += *b;
        }
    }

    /// `acc ⊗= x`.
    #[inline]
    pub fn mul_assign(self, acc: &mut [f64], x: &[f64]) {
        match self {
            SemiRing::Variance => {
                let (c1, s1, q1) = (acc[0], acc[1], acc[2]);
                let (c2, s2, q2) = (x[0], x[1], x[2]);
                acc[0] = c1 * c2;
                acc[1] = s1 * c2 + s2 * c1;
                acc[2] = q1 * c2 + q2 * c1 + 2.0 * s1 * s2;
            }
            SemiRing::ClassCount { .. } => {
                let (c1, c2) = (acc[0], x[0]);
                for i in 1..acc.len() {
                    acc[i] = acc[i] * c2 + c1 * x[i];
                }
                acc[0] = c1 * c2;
            }
            SemiRing::Gradient => {
                let (h1, g1) = (acc[0], acc[1]);
                let (h2, g2) = (x[0], x[1]);
                acc[0] = h1 * h2;
                acc[1] = g1 * h2 + g2 * h1;
            }
            SemiRing::GradientVector { k } => {
                for i in 0..k {
                    let (h1, g1) = (acc[2 * i], acc[2 * i + 1]);
                    let (h2, g2) = (x[2 * i], x[2 * i + 1]);
                    acc[2 * i] = h1 * h2;
                    acc[2 * i + 1] = g1 * h2 + g2 * h1;
                }
            }
        }
    }

    /// `acc -= x` componentwise; used to get the complement side of a split.
    #[inline]
    pub fn sub_assign(self, acc: &mut [f64], x: &[f64]) {
        for (a, b) in acc.iter_mut().zip(x) {
            *a -= *b;
        }
    }

    /// Scales every component by a weight, i.e. `x ⊗ (w, 0, ..)`.
    pub fn scale(self, x: &mut [f64], w: f64) {
        match self {
            SemiRing::GradientVector { k } => {
                for i in 0..k {
                    x[2 * i] *= w;
                    x[2 * i + 1] *= w;
                }
            }
            _ => x.iter_mut().for_each(|v| *v *= w),
        }
    }

    /// The count-like component: `c` for variance and class counts, `h` for gradients.
    pub fn count(self, x: &[f64]) -> f64 {
        x[0]
    }

    /// Lifts a target value into an annotation. For `ClassCount` the value is a
    /// class index; for the gradient semirings it is an L2 residual, which lifts
    /// to `(1, -r)` so that lifting is addition-to-multiplication preserving.
    pub fn lift_into(self, out: &mut [f64], y: Option<f64>, w: Option<f64>) {
        out.copy_from_slice(&self.one());
        if let Some(y) = y {
            match self {
                SemiRing::Variance => {
                    out[1] = y;
                    out[2] = y * y;
                }
                SemiRing::ClassCount { k } => {
                    let class = y as usize;
                    if class < k {
                        out[1 + class] = 1.0;
                    }
                }
                SemiRing::Gradient => out[1] = -y,
                SemiRing::GradientVector { k } => {
                    let class = y as usize;
                    if class < k {
                        out[2 * class + 1] = -1.0;
                    }
                }
            }
        }
        if let Some(w) = w {
            self.scale(out, w);
        }
    }

    pub fn lift(self, y: Option<f64>, w: Option<f64>) -> Vec<f64> {
        let mut v = self.zero();
        self.lift_into(&mut v, y, w);
        v
    }
}

impl fmt::Display for SemiRing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemiRing::Variance => write!(f, "variance"),
            SemiRing::ClassCount { k } => write!(f, "class_count({k})"),
            SemiRing::Gradient => write!(f, "gradient"),
            SemiRing::GradientVector { k } => write!(f, "gradient_vector({k})"),
        }
    }
}

/// Typed view of a single annotation.
#[derive(Clone, Debug, PartialEq)]
pub enum AnnotationValue {
    VarianceTriple { c: f64, s: f64, q: f64 },
    ClassCounts { c: f64, per_class: Vec<f64> },
    GradPair { h: f64, g: f64 },
    GradVector(Vec<(f64, f64)>),
}

impl AnnotationValue {
    pub fn semiring(&self) -> SemiRing {
        match self {
            AnnotationValue::VarianceTriple { .. } => SemiRing::Variance,
            AnnotationValue::ClassCounts { per_class, .. } => SemiRing::ClassCount { k: per_class.len() },
            AnnotationValue::GradPair { .. } => SemiRing::Gradient,
            AnnotationValue::GradVector(v) => SemiRing::GradientVector { k: v.len() },
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            AnnotationValue::VarianceTriple { c, s, q } => vec![*c, *s, *q],
            AnnotationValue::ClassCounts { c, per_class } => {
                let mut v = vec![*c];
                v.extend_from_slice(per_class);
                v
            }
            AnnotationValue::GradPair { h, g } => vec![*h, *g],
            AnnotationValue::GradVector(pairs) => pairs.iter().flat_map(|&(h, g)| [h, g]).collect(),
        }
    }

    pub fn from_flat(semiring: SemiRing, x: &[f64]) -> Self {
        assert_eq!(x.len(), semiring.width());
        match semiring {
            SemiRing::Variance => AnnotationValue::VarianceTriple { c: x[0], s: x[1], q: x[2] },
            SemiRing::ClassCount { .. } => AnnotationValue::ClassCounts {
                c: x[0],
                per_class: x[1..].to_vec(),
            },
            SemiRing::Gradient => AnnotationValue::GradPair { h: x[0], g: x[1] },
            SemiRing::GradientVector { .. } => {
                AnnotationValue::GradVector(x.chunks(2).map(|p| (p[0], p[1])).collect())
            }
        }
    }
}

pub fn lift(semiring: SemiRing, y: Option<f64>, w: Option<f64>) -> AnnotationValue {
    AnnotationValue::from_flat(semiring, &semiring.lift(y, w))
}

fn same_ring(a: &AnnotationValue, b: &AnnotationValue) -> Result<SemiRing> {
    let (ra, rb) = (a.semiring(), b.semiring());
    if ra != rb {
        return Err(Error::Arity(format!("{ra} vs {rb}")));
    }
    Ok(ra)
}

pub fn sr_add(a: &AnnotationValue, b: &AnnotationValue) -> Result<AnnotationValue> {
    let ring = same_ring(a, b)?;
    let mut acc = a.to_flat();
    ring.add_assign(&mut acc, &b.to_flat());
    Ok(AnnotationValue::from_flat(ring, &acc))
}

pub fn sr_mul(a: &AnnotationValue, b: &AnnotationValue) -> Result<AnnotationValue> {
    let ring = same_ring(a, b)?;
    let mut acc = a.to_flat();
    ring.mul_assign(&mut acc, &b.to_flat());
    Ok(AnnotationValue::from_flat(ring, &acc))
}

/// `Q - S²/C`, the sum of squared deviations.
pub fn variance_stat(c: f64, s: f64, q: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::Undefined("variance of an empty aggregate".into()));
    }
    Ok(q - (s / c) * s)
}

/// Variance reduction of a split given the parent `(c, s)` and the selected side.
/// `None` marks an invalid split with an empty side.
#[inline]
pub fn reduction_in_variance(c: f64, s: f64, c_left: f64, s_left: f64) -> Option<f64> {
    let c_right = c - c_left;
    if c_left <= 0.0 || c_right <= 0.0 {
        return None;
    }
    let s_right = s - s_left;
    Some(-(s / c) * s + (s_left / c_left) * s_left + (s_right / c_right) * s_right)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassCriterion {
    Gini,
    Entropy,
    ChiSquare,
}

impl FromStr for ClassCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gini" => Ok(ClassCriterion::Gini),
            "entropy" => Ok(ClassCriterion::Entropy),
            "chi_square" | "chi2" => Ok(ClassCriterion::ChiSquare),
            other => Err(Error::Param(format!("unknown criterion `{other}`"))),
        }
    }
}

/// `[c, c_0, ..]` Gini impurity.
pub fn gini(counts: &[f64]) -> f64 {
    let c = counts[0];
    1.0 - counts[1..].iter().map(|&ck| (ck / c) * (ck / c)).sum::<f64>()
}

pub fn entropy(counts: &[f64]) -> f64 {
    let c = counts[0];
    -counts[1..]
        .iter()
        .filter(|&&ck| ck > 0.0)
        .map(|&ck| (ck / c) * (ck / c).ln())
        .sum::<f64>()
}

/// χ² statistic of a binary split; classes absent from the parent contribute nothing.
pub fn chi_square(total: &[f64], left: &[f64]) -> f64 {
    let c = total[0];
    let cl = left[0];
    let cr = c - cl;
    let mut chi = 0.0;
    for i in 1..total.len() {
        let ci = total[i];
        if ci <= 0.0 {
            continue;
        }
        let el = ci * cl / c;
        let er = ci * cr / c;
        let ol = left[i];
        let or = ci - ol;
        if el > 0.0 {
            chi += (ol - el) * (ol - el) / el;
        }
        if er > 0.0 {
            chi += (or - er) * (or - er) / er;
        }
    }
    chi
}

pub fn classification_criteria(
    agg: &AnnotationValue,
    kind: ClassCriterion,
    split: Option<&AnnotationValue>,
) -> Result<f64> {
    let total = match agg {
        AnnotationValue::ClassCounts { .. } => agg.to_flat(),
        _ => return Err(Error::Arity("class counts expected".into())),
    };
    if total[0] <= 0.0 {
        return Err(Error::Empty("classification node".into()));
    }
    match kind {
        ClassCriterion::Gini => Ok(gini(&total)),
        ClassCriterion::Entropy => Ok(entropy(&total)),
        ClassCriterion::ChiSquare => {
            let left = split
                .ok_or_else(|| Error::Param("chi-square needs a split".into()))?
                .to_flat();
            if left.len() != total.len() {
                return Err(Error::Arity("split arity differs from node".into()));
            }
            if left[0] <= 0.0 || left[0] >= total[0] {
                return Err(Error::Empty("chi-square split side".into()));
            }
            Ok(chi_square(&total, &left))
        }
    }
}

/// Reduction of a classification criterion for a split. Gini and entropy are
/// weighted by counts so the value is `c·I(node) - c_l·I(left) - c_r·I(right)`.
pub fn class_reduction(kind: ClassCriterion, total: &[f64], left: &[f64], right: &[f64]) -> Option<f64> {
    if left[0] <= 0.0 || right[0] <= 0.0 {
        return None;
    }
    Some(match kind {
        ClassCriterion::Gini => total[0] * gini(total) - left[0] * gini(left) - right[0] * gini(right),
        ClassCriterion::Entropy => {
            total[0] * entropy(total) - left[0] * entropy(left) - right[0] * entropy(right)
        }
        ClassCriterion::ChiSquare => chi_square(total, left),
    })
}

pub const DEFAULT_ALPHA: f64 = 0.0;
pub const DEFAULT_BETA: f64 = 1e-6;

pub fn optimal_leaf_prediction(h: f64, g: f64, beta: f64) -> Result<f64> {
    if h + beta <= 0.0 {
        return Err(Error::Undefined("nonpositive hessian sum".into()));
    }
    Ok(-g / (h + beta))
}

/// Second-order gain of splitting `(h, g)` into `left` and the complement.
/// `None` when a side has no hessian mass and `beta` is zero.
#[inline]
pub fn boosting_gain(h: f64, g: f64, h_left: f64, g_left: f64, alpha: f64, beta: f64) -> Option<f64> {
    let h_right = h - h_left;
    let g_right = g - g_left;
    if h_left + beta <= 0.0 || h_right + beta <= 0.0 || h + beta <= 0.0 {
        return None;
    }
    Some(
        0.5 * ((g_left / (h_left + beta)) * g_left + (g_right / (h_right + beta)) * g_right
            - (g / (h + beta)) * g)
            - alpha,
    )
}

/// How a boosted leaf turns its statistics into a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LeafRule {
    ClosedFormPStar,
    Mean,
    Median,
    Percentile { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Objective {
    Rmse,
    Mae,
    Huber { delta: f64 },
    Fair { c: f64 },
    Poisson,
    Quantile { alpha: f64 },
    Mape,
    Gamma,
    Tweedie { rho: f64 },
    Softmax { k: usize },
}

impl Objective {
    /// Builds an objective from its name with default parameters.
    pub fn from_name(name: &str) -> Result<Objective> {
        Ok(match name {
            "rmse" | "l2" | "regression" => Objective::Rmse,
            "mae" | "l1" => Objective::Mae,
            "huber" => Objective::Huber { delta: 1.0 },
            "fair" => Objective::Fair { c: 1.0 },
            "poisson" => Objective::Poisson,
            "quantile" => Objective::Quantile { alpha: 0.5 },
            "mape" => Objective::Mape,
            "gamma" => Objective::Gamma,
            "tweedie" => Objective::Tweedie { rho: 1.5 },
            "softmax" | "multiclass" => Objective::Softmax { k: 0 },
            other => return Err(Error::Param(format!("unknown objective `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Rmse => "rmse",
            Objective::Mae => "mae",
            Objective::Huber { .. } => "huber",
            Objective::Fair { .. } => "fair",
            Objective::Poisson => "poisson",
            Objective::Quantile { .. } => "quantile",
            Objective::Mape => "mape",
            Objective::Gamma => "gamma",
            Objective::Tweedie { .. } => "tweedie",
            Objective::Softmax { .. } => "softmax",
        }
    }

    pub fn leaf_rule(&self) -> LeafRule {
        match *self {
            Objective::Rmse => LeafRule::Mean,
            Objective::Mae | Objective::Mape => LeafRule::Median,
            Objective::Quantile { alpha } => LeafRule::Percentile { alpha },
            _ => LeafRule::ClosedFormPStar,
        }
    }

    /// True when raw scores live on the log scale.
    pub fn log_link(&self) -> bool {
        matches!(self, Objective::Poisson | Objective::Gamma | Objective::Tweedie { .. })
    }

    pub fn validate_target(&self, y: f64) -> Result<()> {
        let bad = match self {
            Objective::Poisson | Objective::Tweedie { .. } => y < 0.0,
            Objective::Gamma => y <= 0.0,
            _ => false,
        };
        if bad || !y.is_finite() {
            return Err(Error::Domain(format!("target {y} outside the domain of {}", self.name())));
        }
        Ok(())
    }

    /// Gradient and hessian with `g = ∂l/∂p`. For softmax `y` is the one-vs-rest
    /// indicator and `p` the class probability.
    pub fn grad_hess(&self, y: f64, p: f64) -> Result<(f64, f64)> {
        let eps = y - p;
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        Ok(match *self {
            Objective::Rmse => (p - y, 1.0),
            Objective::Mae => (-sign(eps), 1.0),
            Objective::Huber { delta } => {
                if eps.abs() <= delta {
                    (-eps, 1.0)
                } else {
                    (-delta * sign(eps), 1.0)
                }
            }
            Objective::Fair { c } => {
                let d = eps.abs() + c;
                (-c * eps / d, c * c / (d * d))
            }
            Objective::Poisson => {
                self.validate_target(y)?;
                (p.exp() - y, p.exp())
            }
            Objective::Quantile { alpha } => {
                if eps < 0.0 {
                    (1.0 - alpha, 1.0)
                } else {
                    (-alpha, 1.0)
                }
            }
            Objective::Mape => (-sign(eps) / y.abs().max(1.0), 1.0),
            Objective::Gamma => {
                self.validate_target(y)?;
                let e = y * (-p).exp();
                (1.0 - e, e)
            }
            Objective::Tweedie { rho } => {
                self.validate_target(y)?;
                let a = ((1.0 - rho) * p).exp();
                let b = ((2.0 - rho) * p).exp();
                (-y * a + b, -(1.0 - rho) * y * a + (2.0 - rho) * b)
            }
            Objective::Softmax { k } => {
                let kf = k.max(2) as f64;
                let h = (kf / (kf - 1.0) * p * (1.0 - p)).max(1e-16);
                (p - y, h)
            }
        })
    }

    /// Optimal constant raw score for the training targets.
    pub fn base_score(&self, ys: &[f64]) -> Result<f64> {
        if ys.is_empty() {
            return Err(Error::Empty("no training targets".into()));
        }
        for &y in ys {
            self.validate_target(y)?;
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        Ok(match self {
            o if o.log_link() => {
                if mean <= 0.0 {
                    return Err(Error::Domain("log-link objective needs a positive mean target".into()));
                }
                mean.ln()
            }
            Objective::Mae | Objective::Mape => order_statistic(&mut ys.to_vec(), 0.5),
            Objective::Quantile { alpha } => order_statistic(&mut ys.to_vec(), *alpha),
            _ => mean,
        })
    }
}

/// Lower-value percentile: the element at sorted index `floor(alpha·(n-1))`.
pub fn order_statistic(values: &mut [f64], alpha: f64) -> f64 {
    assert!(!values.is_empty());
    let idx = ((alpha.clamp(0.0, 1.0)) * (values.len() - 1) as f64).floor() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}
