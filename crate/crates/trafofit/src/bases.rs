//! Response basis functions a(y) and their derivatives.
//!
//! Bernstein polynomials serve continuous and count responses, a dummy
//! encoding serves ordered responses, and linear/log-linear bases give
//! classical parametric transformations. User-supplied bases can be
//! registered by name.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrafoError};
use crate::scalar::Scalar;

/// Basis values and d/dy derivatives at one response point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval<S> {
    pub value: Vec<S>,
    pub derivative: Vec<S>,
}

/// Evaluation of a discrete basis: a dummy row, or the +infinity sentinel
/// for the largest class (whose CDF is constrained to one).
#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteEval<S> {
    Dummy(BasisEval<S>),
    UpperInfinity,
}

/// How raw column weights are mapped to constrained transformation
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaConstraint {
    /// First weight free, the rest softplus-transformed and cumulatively
    /// summed: guarantees a nondecreasing coefficient vector.
    MonotoneCumulative,
    /// First weight free, remaining weights softplus-transformed
    /// elementwise: positive slope for linear-type bases.
    PositiveSlope,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    Bernstein { order: usize },
    Linear,
    LogLinear,
    Discrete { levels: Vec<String> },
    ShiftScale,
    Custom { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub kind: BasisKind,
    /// Closed response support [l, u]; required for Bernstein, Linear,
    /// LogLinear and ShiftScale.
    pub support: Option<(f64, f64)>,
}

impl BasisSpec {
    pub fn new(kind: BasisKind, support: Option<(f64, f64)>) -> Result<Self> {
        if let Some((l, u)) = support {
            if !(l < u) {
                return Err(TrafoError::Basis(format!(
                    "support lower bound {l} must be below upper bound {u}"
                )));
            }
        }
        match &kind {
            BasisKind::Bernstein { order } => {
                if *order < 1 {
                    return Err(TrafoError::Basis("Bernstein order must be >= 1".into()));
                }
                if support.is_none() {
                    return Err(TrafoError::Basis("Bernstein basis requires a support".into()));
                }
            }
            BasisKind::Linear | BasisKind::LogLinear | BasisKind::ShiftScale => {
                if support.is_none() {
                    return Err(TrafoError::Basis(format!(
                        "{kind:?} basis requires a support"
                    )));
                }
            }
            BasisKind::Discrete { levels } => {
                if levels.len() < 2 {
                    return Err(TrafoError::Basis(
                        "discrete basis needs at least two levels".into(),
                    ));
                }
                let mut seen = std::collections::HashSet::new();
                for l in levels {
                    if !seen.insert(l) {
                        return Err(TrafoError::Basis(format!("duplicate level `{l}`")));
                    }
                }
            }
            BasisKind::Custom { .. } => {}
        }
        Ok(Self { kind, support })
    }

    /// Number of basis functions M.
    pub fn dim(&self, registry: Option<&BasisRegistry>) -> Result<usize> {
        match &self.kind {
            BasisKind::Bernstein { order } => Ok(order + 1),
            BasisKind::Linear | BasisKind::LogLinear | BasisKind::ShiftScale => Ok(2),
            BasisKind::Discrete { levels } => Ok(levels.len() - 1),
            BasisKind::Custom { name } => registry
                .and_then(|r| r.get(name))
                .map(|b| b.dim)
                .ok_or_else(|| TrafoError::Basis(format!("custom basis `{name}` not registered"))),
        }
    }

    pub fn constraint(&self, registry: Option<&BasisRegistry>) -> ThetaConstraint {
        match &self.kind {
            BasisKind::Bernstein { .. } | BasisKind::Discrete { .. } => {
                ThetaConstraint::MonotoneCumulative
            }
            BasisKind::Linear | BasisKind::LogLinear | BasisKind::ShiftScale => {
                ThetaConstraint::PositiveSlope
            }
            BasisKind::Custom { name } => registry
                .and_then(|r| r.get(name))
                .map(|b| b.constraint)
                .unwrap_or(ThetaConstraint::Unconstrained),
        }
    }

    /// Evaluate at a finite response point. Count responses must be
    /// floored by the caller; discrete bases are evaluated through
    /// [`discrete_basis`] instead.
    pub fn eval<S: Scalar>(
        &self,
        y: f64,
        registry: Option<&BasisRegistry>,
    ) -> Result<BasisEval<S>> {
        match &self.kind {
            BasisKind::Bernstein { order } => {
                let (l, u) = self.support.expect("validated at construction");
                bernstein(y, *order, (l, u))
            }
            BasisKind::Linear | BasisKind::ShiftScale => Ok(linear_basis(y)),
            BasisKind::LogLinear => log_linear_basis(y),
            BasisKind::Discrete { .. } => Err(TrafoError::Basis(
                "discrete basis is evaluated at level indices, not response values".into(),
            )),
            BasisKind::Custom { name } => {
                let b = registry
                    .and_then(|r| r.get(name))
                    .ok_or_else(|| TrafoError::Basis(format!("custom basis `{name}` not registered")))?;
                b.eval(y)
            }
        }
    }
}

/// Bernstein polynomial basis of order P on the given support.
///
/// value_k = C(P,k) t^k (1-t)^(P-k) with t = (y-l)/(u-l); the derivative
/// uses P (B_{k-1,P-1} - B_{k,P-1}) / (u-l) with out-of-range terms zero.
pub fn bernstein<S: Scalar>(y: f64, order: usize, support: (f64, f64)) -> Result<BasisEval<S>> {
    let (l, u) = support;
    if !(y >= l && y <= u) {
        return Err(TrafoError::OutsideSupport {
            value: y,
            lower: l,
            upper: u,
        });
    }
    let t = (y - l) / (u - l);
    let value_f = bernstein_values(t, order);
    let lower = bernstein_values(t, order - 1);
    let scale = order as f64 / (u - l);
    let mut value = Vec::with_capacity(order + 1);
    let mut derivative = Vec::with_capacity(order + 1);
    for k in 0..=order {
        let left = if k == 0 { 0.0 } else { lower[k - 1] };
        let right = if k == order { 0.0 } else { lower[k] };
        value.push(S::of_f64(value_f[k]));
        derivative.push(S::of_f64(scale * (left - right)));
    }
    Ok(BasisEval { value, derivative })
}

fn bernstein_values(t: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    let mut binom = 1.0f64;
    for k in 0..=order {
        if k > 0 {
            binom *= (order - k + 1) as f64 / k as f64;
        }
        out.push(binom * pow0(t, k) * pow0(1.0 - t, order - k));
    }
    out
}

/// t^k with the 0^0 = 1 convention.
fn pow0(t: f64, k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        t.powi(k as i32)
    }
}

/// Bernstein basis evaluated at floor(y): the basis for count responses.
pub fn count_basis<S: Scalar>(y: f64, order: usize, support: (f64, f64)) -> Result<BasisEval<S>> {
    if y < 0.0 {
        return Err(TrafoError::Basis(format!("count response {y} is negative")));
    }
    bernstein(y.floor(), order, support)
}

/// Dummy encoding for an ordered response with K levels: level k maps to
/// the k-th unit vector of length K-1; the largest level maps to the
/// +infinity sentinel.
pub fn discrete_basis<S: Scalar>(level_index: usize, n_levels: usize) -> Result<DiscreteEval<S>> {
    if level_index < 1 || level_index > n_levels {
        return Err(TrafoError::Basis(format!(
            "level index {level_index} out of range 1..={n_levels}"
        )));
    }
    if level_index == n_levels {
        return Ok(DiscreteEval::UpperInfinity);
    }
    let mut value = vec![S::zero(); n_levels - 1];
    value[level_index - 1] = S::one();
    Ok(DiscreteEval::Dummy(BasisEval {
        derivative: vec![S::zero(); n_levels - 1],
        value,
    }))
}

/// a(y) = (1, y).
pub fn linear_basis<S: Scalar>(y: f64) -> BasisEval<S> {
    BasisEval {
        value: vec![S::one(), S::of_f64(y)],
        derivative: vec![S::zero(), S::one()],
    }
}

/// a(y) = (1, log y) for y > 0.
pub fn log_linear_basis<S: Scalar>(y: f64) -> Result<BasisEval<S>> {
    if !(y > 0.0) {
        return Err(TrafoError::Basis(format!(
            "log-linear basis requires a positive response, got {y}"
        )));
    }
    Ok(BasisEval {
        value: vec![S::one(), S::of_f64(y.ln())],
        derivative: vec![S::zero(), S::of_f64(1.0 / y)],
    })
}

type BasisFn = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// A user-registered basis: evaluation and derivative closures plus the
/// weight constraint applied to its transformation coefficients.
#[derive(Clone)]
pub struct CustomBasis {
    pub dim: usize,
    eval_fn: BasisFn,
    deriv_fn: BasisFn,
    pub constraint: ThetaConstraint,
}

impl CustomBasis {
    pub fn eval<S: Scalar>(&self, y: f64) -> Result<BasisEval<S>> {
        let v = (self.eval_fn)(y);
        let d = (self.deriv_fn)(y);
        if v.len() != d.len() || v.len() != self.dim {
            return Err(TrafoError::Basis(format!(
                "custom basis returned {} values and {} derivatives, expected {}",
                v.len(),
                d.len(),
                self.dim
            )));
        }
        Ok(BasisEval {
            value: v.into_iter().map(S::of_f64).collect(),
            derivative: d.into_iter().map(S::of_f64).collect(),
        })
    }
}

/// Registry of custom bases. Frozen once a model is compiled against it.
#[derive(Clone, Default)]
pub struct BasisRegistry {
    entries: HashMap<String, CustomBasis>,
}

impl BasisRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a basis under a fresh name. The basis dimension is probed
    /// by evaluating at the midpoint argument 0.0; length mismatches
    /// between value and derivative surface on first evaluation.
    pub fn register(
        &mut self,
        name: &str,
        dim: usize,
        eval_fn: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
        deriv_fn: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
        constraint: ThetaConstraint,
    ) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TrafoError::Basis(format!(
                "custom basis `{name}` is already registered"
            )));
        }
        self.entries.insert(
            name.to_string(),
            CustomBasis {
                dim,
                eval_fn: Arc::new(eval_fn),
                deriv_fn: Arc::new(deriv_fn),
                constraint,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CustomBasis> {
        self.entries.get(name)
    }
}

/// Default support: observed range expanded by 10% on each side.
pub fn default_support(min: f64, max: f64) -> (f64, f64) {
    let range = (max - min).max(f64::EPSILON);
    (min - 0.1 * range, max + 0.1 * range)
}

/// Default support for counts: [0, max + 1], so h(floor(y) - 1) is
/// evaluable for every observed count.
pub fn count_support(max: f64) -> (f64, f64) {
    (0.0, max + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn binom(n: usize, k: usize) -> f64 {
        let mut b = 1.0;
        for i in 0..k {
            b *= (n - i) as f64 / (i + 1) as f64;
        }
        b
    }

    /// Direct binomial-formula oracle for a single Bernstein value.
    fn bern_oracle(t: f64, order: usize, k: usize) -> f64 {
        binom(order, k) * t.powi(k as i32) * (1.0 - t).powi((order - k) as i32)
    }

    #[test]
    fn bernstein_midpoint_p1() {
        let e: BasisEval<f64> = bernstein(0.5, 1, (0.0, 1.0)).unwrap();
        assert_eq!(e.value, vec![0.5, 0.5]);
        assert_eq!(e.derivative, vec![-1.0, 1.0]);
    }

    #[test]
    fn bernstein_lower_boundary() {
        let e: BasisEval<f64> = bernstein(0.0, 3, (0.0, 1.0)).unwrap();
        assert_eq!(e.value, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bernstein_against_binomial_oracle() {
        let e: BasisEval<f64> = bernstein(0.25, 2, (0.0, 1.0)).unwrap();
        assert_eq!(e.value, vec![0.5625, 0.375, 0.0625]);
        for (k, v) in e.value.iter().enumerate() {
            assert_relative_eq!(*v, bern_oracle(0.25, 2, k), epsilon = 1e-15);
        }
        // Scaled support.
        let e: BasisEval<f64> = bernstein(3.0, 4, (1.0, 9.0)).unwrap();
        for (k, v) in e.value.iter().enumerate() {
            assert_relative_eq!(*v, bern_oracle(0.25, 4, k), epsilon = 1e-14);
        }
    }

    #[test]
    fn bernstein_outside_support_errors() {
        assert!(bernstein::<f64>(1.5, 3, (0.0, 1.0)).is_err());
        assert!(bernstein::<f64>(-0.1, 3, (0.0, 1.0)).is_err());
    }

    #[test]
    fn bernstein_partition_of_unity() {
        for &order in &[1usize, 3, 7, 10, 25] {
            let mut y = 2.0;
            while y <= 5.0 {
                let e: BasisEval<f64> = bernstein(y, order, (2.0, 5.0)).unwrap();
                let s: f64 = e.value.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "order {order}, y {y}: sum {s}");
                y += 0.0317;
            }
        }
    }

    #[test]
    fn bernstein_derivative_finite_differences() {
        let support = (-1.0, 2.0);
        let h = 1e-6;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let y = -0.9 + 2.8 * next();
            for &order in &[2usize, 6, 10] {
                let e: BasisEval<f64> = bernstein(y, order, support).unwrap();
                let plus: BasisEval<f64> = bernstein(y + h, order, support).unwrap();
                let minus: BasisEval<f64> = bernstein(y - h, order, support).unwrap();
                for k in 0..=order {
                    let fd = (plus.value[k] - minus.value[k]) / (2.0 * h);
                    let an = e.derivative[k];
                    let denom = an.abs().max(1e-3);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-6,
                        "order {order}, y {y}, k {k}: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn bernstein_monotone_coefficients_give_monotone_expansion() {
        let theta: Vec<f64> = vec![-2.0, -1.5, -1.5, 0.0, 0.3, 2.2, 2.2001];
        let order = theta.len() - 1;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..1000 {
            let y = i as f64 / 999.0;
            let e: BasisEval<f64> = bernstein(y, order, (0.0, 1.0)).unwrap();
            let v: f64 = e.value.iter().zip(&theta).map(|(a, t)| a * t).sum();
            assert!(v >= prev - 1e-12, "not nondecreasing at {y}");
            prev = v;
        }
    }

    #[test]
    fn count_basis_integer_passthrough() {
        let a: BasisEval<f64> = count_basis(3.0, 4, (0.0, 10.0)).unwrap();
        let b: BasisEval<f64> = bernstein(3.0, 4, (0.0, 10.0)).unwrap();
        assert_eq!(a, b);
        // Non-integer values floor (validation happens at data ingestion).
        let c: BasisEval<f64> = count_basis(3.7, 4, (0.0, 10.0)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn count_basis_zero_and_negative() {
        let e: BasisEval<f64> = count_basis(0.0, 1, (0.0, 10.0)).unwrap();
        assert_eq!(e.value, vec![1.0, 0.0]);
        assert!(count_basis::<f64>(-1.0, 1, (0.0, 10.0)).is_err());
    }

    #[test]
    fn discrete_basis_cases() {
        match discrete_basis::<f64>(1, 3).unwrap() {
            DiscreteEval::Dummy(e) => {
                assert_eq!(e.value, vec![1.0, 0.0]);
                assert!(e.derivative.iter().all(|d| *d == 0.0));
            }
            _ => panic!("expected dummy"),
        }
        assert_eq!(
            discrete_basis::<f64>(3, 3).unwrap(),
            DiscreteEval::UpperInfinity
        );
        match discrete_basis::<f64>(2, 6).unwrap() {
            DiscreteEval::Dummy(e) => assert_eq!(e.value, vec![0.0, 1.0, 0.0, 0.0, 0.0]),
            _ => panic!("expected dummy"),
        }
        assert!(discrete_basis::<f64>(0, 3).is_err());
        assert!(discrete_basis::<f64>(4, 3).is_err());
    }

    #[test]
    fn linear_and_log_linear() {
        let e: BasisEval<f64> = linear_basis(2.0);
        assert_eq!(e.value, vec![1.0, 2.0]);
        assert_eq!(e.derivative, vec![0.0, 1.0]);

        let e: BasisEval<f64> = log_linear_basis(1.0).unwrap();
        assert_eq!(e.value, vec![1.0, 0.0]);
        assert_eq!(e.derivative, vec![0.0, 1.0]);

        let e: BasisEval<f64> = log_linear_basis(std::f64::consts::E).unwrap();
        assert_relative_eq!(e.value[1], 1.0, epsilon = 1e-15);

        assert!(log_linear_basis::<f64>(0.0).is_err());
        assert!(log_linear_basis::<f64>(-1.0).is_err());
    }

    #[test]
    fn custom_basis_registration() {
        let mut reg = BasisRegistry::new();
        reg.register(
            "lin",
            2,
            |y| vec![1.0, y],
            |_| vec![0.0, 1.0],
            ThetaConstraint::PositiveSlope,
        )
        .unwrap();
        // Duplicate name rejected.
        let dup = reg.register(
            "lin",
            2,
            |y| vec![1.0, y],
            |_| vec![0.0, 1.0],
            ThetaConstraint::PositiveSlope,
        );
        assert!(dup.is_err());

        let e: BasisEval<f64> = reg.get("lin").unwrap().eval(2.0).unwrap();
        assert_eq!(e.value, vec![1.0, 2.0]);

        // Length mismatch surfaces at first evaluation.
        reg.register(
            "bad",
            2,
            |y| vec![1.0, y],
            |_| vec![0.0],
            ThetaConstraint::Unconstrained,
        )
        .unwrap();
        assert!(reg.get("bad").unwrap().eval::<f64>(0.5).is_err());
    }

    #[test]
    fn custom_basis_derivative_fd_check() {
        let mut reg = BasisRegistry::new();
        reg.register(
            "quad",
            3,
            |y| vec![1.0, y, y * y],
            |y| vec![0.0, 1.0, 2.0 * y],
            ThetaConstraint::MonotoneCumulative,
        )
        .unwrap();
        let b = reg.get("quad").unwrap();
        let h = 1e-5;
        for &y in &[0.17, 0.62, 1.31, 2.74, 3.05] {
            let plus: BasisEval<f64> = b.eval(y + h).unwrap();
            let minus: BasisEval<f64> = b.eval(y - h).unwrap();
            let at: BasisEval<f64> = b.eval(y).unwrap();
            for k in 0..3 {
                let fd = (plus.value[k] - minus.value[k]) / (2.0 * h);
                let denom = at.derivative[k].abs().max(1e-6);
                assert!(((fd - at.derivative[k]) / denom).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(BasisSpec::new(BasisKind::Bernstein { order: 0 }, Some((0.0, 1.0))).is_err());
        assert!(BasisSpec::new(BasisKind::Bernstein { order: 3 }, None).is_err());
        assert!(BasisSpec::new(BasisKind::Bernstein { order: 3 }, Some((1.0, 1.0))).is_err());
        assert!(BasisSpec::new(
            BasisKind::Discrete {
                levels: vec!["a".into(), "a".into()]
            },
            None
        )
        .is_err());
        let spec = BasisSpec::new(BasisKind::Bernstein { order: 3 }, Some((0.0, 1.0))).unwrap();
        assert_eq!(spec.dim(None).unwrap(), 4);
        assert_eq!(spec.constraint(None), ThetaConstraint::MonotoneCumulative);
    }
}
