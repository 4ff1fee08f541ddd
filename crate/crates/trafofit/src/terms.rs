//! Term processors: turn formula terms into feature plans the model
//! compiler consumes — spline rows and penalties for smooths, level maps
//! for factors, layer stacks for network terms.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrafoError};

pub const SMOOTH_N_BASIS: usize = 10;
pub const SMOOTH_DEGREE: usize = 3;
pub const SMOOTH_PENALTY_ORDER: usize = 2;

/// A compiled smooth term: cubic B-spline basis with a second-order
/// difference penalty, calibrated so the effective degrees of freedom of
/// the marginal smoother match the requested df.
///
/// A sum-to-zero constraint removes the confounding with the transformation
/// intercept; coefficients live in the constrained space of dimension
/// `n_basis - 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothPlan {
    pub var: String,
    pub label: String,
    pub df: f64,
    pub lambda: f64,
    pub achieved_df: f64,
    pub degree: usize,
    pub n_basis: usize,
    pub knots: Vec<f64>,
    pub sum_to_zero: bool,
    /// n_basis x n_coef constraint transform, row-major.
    pub z: Vec<f64>,
    /// (n_basis - 2) x n_coef penalty root D2 * Z, row-major.
    pub dz: Vec<f64>,
}

impl SmoothPlan {
    /// Calibrate a smooth term against the observed covariate values.
    pub fn build(var: &str, label: &str, df: f64, xs: &[f64]) -> Result<Self> {
        let n_basis = SMOOTH_N_BASIS;
        let degree = SMOOTH_DEGREE;
        if !(df > 1.0) {
            return Err(TrafoError::Spec(format!(
                "smooth df for `{var}` must exceed 1, got {df}"
            )));
        }
        if df > (n_basis - 1) as f64 {
            return Err(TrafoError::Spec(format!(
                "smooth df {df} for `{var}` exceeds the {} free basis functions",
                n_basis - 1
            )));
        }
        let (min, max) = min_max(xs)?;
        if min == max {
            return Err(TrafoError::Spec(format!(
                "smooth variable `{var}` is constant"
            )));
        }
        let knots = bspline_knots(min, max, n_basis, degree);

        // Column means of the raw basis over the data define the
        // sum-to-zero constraint.
        let mut colmeans = vec![0.0; n_basis];
        for &x in xs {
            let row = bspline_row(x, &knots, degree, n_basis);
            for (m, v) in colmeans.iter_mut().zip(&row) {
                *m += v;
            }
        }
        for m in colmeans.iter_mut() {
            *m /= xs.len() as f64;
        }
        let z = householder_nullspace(&colmeans);
        let n_coef = n_basis - 1;

        let d2 = diff_matrix(n_basis, SMOOTH_PENALTY_ORDER);
        let dz = mat_mul(&d2, n_basis - 2, n_basis, &z, n_coef);

        let mut plan = Self {
            var: var.to_string(),
            label: label.to_string(),
            df,
            lambda: 0.0,
            achieved_df: n_coef as f64,
            degree,
            n_basis,
            knots,
            sum_to_zero: true,
            z,
            dz,
        };

        let design: Vec<Vec<f64>> = xs.iter().map(|&x| plan.row(x)).collect();
        let (lambda, achieved) = calibrate_lambda(&design, &plan.dz, n_coef, df)?;
        plan.lambda = lambda;
        plan.achieved_df = achieved;
        Ok(plan)
    }

    pub fn n_coef(&self) -> usize {
        self.n_basis - 1
    }

    /// Constrained design row b(x)' Z. Covariate values outside the
    /// training range are clamped to the boundary knots.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let raw = bspline_row(x, &self.knots, self.degree, self.n_basis);
        let n_coef = self.n_coef();
        let mut out = vec![0.0; n_coef];
        for (i, r) in raw.iter().enumerate() {
            for j in 0..n_coef {
                out[j] += r * self.z[i * n_coef + j];
            }
        }
        out
    }

    /// trace((X'X + lambda D'D)^{-1} X'X) on the stored penalty for a
    /// given design; exposed for calibration checks.
    pub fn effective_df(&self, design: &[Vec<f64>], lambda: f64) -> f64 {
        effective_df(design, &self.dz, self.n_coef(), lambda)
    }
}

/// Open-uniform knot vector: boundary knots repeated degree+1 times,
/// interior knots equally spaced.
pub fn bspline_knots(min: f64, max: f64, n_basis: usize, degree: usize) -> Vec<f64> {
    let n_interior = n_basis - degree - 1;
    let mut knots = Vec::with_capacity(n_basis + degree + 1);
    for _ in 0..=degree {
        knots.push(min);
    }
    for i in 1..=n_interior {
        knots.push(min + (max - min) * i as f64 / (n_interior + 1) as f64);
    }
    for _ in 0..=degree {
        knots.push(max);
    }
    knots
}

/// All n_basis B-spline values at x (Cox-de Boor / de Boor recursion).
pub fn bspline_row(x: f64, knots: &[f64], degree: usize, n_basis: usize) -> Vec<f64> {
    let lo = knots[degree];
    let hi = knots[n_basis];
    let x = x.clamp(lo, hi);
    // Knot span index.
    let mut span = degree;
    while span < n_basis - 1 && x >= knots[span + 1] {
        span += 1;
    }

    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }

    let mut row = vec![0.0; n_basis];
    for (r, v) in n.iter().enumerate() {
        row[span - degree + r] = *v;
    }
    row
}

/// Difference penalty root of the given order: (k-order) x k, row-major.
pub fn diff_matrix(k: usize, order: usize) -> Vec<f64> {
    // Start from the identity and difference `order` times.
    let mut rows = k;
    let mut m: Vec<f64> = (0..k * k)
        .map(|i| if i % (k + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    for _ in 0..order {
        let new_rows = rows - 1;
        let mut next = vec![0.0; new_rows * k];
        for r in 0..new_rows {
            for c in 0..k {
                next[r * k + c] = m[(r + 1) * k + c] - m[r * k + c];
            }
        }
        m = next;
        rows = new_rows;
    }
    m
}

/// Orthonormal basis of the nullspace of a single linear constraint c,
/// via the Householder reflection mapping c to a multiple of e1: the
/// remaining k-1 columns of the reflector. Returned k x (k-1), row-major.
pub fn householder_nullspace(c: &[f64]) -> Vec<f64> {
    let k = c.len();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0, "constraint vector must be nonzero");
    let mut v: Vec<f64> = c.to_vec();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vnorm2: f64 = v.iter().map(|x| x * x).sum();
    // H = I - 2 v v' / (v'v); Z = columns 1..k of H.
    let mut z = vec![0.0; k * (k - 1)];
    for i in 0..k {
        for j in 1..k {
            let h = (if i == j { 1.0 } else { 0.0 }) - 2.0 * v[i] * v[j] / vnorm2;
            z[i * (k - 1) + (j - 1)] = h;
        }
    }
    z
}

fn mat_mul(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut out = vec![0.0; ar * bc];
    for i in 0..ar {
        for l in 0..ac {
            let av = a[i * ac + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..bc {
                out[i * bc + j] += av * b[l * bc + j];
            }
        }
    }
    out
}

fn effective_df(design: &[Vec<f64>], dz: &[f64], n_coef: usize, lambda: f64) -> f64 {
    use nalgebra::DMatrix;
    let mut xtx = DMatrix::<f64>::zeros(n_coef, n_coef);
    for row in design {
        for i in 0..n_coef {
            for j in 0..n_coef {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
    }
    let pen_rows = dz.len() / n_coef;
    let mut pen = DMatrix::<f64>::zeros(n_coef, n_coef);
    for r in 0..pen_rows {
        for i in 0..n_coef {
            for j in 0..n_coef {
                pen[(i, j)] += dz[r * n_coef + i] * dz[r * n_coef + j];
            }
        }
    }
    let a = &xtx + &pen * lambda;
    match a.lu().solve(&xtx) {
        Some(m) => m.trace(),
        None => f64::NAN,
    }
}

/// Bisection on log lambda so the effective df matches the target.
fn calibrate_lambda(
    design: &[Vec<f64>],
    dz: &[f64],
    n_coef: usize,
    target: f64,
) -> Result<(f64, f64)> {
    let df_at = |log_lambda: f64| effective_df(design, dz, n_coef, log_lambda.exp());
    let (mut lo, mut hi) = (-25.0f64, 30.0f64);
    let df_lo = df_at(lo);
    let df_hi = df_at(hi);
    if !(df_hi <= target && target <= df_lo) {
        return Err(TrafoError::Spec(format!(
            "requested df {target} is outside the achievable range [{df_hi:.2}, {df_lo:.2}]"
        )));
    }
    // Effective df decreases in lambda.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if df_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    let log_lambda = 0.5 * (lo + hi);
    let achieved = df_at(log_lambda);
    if (achieved - target).abs() > 0.1 {
        return Err(TrafoError::Spec(format!(
            "df calibration failed: requested {target}, achieved {achieved:.3}"
        )));
    }
    Ok((log_lambda.exp(), achieved))
}

fn min_max(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(TrafoError::Data("empty column".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if !x.is_finite() {
            return Err(TrafoError::Data("non-finite covariate value".into()));
        }
        min = min.min(x);
        max = max.max(x);
    }
    Ok((min, max))
}

/// Factor term: one coefficient per level, looked up by level code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorPlan {
    pub var: String,
    pub label: String,
    pub levels: Vec<String>,
}

impl FactorPlan {
    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Architecture of a named network term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(TrafoError::Spec(format!("network `{name}` has no layers")));
        }
        for l in &self.layers {
            if l.units == 0 {
                return Err(TrafoError::Spec(format!(
                    "network `{name}` has a zero-width layer"
                )));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(TrafoError::Spec(format!(
                    "network `{name}` dropout must be in [0, 1)"
                )));
            }
        }
        let last = self.layers.last().expect("nonempty");
        if last.activation != Activation::Linear {
            return Err(TrafoError::Spec(format!(
                "network `{name}` must end in a linear layer"
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.units).unwrap_or(0)
    }
}
