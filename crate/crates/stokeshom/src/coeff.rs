//! 1-periodic elliptic coefficient tensors.
//!
//! A coefficient field is the fourth-order tensor A(y) = (a_{ij}^{ab})
//! on the unit cell, reduced mod 1 before every evaluation, together with
//! an ellipticity constant mu such that
//! mu |xi|^2 <= a_{ij}^{ab}(y) xi_i^a xi_j^b <= |xi|^2 / mu
//! for all matrices xi. Built-in families span the regularity range the
//! solvers must handle: constant, smooth, and merely bounded measurable.

use crate::grid::{frac, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("unknown coefficient family '{0}'")]
    UnknownFamily(String),
    #[error("invalid parameters for family '{family}': {reason}")]
    BadParams { family: String, reason: String },
    #[error("family '{0}' has no analytic gradient")]
    NoGradient(String),
}

/// Fourth-order tensor a_{ij}^{ab} with i, j spatial and a, b component
/// indices, stored as [i][j][a][b].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tensor4(pub [[[[f64; D]; D]; D]; D]);

impl Tensor4 {
    pub fn zero() -> Self {
        Tensor4([[[[0.0; D]; D]; D]; D])
    }

    /// mu * delta_{ij} delta_{ab}.
    pub fn isotropic(mu: f64) -> Self {
        let mut t = Tensor4::zero();
        for i in 0..D {
            for a in 0..D {
                t.0[i][i][a][a] = mu;
            }
        }
        t
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        self.0[i][j][a][b]
    }

    /// Rayleigh quotient a_{ij}^{ab} xi_i^a xi_j^b / |xi|^2.
    pub fn rayleigh(&self, xi: &[[f64; D]; D]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..D {
            for a in 0..D {
                den += xi[i][a] * xi[i][a];
                for j in 0..D {
                    for b in 0..D {
                        num += self.0[i][j][a][b] * xi[i][a] * xi[j][b];
                    }
                }
            }
        }
        num / den
    }

    /// Index swap (i,a) <-> (j,b).
    pub fn adjoint(&self) -> Tensor4 {
        let mut t = Tensor4::zero();
        for i in 0..D {
            for j in 0..D {
                for a in 0..D {
                    for b in 0..D {
                        t.0[i][j][a][b] = self.0[j][i][b][a];
                    }
                }
            }
        }
        t
    }

    pub fn is_self_adjoint(&self, tol: f64) -> bool {
        let adj = self.adjoint();
        self.max_abs_diff(&adj) <= tol
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..D {
            for j in 0..D {
                for a in 0..D {
                    for b in 0..D {
                        m = m.max((self.0[i][j][a][b] - other.0[i][j][a][b]).abs());
                    }
                }
            }
        }
        m
    }

    /// Extremal eigenvalues of the symmetrized d^2 x d^2 matrix
    /// M[(i,a),(j,b)] = a_{ij}^{ab}; these bound the Rayleigh quotients.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let dim = D * D;
        let mut m = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for i in 0..D {
            for a in 0..D {
                for j in 0..D {
                    for b in 0..D {
                        let r = i * D + a;
                        let c = j * D + b;
                        m[(r, c)] = 0.5 * (self.0[i][j][a][b] + self.0[j][i][b][a]);
                    }
                }
            }
        }
        let eig = m.symmetric_eigen();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &l in eig.eigenvalues.iter() {
            lo = lo.min(l);
            hi = hi.max(l);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Constant,
    Smooth,
    PiecewiseConstant,
}

type EvalFn = dyn Fn([f64; 2]) -> Tensor4 + Send + Sync;
type GradFn = dyn Fn([f64; 2]) -> [Tensor4; D] + Send + Sync;

/// A 1-periodic elliptic coefficient tensor field.
#[derive(Clone)]
pub struct CoefficientField {
    pub dim: usize,
    pub mu: f64,
    pub smoothness: Smoothness,
    pub family: String,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("family", &self.family)
            .field("mu", &self.mu)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

impl CoefficientField {
    /// Evaluate at a cell point; the argument is reduced mod 1 first.
    pub fn at(&self, y: [f64; 2]) -> Tensor4 {
        (self.eval)([frac(y[0]), frac(y[1])])
    }

    /// Analytic gradient [dA/dy_1, dA/dy_2], present for smooth families
    /// (identically zero for constant ones).
    pub fn grad_at(&self, y: [f64; 2]) -> Option<[Tensor4; D]> {
        self.grad
            .as_ref()
            .map(|g| g([frac(y[0]), frac(y[1])]))
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// Adjoint field A* with (a*)_{ij}^{ab}(y) = a_{ji}^{ba}(y); exact
    /// involution.
    pub fn adjoint(&self) -> CoefficientField {
        let eval = self.eval.clone();
        let grad = self.grad.clone();
        CoefficientField {
            dim: self.dim,
            mu: self.mu,
            smoothness: self.smoothness,
            family: format!("adjoint({})", self.family),
            eval: Arc::new(move |y| eval(y).adjoint()),
            grad: grad.map(|g| {
                Arc::new(move |y: [f64; 2]| {
                    let d = g(y);
                    [d[0].adjoint(), d[1].adjoint()]
                }) as Arc<GradFn>
            }),
        }
    }

    /// Constant field from a given tensor (ellipticity constant from its
    /// eigenvalue bounds).
    pub fn from_constant(t: Tensor4) -> Result<CoefficientField, CoeffError> {
        let (lo, hi) = t.eigen_bounds();
        if lo <= 0.0 {
            return Err(CoeffError::BadParams {
                family: "constant".into(),
                reason: format!("tensor is not elliptic (min eigenvalue {lo:.3e})"),
            });
        }
        if !t.is_self_adjoint(1e-12 * hi.max(1.0)) {
            return Err(CoeffError::BadParams {
                family: "constant".into(),
                reason: "tensor must satisfy a_ij^ab = a_ji^ba (self-adjoint); \
                         the direct solver factors symmetric forms only"
                    .into(),
            });
        }
        let mu = lo.min(1.0 / hi);
        Ok(CoefficientField {
            dim: D,
            mu,
            smoothness: Smoothness::Constant,
            family: "constant".into(),
            eval: Arc::new(move |_| t),
            grad: Some(Arc::new(|_| [Tensor4::zero(), Tensor4::zero()])),
        })
    }
}

/// Instantiate one of the built-in families.
///
/// * `constant`: params empty (identity), `[c]`, or the 16 entries of a
///   self-adjoint tensor in (i, j, a, b) row-major order;
/// * `classical(mu)`: a_{ij}^{ab} = mu delta_{ij} delta_{ab};
/// * `laminate(v_1, .., v_L)`: scalar viscosity, piecewise constant in y_1
///   over L equal layers;
/// * `trig(mu, amp)`: scalar viscosity 1 + amp sin(2 pi y_1) sin(2 pi y_2),
///   smooth with analytic gradient; requires mu <= 1 - amp;
/// * `checkerboard(v_1, v_2)`: scalar viscosity on the 2x2 half-cell
///   checkerboard, bounded measurable only.
pub fn builtin_family(name: &str, params: &[f64]) -> Result<CoefficientField, CoeffError> {
    let bad = |reason: &str| CoeffError::BadParams {
        family: name.to_string(),
        reason: reason.to_string(),
    };
    match name {
        "constant" => match params.len() {
            0 => CoefficientField::from_constant(Tensor4::isotropic(1.0)),
            1 => {
                if params[0] <= 0.0 {
                    return Err(bad("scale must be positive"));
                }
                CoefficientField::from_constant(Tensor4::isotropic(params[0]))
            }
            16 => {
                let mut t = Tensor4::zero();
                let mut k = 0;
                for i in 0..D {
                    for j in 0..D {
                        for a in 0..D {
                            for b in 0..D {
                                t.0[i][j][a][b] = params[k];
                                k += 1;
                            }
                        }
                    }
                }
                CoefficientField::from_constant(t)
            }
            _ => Err(bad("expected 0, 1 or 16 parameters")),
        },
        "classical" => {
            if params.len() != 1 || params[0] <= 0.0 {
                return Err(bad("expected one positive parameter mu"));
            }
            let mu0 = params[0];
            Ok(CoefficientField {
                dim: D,
                mu: mu0.min(1.0 / mu0),
                smoothness: Smoothness::Constant,
                family: "classical".into(),
                eval: Arc::new(move |_| Tensor4::isotropic(mu0)),
                grad: Some(Arc::new(|_| [Tensor4::zero(), Tensor4::zero()])),
            })
        }
        "laminate" => {
            if params.len() < 2 || params.iter().any(|&v| v <= 0.0) {
                return Err(bad("expected at least two positive layer values"));
            }
            let layers: Vec<f64> = params.to_vec();
            let vmin = layers.iter().cloned().fold(f64::INFINITY, f64::min);
            let vmax = layers.iter().cloned().fold(0.0f64, f64::max);
            let nl = layers.len();
            Ok(CoefficientField {
                dim: D,
                mu: vmin.min(1.0 / vmax),
                smoothness: Smoothness::PiecewiseConstant,
                family: "laminate".into(),
                eval: Arc::new(move |y| {
                    let k = ((y[0] * nl as f64).floor() as usize).min(nl - 1);
                    Tensor4::isotropic(layers[k])
                }),
                grad: None,
            })
        }
        "trig" => {
            if params.len() != 2 {
                return Err(bad("expected parameters [mu, amplitude]"));
            }
            let (mu0, amp) = (params[0], params[1]);
            if !(0.0..1.0).contains(&amp) {
                return Err(bad("amplitude must lie in [0, 1)"));
            }
            if mu0 <= 0.0 || mu0 > (1.0 - amp).min(1.0 / (1.0 + amp)) {
                return Err(bad("mu must satisfy 0 < mu <= min(1 - amp, 1/(1 + amp))"));
            }
            let tp = 2.0 * std::f64::consts::PI;
            Ok(CoefficientField {
                dim: D,
                mu: mu0,
                smoothness: Smoothness::Smooth,
                family: "trig".into(),
                eval: Arc::new(move |y| {
                    Tensor4::isotropic(1.0 + amp * (tp * y[0]).sin() * (tp * y[1]).sin())
                }),
                grad: Some(Arc::new(move |y| {
                    let d1 = amp * tp * (tp * y[0]).cos() * (tp * y[1]).sin();
                    let d2 = amp * tp * (tp * y[0]).sin() * (tp * y[1]).cos();
                    [Tensor4::isotropic(d1), Tensor4::isotropic(d2)]
                })),
            })
        }
        "checkerboard" => {
            if params.len() != 2 || params.iter().any(|&v| v <= 0.0) {
                return Err(bad("expected two positive cell values"));
            }
            let (v1, v2) = (params[0], params[1]);
            let vmin = v1.min(v2);
            let vmax = v1.max(v2);
            Ok(CoefficientField {
                dim: D,
                mu: vmin.min(1.0 / vmax),
                smoothness: Smoothness::PiecewiseConstant,
                family: "checkerboard".into(),
                eval: Arc::new(move |y| {
                    // half-open 2x2 pattern: value of the half-cell containing y
                    let i = (y[0] * 2.0).floor() as i64;
                    let j = (y[1] * 2.0).floor() as i64;
                    Tensor4::isotropic(if (i + j) % 2 == 0 { v1 } else { v2 })
                }),
                grad: None,
            })
        }
        other => Err(CoeffError::UnknownFamily(other.to_string())),
    }
}

/// Extremal Rayleigh quotients over deterministic pseudorandom (y, xi)
/// samples with |xi| = 1.
#[derive(Debug, Clone, Copy)]
pub struct EllipticityReport {
    pub min_quotient: f64,
    pub max_quotient: f64,
    pub mu: f64,
    pub pass: bool,
}

pub fn check_ellipticity(a: &CoefficientField, samples: usize, seed: u64) -> EllipticityReport {
    assert!(samples >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..samples {
        let y = [rng.gen::<f64>(), rng.gen::<f64>()];
        let mut xi = [[0.0; D]; D];
        let mut norm = 0.0f64;
        for row in xi.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
                norm += *v * *v;
            }
        }
        let norm = norm.sqrt();
        for row in xi.iter_mut() {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let q = a.at(y).rayleigh(&xi);
        lo = lo.min(q);
        hi = hi.max(q);
    }
    let tol = 1e-12;
    EllipticityReport {
        min_quotient: lo,
        max_quotient: hi,
        mu: a.mu,
        pass: lo >= a.mu - tol && hi <= 1.0 / a.mu + tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn classical_identity_contraction() {
        // classical(1) with xi = identity: a xi xi = |xi|^2 = d.
        let a = builtin_family("classical", &[1.0]).unwrap();
        let xi = [[1.0, 0.0], [0.0, 1.0]];
        let t = a.at([0.3, 0.9]);
        let mut contraction = 0.0;
        for i in 0..D {
            for j in 0..D {
                for al in 0..D {
                    for be in 0..D {
                        contraction += t.get(i, j, al, be) * xi[i][al] * xi[j][be];
                    }
                }
            }
        }
        assert_relative_eq!(contraction, D as f64, epsilon = 1e-14);
    }

    #[test]
    fn constant_family_is_constant() {
        let a = builtin_family("constant", &[2.5]).unwrap();
        let t0 = a.at([0.1, 0.2]);
        let t1 = a.at([0.9, 0.7]);
        assert_eq!(t0.max_abs_diff(&t1), 0.0);
    }

    #[test]
    fn periodicity_is_exact() {
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        // dyadic points shifted by integers are bit-identical after reduction
        for &(y, z) in &[
            ([0.25, 0.75], [1.25, -0.25]),
            ([0.625, 0.0625], [2.625, 5.0625]),
        ] {
            assert_eq!(a.at(y).max_abs_diff(&a.at(z)), 0.0);
        }
        // generic shifts agree to floating-point representation error
        let d = a.at([0.3, 0.7]).max_abs_diff(&a.at([1.3, -0.3]));
        assert!(d < 1e-14);
    }

    #[test]
    fn trig_rayleigh_quotients_within_bounds() {
        // 10^4 seeded samples stay within [mu, 1/mu] = [0.5, 2.0].
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let rep = check_ellipticity(&a, 10_000, 42);
        assert!(rep.pass, "{rep:?}");
        assert!(rep.min_quotient >= 0.5 - 1e-12);
        assert!(rep.max_quotient <= 2.0 + 1e-12);
        // the actual range of 1 + 0.4 sin sin is tighter
        assert!(rep.min_quotient >= 0.6 - 1e-12);
        assert!(rep.max_quotient <= 1.4 + 1e-12);
    }

    #[test]
    fn classical_quotients_all_one() {
        let a = builtin_family("classical", &[1.0]).unwrap();
        let rep = check_ellipticity(&a, 100, 7);
        assert_relative_eq!(rep.min_quotient, 1.0, epsilon = 1e-13);
        assert_relative_eq!(rep.max_quotient, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn laminate_quotients_between_layer_values() {
        let a = builtin_family("laminate", &[1.0, 4.0]).unwrap();
        let rep = check_ellipticity(&a, 2_000, 3);
        assert!(rep.min_quotient >= 1.0 - 1e-12);
        assert!(rep.max_quotient <= 4.0 + 1e-12);
        assert!(rep.pass);
    }

    #[test]
    fn checkerboard_quotients_between_cell_values() {
        let a = builtin_family("checkerboard", &[1.0, 9.0]).unwrap();
        let rep = check_ellipticity(&a, 2_000, 3);
        assert!(rep.min_quotient >= 1.0 - 1e-12);
        assert!(rep.max_quotient <= 9.0 + 1e-12);
        assert!(rep.pass);
    }

    #[test]
    fn adjoint_is_involution() {
        for (name, params) in [
            ("trig", vec![0.5, 0.4]),
            ("laminate", vec![1.0, 4.0]),
            ("checkerboard", vec![1.0, 9.0]),
        ] {
            let a = builtin_family(name, &params).unwrap();
            let aa = a.adjoint().adjoint();
            for &y in &[[0.11, 0.57], [0.73, 0.29], [0.99, 0.01]] {
                assert_eq!(a.at(y).max_abs_diff(&aa.at(y)), 0.0);
            }
        }
    }

    #[test]
    fn adjoint_swaps_indices_pointwise() {
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let y = [0.3, 0.7];
        let t = a.at(y);
        let tstar = a.adjoint().at(y);
        assert_eq!(tstar.get(0, 1, 0, 1), t.get(1, 0, 1, 0));
        for i in 0..D {
            for j in 0..D {
                for al in 0..D {
                    for be in 0..D {
                        assert_eq!(tstar.get(i, j, al, be), t.get(j, i, be, al));
                    }
                }
            }
        }
    }

    #[test]
    fn classical_adjoint_is_itself() {
        let a = builtin_family("classical", &[0.7]).unwrap();
        let astar = a.adjoint();
        for &y in &[[0.2, 0.8], [0.6, 0.1]] {
            assert_eq!(a.at(y).max_abs_diff(&astar.at(y)), 0.0);
        }
    }

    #[test]
    fn trig_gradient_matches_finite_differences() {
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let y = [0.37, 0.21];
        let g = a.grad_at(y).unwrap();
        let h = 1e-6;
        for axis in 0..D {
            let mut yp = y;
            let mut ym = y;
            yp[axis] += h;
            ym[axis] -= h;
            let fd = (a.at(yp).get(0, 0, 0, 0) - a.at(ym).get(0, 0, 0, 0)) / (2.0 * h);
            assert_relative_eq!(g[axis].get(0, 0, 0, 0), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(matches!(
            builtin_family("nope", &[]),
            Err(CoeffError::UnknownFamily(_))
        ));
        assert!(builtin_family("classical", &[-1.0]).is_err());
        assert!(builtin_family("trig", &[0.9, 0.4]).is_err());
        assert!(builtin_family("laminate", &[1.0]).is_err());
        // non-self-adjoint constant tensor is rejected
        let mut params = vec![0.0; 16];
        for i in 0..D {
            for a in 0..D {
                params[i * 8 + i * 4 + a * 2 + a] = 1.0;
            }
        }
        params[1] = 0.3; // a_{00}^{01} without its mirror
        assert!(builtin_family("constant", &params).is_err());
    }

    #[test]
    fn checkerboard_half_open_convention() {
        let a = builtin_family("checkerboard", &[1.0, 9.0]).unwrap();
        // at the discontinuity y1 = 0.5 the right cell value applies
        assert_eq!(a.at([0.5, 0.25]).get(0, 0, 0, 0), 9.0);
        assert_eq!(a.at([0.499999, 0.25]).get(0, 0, 0, 0), 1.0);
        assert_eq!(a.at([0.0, 0.0]).get(0, 0, 0, 0), 1.0);
    }
}
