//! Discrete Neumann boundary-value problems for the Stokes system on the
//! unit square: the oscillating problem with coefficient A(x/eps), the
//! homogenized problem with the constant effective tensor, and the adjoint
//! problems of the duality argument, plus manufactured-solution generation
//! for order verification.
//!
//! The weak form is posed on the full velocity space (no essential
//! conditions): a(u, v) - int p div(v) = int F.v + int_bdry f.v and
//! int div(u) psi = int g psi. Constant velocities are removed by mean
//! constraints through Lagrange multipliers; the pressure is determined by
//! the natural boundary term and its mean is only recorded, never
//! constrained.

use crate::coeff::{CoefficientField, Tensor4};
use crate::grid::{
    self, h2_surrogate, mean, subtract_mean, DomainMesh, ElemEval, GridFunction, MeshHandle,
    SpaceTag, D,
};
use crate::linsolve::{nd_order, ConstrainedSystem, LinError, SparseSym};
use crate::quad::{self, NQ};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeumannError {
    #[error("linear solve failed: {0}")]
    Solve(#[from] LinError),
    #[error("data violates the compatibility condition: |int F + int f| = {defect:.3e} exceeds {limit:.3e}")]
    Incompatible { defect: f64, limit: f64 },
    #[error("mesh does not resolve eps = {eps}: need h <= eps/8, got h = {h}")]
    UnderResolved { eps: f64, h: f64 },
    #[error("eps = {0} outside (0, 1]")]
    BadEps(f64),
    #[error("coefficient family '{0}' lacks an analytic gradient")]
    NoGradient(String),
}

pub type VecClosure = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;
pub type ScalarClosure = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
/// Traction datum evaluated at a boundary point with its outward normal.
pub type TractionClosure = Arc<dyn Fn([f64; 2], [f64; 2]) -> [f64; 2] + Send + Sync>;

/// Problem data (F, g, f) for one Neumann solve.
#[derive(Clone)]
pub struct ProblemData {
    pub body: VecClosure,
    pub div_datum: ScalarClosure,
    pub traction: TractionClosure,
}

impl ProblemData {
    pub fn zero() -> Self {
        ProblemData {
            body: Arc::new(|_| [0.0, 0.0]),
            div_datum: Arc::new(|_| 0.0),
            traction: Arc::new(|_, _| [0.0, 0.0]),
        }
    }

    /// |int_Omega F + int_bdry f| and the norm scale used by the
    /// compatibility test.
    pub fn compatibility_defect(&self, mesh: &Arc<DomainMesh>) -> (f64, f64) {
        let g = crate::quad::gauss3();
        let mut total = [0.0f64; 2];
        let mut scale = 0.0f64;
        let mh = MeshHandle::Domain(mesh.clone());
        grid::for_each_qp(&mh, |_e, _q, x, w| {
            let f = (self.body)(x);
            total[0] += w * f[0];
            total[1] += w * f[1];
            scale += w * (f[0] * f[0] + f[1] * f[1]);
        });
        let mut scale_b = 0.0f64;
        let h = mesh.h();
        for facet in &mesh.boundary_facets {
            for &(tq, wq) in g.iter() {
                let x = facet_point(mesh, facet, tq);
                let f = (self.traction)(x, facet.normal);
                total[0] += wq * h * f[0];
                total[1] += wq * h * f[1];
                scale_b += wq * h * (f[0] * f[0] + f[1] * f[1]);
            }
        }
        let defect = (total[0] * total[0] + total[1] * total[1]).sqrt();
        (defect, scale.sqrt() + scale_b.sqrt())
    }

    fn validate(&self, mesh: &Arc<DomainMesh>) -> Result<(), NeumannError> {
        let (defect, scale) = self.compatibility_defect(mesh);
        let limit = 1e-10 * scale.max(1e-30);
        if defect > limit.max(1e-14) {
            return Err(NeumannError::Incompatible { defect, limit });
        }
        Ok(())
    }
}

fn facet_point(mesh: &DomainMesh, facet: &crate::grid::Facet, t: f64) -> [f64; 2] {
    let h = mesh.h();
    let (ex, ey) = facet.elem;
    match facet.side {
        0 => [(ex as f64 + t) * h, 0.0],
        1 => [1.0, (ey as f64 + t) * h],
        2 => [(ex as f64 + t) * h, 1.0],
        _ => [0.0, (ey as f64 + t) * h],
    }
}

/// Coefficient seen by a domain solve: either a constant tensor or a
/// 1-periodic field sampled at x/eps.
#[derive(Clone)]
pub enum SpatialCoeff {
    Constant(Tensor4),
    Oscillating { field: CoefficientField, eps: f64 },
}

impl SpatialCoeff {
    #[inline]
    pub fn at(&self, x: [f64; 2]) -> Tensor4 {
        match self {
            SpatialCoeff::Constant(t) => *t,
            SpatialCoeff::Oscillating { field, eps } => {
                field.at([x[0] / eps, x[1] / eps])
            }
        }
    }
}

/// Record of the gauge normalizations applied to a solution.
#[derive(Debug, Clone, Copy)]
pub struct Gauge {
    /// Velocity mean removed after the solve (already near zero through the
    /// mean multipliers).
    pub velocity_mean_removed: [f64; 2],
    /// Mean of the returned pressure (recorded, not subtracted).
    pub pressure_mean: f64,
}

/// A velocity/pressure pair on the bounded domain.
pub struct FlowField {
    pub u: GridFunction,
    pub p: GridFunction,
    pub gauge: Gauge,
    /// Relative algebraic residual of the solve.
    pub solver_residual: f64,
    /// Broken H2 surrogate norm of the velocity.
    pub u_h2: f64,
}

fn domain_dof_coords(mesh: &DomainMesh) -> Vec<(i32, i32)> {
    let na = mesh.q2_per_axis();
    let nu = D * mesh.num_q2();
    let np = 3 * mesh.num_elems();
    let mut coords = Vec::with_capacity(nu + np);
    for node in 0..mesh.num_q2() {
        let i = (node % na) as i32;
        let j = (node / na) as i32;
        for _c in 0..D {
            coords.push((i, j));
        }
    }
    for e in 0..mesh.num_elems() {
        let ex = (e % mesh.m) as i32;
        let ey = (e / mesh.m) as i32;
        for _k in 0..3 {
            coords.push((2 * ex + 1, 2 * ey + 1));
        }
    }
    coords
}

/// Assembled Neumann Stokes operator on the domain mesh (factored KKT plus
/// velocity mean constraints), reusable across right-hand sides.
pub struct NeumannOp {
    pub mesh: Arc<DomainMesh>,
    sys: ConstrainedSystem,
    nu: usize,
}

impl NeumannOp {
    pub fn assemble(
        coeff: &SpatialCoeff,
        mesh: &Arc<DomainMesh>,
        tol: f64,
    ) -> Result<Self, NeumannError> {
        let t = quad::tables();
        let nq2 = mesh.num_q2();
        let nel = mesh.num_elems();
        let nu = D * nq2;
        let np = 3 * nel;
        let n = nu + np;
        let h = mesh.h();
        let jac = h * h;

        let mut trips: Vec<(u32, u32, f64)> = Vec::with_capacity(nel * 290);
        let mut int_phi = vec![0.0f64; nq2];
        for ey in 0..mesh.m {
            for ex in 0..mesh.m {
                let e = ey * mesh.m + ex;
                let nodes = mesh.q2_elem_nodes(ex, ey);
                let mut ke = [[0.0f64; 18]; 18];
                let mut de = [[0.0f64; 18]; 3];
                for q in 0..NQ {
                    let w = t.w[q] * jac;
                    let x = [
                        (ex as f64 + t.pts[q][0]) * h,
                        (ey as f64 + t.pts[q][1]) * h,
                    ];
                    let aa = coeff.at(x);
                    let mut g = [[0.0f64; 2]; 9];
                    for kb in 0..9 {
                        g[kb] = [t.q2_d[q][kb][0] / h, t.q2_d[q][kb][1] / h];
                    }
                    for bb in 0..9 {
                        for be in 0..D {
                            let col = bb * D + be;
                            for ab in 0..9 {
                                for al in 0..D {
                                    let row = ab * D + al;
                                    if row > col {
                                        continue;
                                    }
                                    let mut s = 0.0;
                                    for i in 0..D {
                                        for j in 0..D {
                                            s += aa.get(i, j, al, be) * g[bb][j] * g[ab][i];
                                        }
                                    }
                                    ke[row][col] += w * s;
                                }
                            }
                            for c in 0..3 {
                                de[c][col] += w * t.p1[q][c] * g[bb][be];
                            }
                        }
                    }
                    for (kb, &node) in nodes.iter().enumerate() {
                        int_phi[node] += w * t.q2[q][kb];
                    }
                }
                for la in 0..18 {
                    let ga = (nodes[la / D] * D + la % D) as u32;
                    for lb in la..18 {
                        let gb = (nodes[lb / D] * D + lb % D) as u32;
                        let v = ke[la.min(lb)][la.max(lb)];
                        if v != 0.0 {
                            let (r, c) = if ga <= gb { (ga, gb) } else { (gb, ga) };
                            trips.push((r, c, v));
                        }
                    }
                }
                for c in 0..3 {
                    let gp = (nu + 3 * e + c) as u32;
                    for lb in 0..18 {
                        let gb = (nodes[lb / D] * D + lb % D) as u32;
                        trips.push((gb, gp, -de[c][lb]));
                    }
                }
            }
        }
        for k in 0..np {
            let d = (nu + k) as u32;
            trips.push((d, d, 0.0));
        }
        let mat = SparseSym::from_triplets(n, trips);

        let mut cons = Vec::with_capacity(D);
        for c in 0..D {
            let mut row = vec![0.0; n];
            for node in 0..nq2 {
                row[node * D + c] = int_phi[node];
            }
            cons.push(row);
        }

        let coords = domain_dof_coords(mesh);
        let order = nd_order(&coords, false, false);
        let mut signs = vec![1i8; nu];
        signs.extend(vec![-1i8; np]);
        let sys = ConstrainedSystem::new(mat, &order, &signs, cons, tol)?;
        Ok(NeumannOp { mesh: mesh.clone(), sys, nu })
    }

    /// Assemble the load vector for (F, g, f).
    fn rhs(&self, data: &ProblemData) -> Vec<f64> {
        let t = quad::tables();
        let mesh = &self.mesh;
        let h = mesh.h();
        let jac = h * h;
        let mut rhs = vec![0.0; self.sys.n()];
        for ey in 0..mesh.m {
            for ex in 0..mesh.m {
                let e = ey * mesh.m + ex;
                let nodes = mesh.q2_elem_nodes(ex, ey);
                for q in 0..NQ {
                    let w = t.w[q] * jac;
                    let x = [
                        (ex as f64 + t.pts[q][0]) * h,
                        (ey as f64 + t.pts[q][1]) * h,
                    ];
                    let f = (data.body)(x);
                    let gv = (data.div_datum)(x);
                    for (kb, &node) in nodes.iter().enumerate() {
                        let phi = t.q2[q][kb];
                        for c in 0..D {
                            rhs[node * D + c] += w * f[c] * phi;
                        }
                    }
                    // continuity row is negated for symmetry: -D u = -int g psi
                    for c in 0..3 {
                        rhs[self.nu + 3 * e + c] -= w * gv * t.p1[q][c];
                    }
                }
            }
        }
        // boundary traction
        let g1 = quad::gauss3();
        for facet in &mesh.boundary_facets {
            let (ex, ey) = facet.elem;
            let nodes = mesh.q2_elem_nodes(ex, ey);
            for &(tq, wq) in g1.iter() {
                let x = facet_point(mesh, facet, tq);
                let f = (data.traction)(x, facet.normal);
                let (ns, _, _) = quad::shape_q2_1d(tq);
                // only the three nodes on the edge carry nonzero trace
                let edge_nodes: [usize; 3] = match facet.side {
                    0 => [0, 1, 2],
                    1 => [2, 5, 8],
                    2 => [6, 7, 8],
                    _ => [0, 3, 6],
                };
                for (k, &ln) in edge_nodes.iter().enumerate() {
                    let node = nodes[ln];
                    for c in 0..D {
                        rhs[node * D + c] += wq * h * f[c] * ns[k];
                    }
                }
            }
        }
        rhs
    }

    /// Solve for the given data; the velocity mean is constrained to zero
    /// and the residual asserted against the configured tolerance.
    pub fn solve(&self, data: &ProblemData) -> Result<FlowField, NeumannError> {
        data.validate(&self.mesh)?;
        let rhs = self.rhs(data);
        let (x, _lam, rel) = self.sys.solve(&rhs, &[0.0; D])?;
        let mesh = MeshHandle::Domain(self.mesh.clone());
        let mut u = GridFunction::from_values(
            SpaceTag::VelocityQ2,
            mesh.clone(),
            x[..self.nu].to_vec(),
        )
        .expect("sized by construction");
        let p = GridFunction::from_values(SpaceTag::PressureP1, mesh, x[self.nu..].to_vec())
            .expect("sized by construction");
        // remove the residual mean so the gauge holds to 1e-12 exactly
        let mu = mean(&u);
        for node in 0..u.num_nodes() {
            for c in 0..D {
                u.values[node * D + c] -= mu[c];
            }
        }
        let pmean = mean(&p)[0];
        let u_h2 = h2_surrogate(&u);
        Ok(FlowField {
            u,
            p,
            gauge: Gauge { velocity_mean_removed: [mu[0], mu[1]], pressure_mean: pmean },
            solver_residual: rel,
            u_h2,
        })
    }
}

/// Solve with a general spatial coefficient (constant or sampled).
pub fn solve_neumann(
    coeff: &SpatialCoeff,
    data: &ProblemData,
    mesh: &Arc<DomainMesh>,
    tol: f64,
) -> Result<FlowField, NeumannError> {
    NeumannOp::assemble(coeff, mesh, tol)?.solve(data)
}

/// Solve the oscillating problem with coefficient A(x/eps). The mesh must
/// resolve the oscillation: h <= eps/8.
pub fn solve_oscillating(
    a: &CoefficientField,
    eps: f64,
    data: &ProblemData,
    mesh: &Arc<DomainMesh>,
    tol: f64,
) -> Result<FlowField, NeumannError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(NeumannError::BadEps(eps));
    }
    if mesh.h() > eps / 8.0 + 1e-14 {
        return Err(NeumannError::UnderResolved { eps, h: mesh.h() });
    }
    let coeff = SpatialCoeff::Oscillating { field: a.clone(), eps };
    solve_neumann(&coeff, data, mesh, tol)
}

/// Solve the homogenized problem with the constant effective tensor.
pub fn solve_homogenized(
    ahat: &crate::cell::EffectiveTensor,
    data: &ProblemData,
    mesh: &Arc<DomainMesh>,
    tol: f64,
) -> Result<FlowField, NeumannError> {
    solve_neumann(&SpatialCoeff::Constant(ahat.a_hat), data, mesh, tol)
}

/// Solve the adjoint Neumann problem with coefficient A*(x/eps), body force
/// H - mean(H), zero divergence datum and homogeneous conormal condition.
pub fn solve_adjoint(
    a: &CoefficientField,
    eps: f64,
    h_field: &VecClosure,
    mesh: &Arc<DomainMesh>,
    tol: f64,
) -> Result<FlowField, NeumannError> {
    let mh = MeshHandle::Domain(mesh.clone());
    let mut hm = [0.0f64; 2];
    let mut area = 0.0;
    grid::for_each_qp(&mh, |_e, _q, x, w| {
        let v = h_field(x);
        hm[0] += w * v[0];
        hm[1] += w * v[1];
        area += w;
    });
    hm[0] /= area;
    hm[1] /= area;
    let hf = h_field.clone();
    let data = ProblemData {
        body: Arc::new(move |x| {
            let v = hf(x);
            [v[0] - hm[0], v[1] - hm[1]]
        }),
        div_datum: Arc::new(|_| 0.0),
        traction: Arc::new(|_, _| [0.0, 0.0]),
    };
    let astar = a.adjoint();
    solve_oscillating(&astar, eps, &data, mesh, tol)
}

/// A manufactured smooth solution (u*, p*) with the derivatives needed to
/// generate matching problem data.
#[derive(Clone)]
pub struct Manufactured {
    pub u: VecClosure,
    /// grad_u(x)[c][k] = d u_c / d x_k.
    pub grad_u: Arc<dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync>,
    /// hess_u(x)[c][k][j] = d^2 u_c / (d x_k d x_j).
    pub hess_u: Arc<dyn Fn([f64; 2]) -> [[[f64; 2]; 2]; 2] + Send + Sync>,
    pub p: ScalarClosure,
    pub grad_p: VecClosure,
}

impl Manufactured {
    /// u* = (sin(pi x2), sin(pi x1)), p* = cos(pi x1): divergence-free
    /// velocity with a nonconstant pressure.
    pub fn trig_pair() -> Self {
        use std::f64::consts::PI;
        Manufactured {
            u: Arc::new(|x| [(PI * x[1]).sin(), (PI * x[0]).sin()]),
            grad_u: Arc::new(|x| {
                [
                    [0.0, PI * (PI * x[1]).cos()],
                    [PI * (PI * x[0]).cos(), 0.0],
                ]
            }),
            hess_u: Arc::new(|x| {
                [
                    [[0.0, 0.0], [0.0, -PI * PI * (PI * x[1]).sin()]],
                    [[-PI * PI * (PI * x[0]).sin(), 0.0], [0.0, 0.0]],
                ]
            }),
            p: Arc::new(|x| (PI * x[0]).cos()),
            grad_p: Arc::new(|x| [-PI * (PI * x[0]).sin(), 0.0]),
        }
    }

    /// A constant velocity with zero pressure (all data vanish).
    pub fn constant(u0: [f64; 2]) -> Self {
        Manufactured {
            u: Arc::new(move |_| u0),
            grad_u: Arc::new(|_| [[0.0; 2]; 2]),
            hess_u: Arc::new(|_| [[[0.0; 2]; 2]; 2]),
            p: Arc::new(|_| 0.0),
            grad_p: Arc::new(|_| [0.0, 0.0]),
        }
    }

    /// A velocity with nonzero divergence, exercising the g datum.
    pub fn with_divergence() -> Self {
        use std::f64::consts::PI;
        Manufactured {
            u: Arc::new(|x| {
                [
                    (PI * x[0]).sin() * (PI * x[1]).cos(),
                    (2.0 * PI * x[1]).sin(),
                ]
            }),
            grad_u: Arc::new(|x| {
                [
                    [
                        PI * (PI * x[0]).cos() * (PI * x[1]).cos(),
                        -PI * (PI * x[0]).sin() * (PI * x[1]).sin(),
                    ],
                    [0.0, 2.0 * PI * (2.0 * PI * x[1]).cos()],
                ]
            }),
            hess_u: Arc::new(|x| {
                let s0 = (PI * x[0]).sin();
                let c0 = (PI * x[0]).cos();
                let s1 = (PI * x[1]).sin();
                let c1 = (PI * x[1]).cos();
                [
                    [
                        [-PI * PI * s0 * c1, -PI * PI * c0 * s1],
                        [-PI * PI * c0 * s1, -PI * PI * s0 * c1],
                    ],
                    [
                        [0.0, 0.0],
                        [0.0, -4.0 * PI * PI * (2.0 * PI * x[1]).sin()],
                    ],
                ]
            }),
            p: Arc::new(|x| (PI * x[0]).cos() * (PI * x[1]).cos()),
            grad_p: Arc::new(|x| {
                [
                    -PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
                    -PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                ]
            }),
        }
    }
}

/// Generate problem data whose exact solution is the manufactured pair:
/// F = L_eps u* + grad p*, g = div u*, f = conormal(u*, p*). Requires a
/// coefficient family with an analytic gradient (constant families have a
/// zero gradient).
pub fn manufactured_problem(
    a: &CoefficientField,
    eps: f64,
    mf: &Manufactured,
) -> Result<ProblemData, NeumannError> {
    if !a.has_gradient() {
        return Err(NeumannError::NoGradient(a.family.clone()));
    }
    let af = a.clone();
    let mfb = mf.clone();
    let body: VecClosure = Arc::new(move |x| {
        let y = [x[0] / eps, x[1] / eps];
        let aa = af.at(y);
        let da = af.grad_at(y).expect("gradient checked at construction");
        let gu = (mfb.grad_u)(x);
        let hu = (mfb.hess_u)(x);
        let gp = (mfb.grad_p)(x);
        let mut out = [0.0; 2];
        for al in 0..D {
            let mut v = gp[al];
            for i in 0..D {
                for j in 0..D {
                    for be in 0..D {
                        // -(1/eps) dA/dy_i . grad u - A : hess u
                        v -= da[i].get(i, j, al, be) / eps * gu[be][j];
                        v -= aa.get(i, j, al, be) * hu[be][i][j];
                    }
                }
            }
            out[al] = v;
        }
        out
    });
    let mfg = mf.clone();
    let div_datum: ScalarClosure = Arc::new(move |x| {
        let gu = (mfg.grad_u)(x);
        gu[0][0] + gu[1][1]
    });
    let aft = a.clone();
    let mft = mf.clone();
    let traction: TractionClosure = Arc::new(move |x, n| {
        let aa = aft.at([x[0] / eps, x[1] / eps]);
        let gu = (mft.grad_u)(x);
        let pv = (mft.p)(x);
        let mut out = [0.0; 2];
        for al in 0..D {
            let mut v = -pv * n[al];
            for i in 0..D {
                for j in 0..D {
                    for be in 0..D {
                        v += n[i] * aa.get(i, j, al, be) * gu[be][j];
                    }
                }
            }
            out[al] = v;
        }
        out
    });
    Ok(ProblemData { body, div_datum, traction })
}

/// Error norms of a discrete solution against a manufactured pair. The
/// velocity is compared in the zero-mean gauge; the pressure directly (the
/// natural boundary condition pins its constant).
pub fn mms_errors(flow: &FlowField, mf: &Manufactured, mesh: &Arc<DomainMesh>) -> (f64, f64, f64) {
    let mh = MeshHandle::Domain(mesh.clone());
    // mean of the manufactured velocity (for the gauge shift)
    let mut mu = [0.0f64; 2];
    let mut area = 0.0;
    grid::for_each_qp(&mh, |_e, _q, x, w| {
        let v = (mf.u)(x);
        mu[0] += w * v[0];
        mu[1] += w * v[1];
        area += w;
    });
    mu[0] /= area;
    mu[1] /= area;

    let uev = ElemEval::new(&flow.u);
    let pev = ElemEval::new(&flow.p);
    let mut l2u = 0.0;
    let mut h1u = 0.0;
    let mut l2p = 0.0;
    grid::for_each_qp(&mh, |e, q, x, w| {
        let (uh, guh) = uev.value_grad_at(e, q);
        let us = (mf.u)(x);
        let gus = (mf.grad_u)(x);
        for c in 0..D {
            let dv = uh[c] - (us[c] - mu[c]);
            l2u += w * dv * dv;
            for k in 0..D {
                let dg = guh[c][k] - gus[c][k];
                h1u += w * dg * dg;
            }
        }
        let (ph, _) = pev.value_grad_at(e, q);
        let dp = ph[0] - (mf.p)(x);
        l2p += w * dp * dp;
    });
    (l2u.sqrt(), h1u.sqrt(), l2p.sqrt())
}

/// Convergence report of a manufactured-solution sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MmsReport {
    pub m_list: Vec<usize>,
    pub err_u_l2: Vec<f64>,
    pub err_u_h1: Vec<f64>,
    pub err_p_l2: Vec<f64>,
    pub order_u_l2: f64,
    pub order_u_h1: f64,
    pub order_p_l2: f64,
}

/// Run the manufactured-solution order study with a constant coefficient or
/// an eps-oscillating smooth family.
pub fn mms_convergence(
    a: &CoefficientField,
    eps: f64,
    mf: &Manufactured,
    m_list: &[usize],
    tol: f64,
) -> Result<MmsReport, NeumannError> {
    let mut eu = Vec::new();
    let mut gu = Vec::new();
    let mut ep = Vec::new();
    for &m in m_list {
        let mesh = DomainMesh::new(m, 0).expect("valid m");
        let data = manufactured_problem(a, eps, mf)?;
        let coeff = SpatialCoeff::Oscillating { field: a.clone(), eps };
        let flow = solve_neumann(&coeff, &data, &mesh, tol)?;
        let (l2u, h1u, l2p) = mms_errors(&flow, mf, &mesh);
        eu.push(l2u);
        gu.push(h1u);
        ep.push(l2p);
    }
    let fit = |errs: &[f64]| -> f64 {
        let pts: Vec<(f64, f64)> = m_list
            .iter()
            .zip(errs)
            .map(|(&m, &e)| (1.0 / m as f64, e))
            .collect();
        crate::rates::fit_slope(&pts).map(|f| f.slope).unwrap_or(f64::NAN)
    };
    Ok(MmsReport {
        m_list: m_list.to_vec(),
        order_u_l2: fit(&eu),
        order_u_h1: fit(&gu),
        order_p_l2: fit(&ep),
        err_u_l2: eu,
        err_u_h1: gu,
        err_p_l2: ep,
    })
}

/// L2 difference of two velocity fields living on the same mesh.
pub fn velocity_l2_diff(a: &FlowField, b: &FlowField) -> f64 {
    let mut diff = a.u.clone();
    for (v, w) in diff.values.iter_mut().zip(&b.u.values) {
        *v -= w;
    }
    grid::l2_norm(&diff)
}

/// L2 difference of the mean-subtracted pressures.
pub fn pressure_l2_diff(a: &FlowField, b: &FlowField) -> f64 {
    let pa = subtract_mean(&a.p);
    let pb = subtract_mean(&b.p);
    let mut diff = pa;
    for (v, w) in diff.values.iter_mut().zip(&pb.values) {
        *v -= w;
    }
    grid::l2_norm(&diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::builtin_family;

    fn classical_coeff() -> SpatialCoeff {
        SpatialCoeff::Constant(Tensor4::isotropic(1.0))
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mesh = DomainMesh::new(8, 0).unwrap();
        let flow = solve_neumann(&classical_coeff(), &ProblemData::zero(), &mesh, 1e-10).unwrap();
        assert!(grid::l2_norm(&flow.u) < 1e-11);
        assert!(grid::l2_norm(&subtract_mean(&flow.p)) < 1e-10);
        assert!(flow.solver_residual < 1e-10);
    }

    #[test]
    fn velocity_gauge_is_enforced() {
        let a = builtin_family("classical", &[1.0]).unwrap();
        let mf = Manufactured::trig_pair();
        let data = manufactured_problem(&a, 1.0, &mf).unwrap();
        let mesh = DomainMesh::new(8, 0).unwrap();
        let flow = solve_neumann(&classical_coeff(), &data, &mesh, 1e-10).unwrap();
        let mu = mean(&flow.u);
        assert!(mu[0].abs() < 1e-12 && mu[1].abs() < 1e-12, "{mu:?}");
    }

    #[test]
    fn manufactured_data_is_compatible() {
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let mf = Manufactured::with_divergence();
        let data = manufactured_problem(&a, 0.25, &mf).unwrap();
        let mesh = DomainMesh::new(16, 0).unwrap();
        let (defect, scale) = data.compatibility_defect(&mesh);
        assert!(defect < 1e-10 * scale.max(1.0), "defect {defect}");
    }

    #[test]
    fn manufactured_body_force_matches_spec_example() {
        // classical(1), u* = (sin pi x2, sin pi x1), p* = cos pi x1:
        // F = (pi^2 sin(pi x2) - pi sin(pi x1), pi^2 sin(pi x1)).
        use std::f64::consts::PI;
        let a = builtin_family("classical", &[1.0]).unwrap();
        let mf = Manufactured::trig_pair();
        let data = manufactured_problem(&a, 1.0, &mf).unwrap();
        for &x in &[[0.3, 0.7], [0.1, 0.9], [0.55, 0.25]] {
            let f = (data.body)(x);
            let expect = [
                PI * PI * (PI * x[1]).sin() - PI * (PI * x[0]).sin(),
                PI * PI * (PI * x[0]).sin(),
            ];
            assert!((f[0] - expect[0]).abs() < 1e-12, "{f:?} vs {expect:?}");
            assert!((f[1] - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn manufactured_force_matches_finite_differences() {
        // trig family at eps = 1/4: the analytic F agrees with a central
        // difference of the flux divergence.
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let eps = 0.25;
        let mf = Manufactured::trig_pair();
        let data = manufactured_problem(&a, eps, &mf).unwrap();
        let x = [0.312, 0.577];
        // flux_i^al(x) = a_{ij}^{al be}(x/eps) d_j u*_be(x)
        let flux = |x: [f64; 2], i: usize, al: usize| -> f64 {
            let aa = a.at([x[0] / eps, x[1] / eps]);
            let gu = (mf.grad_u)(x);
            let mut s = 0.0;
            for j in 0..D {
                for be in 0..D {
                    s += aa.get(i, j, al, be) * gu[be][j];
                }
            }
            s
        };
        let h = 1e-5;
        let f = (data.body)(x);
        for al in 0..D {
            let mut divflux = 0.0;
            for i in 0..D {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                divflux += (flux(xp, i, al) - flux(xm, i, al)) / (2.0 * h);
            }
            let gp = (mf.grad_p)(x);
            let expect = -divflux + gp[al];
            assert!(
                (f[al] - expect).abs() < 1e-5,
                "component {al}: {} vs {expect}",
                f[al]
            );
        }
    }

    #[test]
    fn constant_manufactured_solution_gives_zero_data() {
        let a = builtin_family("classical", &[1.0]).unwrap();
        let mf = Manufactured::constant([1.0, -2.0]);
        let data = manufactured_problem(&a, 1.0, &mf).unwrap();
        for &x in &[[0.2, 0.4], [0.8, 0.1]] {
            assert_eq!((data.body)(x), [0.0, 0.0]);
            assert_eq!((data.div_datum)(x), 0.0);
            assert_eq!((data.traction)(x, [1.0, 0.0]), [0.0, 0.0]);
        }
    }

    #[test]
    fn families_without_gradient_are_rejected() {
        let a = builtin_family("checkerboard", &[1.0, 9.0]).unwrap();
        assert!(matches!(
            manufactured_problem(&a, 0.5, &Manufactured::trig_pair()),
            Err(NeumannError::NoGradient(_))
        ));
    }

    #[test]
    fn under_resolved_mesh_is_an_error() {
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let mesh = DomainMesh::new(8, 0).unwrap();
        let err = solve_oscillating(&a, 0.125, &ProblemData::zero(), &mesh, 1e-10);
        assert!(matches!(err, Err(NeumannError::UnderResolved { .. })));
        let err = solve_oscillating(&a, 1.5, &ProblemData::zero(), &mesh, 1e-10);
        assert!(matches!(err, Err(NeumannError::BadEps(_))));
    }

    #[test]
    fn incompatible_data_is_rejected() {
        let mesh = DomainMesh::new(8, 0).unwrap();
        let data = ProblemData {
            body: Arc::new(|_| [1.0, 0.0]),
            div_datum: Arc::new(|_| 0.0),
            traction: Arc::new(|_, _| [0.0, 0.0]),
        };
        assert!(matches!(
            solve_neumann(&classical_coeff(), &data, &mesh, 1e-10),
            Err(NeumannError::Incompatible { .. })
        ));
    }

    #[test]
    fn mms_converges_on_constant_coefficients() {
        let a = builtin_family("classical", &[1.0]).unwrap();
        let mf = Manufactured::trig_pair();
        let rep = mms_convergence(&a, 1.0, &mf, &[8, 16, 32], 1e-10).unwrap();
        assert!(
            (rep.order_u_h1 - 2.0).abs() < 0.25,
            "H1 order {}",
            rep.order_u_h1
        );
        assert!(
            (rep.order_u_l2 - 3.0).abs() < 0.35,
            "L2 order {}",
            rep.order_u_l2
        );
        assert!(
            (rep.order_p_l2 - 2.0).abs() < 0.35,
            "p order {}",
            rep.order_p_l2
        );
    }

    #[test]
    fn adjoint_solve_with_constant_h_is_zero() {
        let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
        let mesh = DomainMesh::new(16, 0).unwrap();
        let h: VecClosure = Arc::new(|_| [3.0, -1.0]);
        let flow = solve_adjoint(&a, 0.25, &h, &mesh, 1e-10).unwrap();
        assert!(grid::l2_norm(&flow.u) < 1e-10);
    }

    #[test]
    fn oscillating_eps_one_equals_constant_solve() {
        // constant family at any eps coincides with the constant solve
        let a = builtin_family("constant", &[2.0]).unwrap();
        let mf = Manufactured::trig_pair();
        let data = manufactured_problem(&a, 1.0, &mf).unwrap();
        let mesh = DomainMesh::new(8, 0).unwrap();
        let f1 = solve_oscillating(&a, 1.0, &data, &mesh, 1e-10).unwrap();
        let f2 = solve_neumann(
            &SpatialCoeff::Constant(a.at([0.0, 0.0])),
            &data,
            &mesh,
            1e-10,
        )
        .unwrap();
        assert!(velocity_l2_diff(&f1, &f2) < 1e-12);
    }
}
