//! Steklov smoothing, reflection extension, eps-periodic sampling and the
//! two-scale expansion residuals.
//!
//! The Steklov operator averages a field over the shifted cube
//! (S_eps u)(x) = avg_{z in [0,1)^2} u(x - eps z), realized by a composite
//! midpoint rule with subcells no larger than the mesh spacing. It acts on
//! anything point-evaluable: reflection-extended discrete fields, raw grid
//! functions, or closures.

use crate::cell::Corrector;
use crate::grid::{
    self, DomainMesh, ElemEval, GridFunction, MeshHandle, QuadField, SpaceTag, D,
};
use crate::neumann::FlowField;
use crate::quad::{self, NQ};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TwoScaleError {
    #[error("mesh padding {have:.4} is insufficient, need at least {need:.4}")]
    InsufficientPad { have: f64, need: f64 },
    #[error("fields live on different meshes")]
    MeshMismatch,
    #[error("velocity gauge not applied (|mean| = {0:.3e})")]
    GaugeMissing(f64),
}

/// Anything that can be point-sampled on (a neighborhood of) the closed
/// unit square.
pub trait SampleField: Sync {
    fn ncomp(&self) -> usize;
    fn eval_into(&self, x: [f64; 2], out: &mut [f64]);
}

/// A closure-backed sample field (used by tests and data generators).
pub struct ClosureField<F: Fn([f64; 2]) -> Vec<f64> + Sync> {
    pub ncomp: usize,
    pub f: F,
}

impl<F: Fn([f64; 2]) -> Vec<f64> + Sync> SampleField for ClosureField<F> {
    fn ncomp(&self) -> usize {
        self.ncomp
    }

    fn eval_into(&self, x: [f64; 2], out: &mut [f64]) {
        let v = (self.f)(x);
        out[..self.ncomp].copy_from_slice(&v[..self.ncomp]);
    }
}

impl SampleField for GridFunction {
    fn ncomp(&self) -> usize {
        GridFunction::ncomp(self)
    }

    fn eval_into(&self, x: [f64; 2], out: &mut [f64]) {
        GridFunction::eval_into(self, x, out)
    }
}

/// Fold a coordinate into [0, 1] by even reflection; returns the folded
/// value and the sign of the derivative chain factor.
#[inline]
fn fold(t: f64) -> (f64, f64) {
    let s = t - 2.0 * (t / 2.0).floor();
    if s <= 1.0 {
        (s, 1.0)
    } else {
        (2.0 - s, -1.0)
    }
}

/// Even-reflection extension of a domain grid function across each edge of
/// the square (and corners by composition): linear in the base field and
/// exactly equal to it inside the square.
pub struct ExtendedField {
    pub base: GridFunction,
    pub mesh: Arc<DomainMesh>,
    pub pad_width: f64,
    /// Ratio of the broken-H2 surrogate norm on the padded region to the
    /// one on the square (logged per call; bounded by the number of
    /// reflected copies).
    pub h2_ratio: f64,
}

/// Build the reflection extension of `u0` using the mesh's padding band.
pub fn extend(u0: &GridFunction, mesh: &Arc<DomainMesh>) -> Result<ExtendedField, TwoScaleError> {
    if mesh.pad == 0 {
        return Err(TwoScaleError::InsufficientPad { have: 0.0, need: mesh.h() });
    }
    let base = u0.clone();
    let pad_width = mesh.pad_len();
    // H2 surrogate over the padded region by quadrature on the padded tiling
    let t = quad::tables();
    let h = mesh.h();
    let jac = h * h;
    let p = mesh.pad as i64;
    let m = mesh.m as i64;
    let ncomp = base.ncomp();
    let mut acc = 0.0;
    for ey in -p..(m + p) {
        for ex in -p..(m + p) {
            for q in 0..NQ {
                let x = [
                    (ex as f64 + t.pts[q][0]) * h,
                    (ey as f64 + t.pts[q][1]) * h,
                ];
                let w = t.w[q] * jac;
                let (val, grad, hess) = eval_reflected(&base, x);
                for c in 0..ncomp {
                    acc += w * (val[c] * val[c]);
                    acc += w * (grad[c][0] * grad[c][0] + grad[c][1] * grad[c][1]);
                    acc += w
                        * (hess[c][0] * hess[c][0]
                            + 2.0 * hess[c][1] * hess[c][1]
                            + hess[c][2] * hess[c][2]);
                }
            }
        }
    }
    let h2_base = grid::h2_surrogate(&base).max(f64::MIN_POSITIVE);
    let h2_ratio = acc.sqrt() / h2_base;
    Ok(ExtendedField { base, mesh: mesh.clone(), pad_width, h2_ratio })
}

fn eval_reflected(base: &GridFunction, x: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>, Vec<[f64; 3]>) {
    let (r0, s0) = fold(x[0]);
    let (r1, s1) = fold(x[1]);
    let r = [r0, r1];
    let val = base.eval(r);
    let mut grad = base.eval_grad(r);
    let mut hess = base.eval_hess(r);
    for c in 0..grad.len() {
        grad[c][0] *= s0;
        grad[c][1] *= s1;
        hess[c][1] *= s0 * s1;
    }
    (val, grad, hess)
}

impl ExtendedField {
    pub fn eval(&self, x: [f64; 2]) -> Vec<f64> {
        let (r0, _) = fold(x[0]);
        let (r1, _) = fold(x[1]);
        self.base.eval([r0, r1])
    }

    /// Gradient of the reflected field (signs follow the fold).
    pub fn eval_grad(&self, x: [f64; 2]) -> Vec<[f64; 2]> {
        let (r0, s0) = fold(x[0]);
        let (r1, s1) = fold(x[1]);
        let mut g = self.base.eval_grad([r0, r1]);
        for c in g.iter_mut() {
            c[0] *= s0;
            c[1] *= s1;
        }
        g
    }

    /// Value, gradient and element-wise Hessian in one evaluation.
    pub fn eval_all(&self, x: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>, Vec<[f64; 3]>) {
        eval_reflected(&self.base, x)
    }

    /// Nodal values on the padded lattice (pad extra cells per side), row
    /// major over ((2(m+2 pad)+1))^2 Q2 nodes; used for dumps and tests.
    pub fn padded_values(&self) -> (usize, Vec<f64>) {
        let m = self.mesh.m;
        let p = self.mesh.pad;
        let na = 2 * (m + 2 * p) + 1;
        let ncomp = self.base.ncomp();
        let mut vals = vec![0.0; na * na * ncomp];
        let step = 0.5 * self.mesh.h();
        for j in 0..na {
            for i in 0..na {
                let x = [
                    -(p as f64) * self.mesh.h() + i as f64 * step,
                    -(p as f64) * self.mesh.h() + j as f64 * step,
                ];
                let v = self.eval(x);
                for c in 0..ncomp {
                    vals[(j * na + i) * ncomp + c] = v[c];
                }
            }
        }
        (na, vals)
    }
}

impl SampleField for ExtendedField {
    fn ncomp(&self) -> usize {
        self.base.ncomp()
    }

    fn eval_into(&self, x: [f64; 2], out: &mut [f64]) {
        let (r0, _) = fold(x[0]);
        let (r1, _) = fold(x[1]);
        self.base.eval_into([r0, r1], out);
    }
}

/// Number of midpoint subcells per axis so the subcell is no larger than
/// the mesh spacing.
fn steklov_subcells(eps: f64, h: f64) -> usize {
    ((eps / h - 1e-12).ceil() as usize).max(1)
}

/// Apply the Steklov average pointwise: (S_eps u)(x) = avg over the cube
/// [x - eps, x]^2 by the composite midpoint rule.
pub fn steklov_at(src: &dyn SampleField, eps: f64, s: usize, x: [f64; 2], out: &mut [f64]) {
    let nc = src.ncomp();
    out[..nc].fill(0.0);
    let mut buf = vec![0.0; nc];
    let step = eps / s as f64;
    for kz in 0..s {
        for kx in 0..s {
            let p = [
                x[0] - (kx as f64 + 0.5) * step,
                x[1] - (kz as f64 + 0.5) * step,
            ];
            src.eval_into(p, &mut buf);
            for c in 0..nc {
                out[c] += buf[c];
            }
        }
    }
    let inv = 1.0 / (s * s) as f64;
    for c in out[..nc].iter_mut() {
        *c *= inv;
    }
}

/// Steklov smoothing of a sampleable field, returned as a nodal grid
/// function on the domain mesh. Requires padding at least eps when the
/// source is an extended field.
pub fn steklov(
    src: &dyn SampleField,
    eps: f64,
    mesh: &Arc<DomainMesh>,
) -> Result<GridFunction, TwoScaleError> {
    let ncomp = src.ncomp();
    let tag = if ncomp == D { SpaceTag::VelocityQ2 } else { SpaceTag::ScalarQ2 };
    let s = steklov_subcells(eps, mesh.h());
    let mut out = GridFunction::zeros(tag, MeshHandle::Domain(mesh.clone()));
    let nn = out.num_nodes();
    let mut buf = vec![0.0; ncomp];
    for node in 0..nn {
        let x = out.node_coord(node);
        steklov_at(src, eps, s, x, &mut buf);
        for c in 0..ncomp {
            out.values[node * ncomp + c] = buf[c];
        }
    }
    Ok(out)
}

/// Check the Steklov padding precondition for an extended field.
pub fn require_padding(ext: &ExtendedField, eps: f64) -> Result<(), TwoScaleError> {
    if ext.pad_width + 1e-14 < eps {
        return Err(TwoScaleError::InsufficientPad { have: ext.pad_width, need: eps });
    }
    Ok(())
}

/// Sample a 1-periodic cell function at x/eps on the domain mesh nodes:
/// f^eps(x) = f(frac(x/eps)).
pub fn sample_periodic(
    f: &GridFunction,
    eps: f64,
    mesh: &Arc<DomainMesh>,
) -> GridFunction {
    let ncomp = f.ncomp();
    let tag = if ncomp == D { SpaceTag::VelocityQ2 } else { SpaceTag::ScalarQ2 };
    let mut out = GridFunction::zeros(tag, MeshHandle::Domain(mesh.clone()));
    let nn = out.num_nodes();
    let mut buf = vec![0.0; ncomp];
    for node in 0..nn {
        let x = out.node_coord(node);
        f.eval_into([x[0] / eps, x[1] / eps], &mut buf);
        for c in 0..ncomp {
            out.values[node * ncomp + c] = buf[c];
        }
    }
    out
}

/// Two-scale expansion residual fields on the quadrature points of the
/// shared mesh, plus a nodal representation of the velocity residual.
pub struct ResidualFields {
    pub mesh: Arc<DomainMesh>,
    pub eps: f64,
    /// v = u_eps - u_0 - eps chi^eps S_eps(grad u0~), nodal.
    pub v_nodal: GridFunction,
    /// v at quadrature points (2 components).
    pub v: QuadField,
    /// grad v at quadrature points (4 components, [alpha*2 + k]).
    pub grad_v: QuadField,
    /// Pressure expansion residual at quadrature points.
    pub p_res: QuadField,
    /// Two-scale divergence of v: with div u_eps = div u_0 and div_y chi = 0
    /// applied as identities, div v = -eps chi_j^{ab, eps} S_eps d_a d_j u0~^b.
    pub div_v: QuadField,
}

impl ResidualFields {
    pub fn v_l2(&self) -> f64 {
        self.v.l2_norm()
    }

    pub fn v_h1(&self) -> f64 {
        let a = self.v.l2_norm();
        let b = self.grad_v.l2_norm();
        (a * a + b * b).sqrt()
    }

    pub fn v_h1_seminorm(&self) -> f64 {
        self.grad_v.l2_norm()
    }

    pub fn p_res_l2(&self) -> f64 {
        self.p_res.l2_norm()
    }

    pub fn div_v_l2(&self) -> f64 {
        self.div_v.l2_norm()
    }
}

/// Assemble the two-scale residual fields for a solved pair (u_eps, u_0).
/// Velocities must be in the zero-mean gauge; pressures are mean-subtracted
/// internally.
pub fn assemble_residuals(
    ue: &FlowField,
    u0: &FlowField,
    c: &Corrector,
    eps: f64,
    mesh: &Arc<DomainMesh>,
) -> Result<ResidualFields, TwoScaleError> {
    if !ue.u.mesh.same_as(&u0.u.mesh) || !ue.u.mesh.same_as(&MeshHandle::Domain(mesh.clone())) {
        return Err(TwoScaleError::MeshMismatch);
    }
    for f in [&ue.u, &u0.u] {
        let mu = grid::mean(f);
        let m = mu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 1e-8 {
            return Err(TwoScaleError::GaugeMissing(m));
        }
    }
    let ext = extend(&u0.u, mesh)?;
    require_padding(&ext, eps)?;
    let s = steklov_subcells(eps, mesh.h());
    let mh = MeshHandle::Domain(mesh.clone());

    let p_e_mean = grid::mean(&ue.p)[0];
    let p_0_mean = grid::mean(&u0.p)[0];

    let ue_ev = ElemEval::new(&ue.u);
    let u0_ev = ElemEval::new(&u0.u);
    let pe_ev = ElemEval::new(&ue.p);
    let p0_ev = ElemEval::new(&u0.p);

    let mut v = QuadField::zeros(mh.clone(), 2);
    let mut grad_v = QuadField::zeros(mh.clone(), 4);
    let mut p_res = QuadField::zeros(mh.clone(), 1);
    let mut div_v = QuadField::zeros(mh.clone(), 1);
    // first pass stores the raw pi^eps S_eps(grad u0~) contraction so its
    // mean can be subtracted afterwards
    let mut pi_term = QuadField::zeros(mh.clone(), 1);

    grid::for_each_qp(&mh, |e, q, x, _w| {
        let y = [x[0] / eps, x[1] / eps];
        // S_eps of grad and hess of the extension, one midpoint sweep
        let (sg, sh) = steklov_grad_hess(&ext, eps, s, x);
        let (uev, ueg) = ue_ev.value_grad_at(e, q);
        let (u0v, u0g) = u0_ev.value_grad_at(e, q);

        let vi = v.idx(e, q);
        let gi = grad_v.idx(e, q);
        let di = div_v.idx(e, q);
        let pi = pi_term.idx(e, q);

        let mut vloc = [0.0f64; 2];
        let mut gloc = [[0.0f64; 2]; 2];
        let mut divloc = 0.0f64;
        let mut piloc = 0.0f64;
        for j in 0..D {
            for be in 0..D {
                let chi = c.chi[j][be].eval(y);
                let gchi = c.chi[j][be].eval_grad(y);
                let pival = c.pi[j][be].eval(y)[0];
                let sgrad = sg[be][j];
                for al in 0..D {
                    vloc[al] += eps * chi[al] * sgrad;
                    for k in 0..D {
                        gloc[al][k] +=
                            gchi[al][k] * sgrad + eps * chi[al] * sh[be][hess_idx(k, j)];
                    }
                    // div identity: div u_eps = div u_0 and div_y chi = 0 as
                    // identities leave -eps chi_j^{ab} S(d_a d_j u0~^b)
                    divloc += eps * chi[al] * sh[be][hess_idx(al, j)];
                }
                piloc += pival * sgrad;
            }
        }
        for al in 0..D {
            v.values[vi + al] = uev[al] - u0v[al] - vloc[al];
            for k in 0..D {
                grad_v.values[gi + al * 2 + k] = ueg[al][k] - u0g[al][k] - gloc[al][k];
            }
        }
        div_v.values[di] = -divloc;
        pi_term.values[pi] = piloc;

        let (pev, _) = pe_ev.value_grad_at(e, q);
        let (p0v, _) = p0_ev.value_grad_at(e, q);
        let pri = p_res.idx(e, q);
        p_res.values[pri] = (pev[0] - p_e_mean) - (p0v[0] - p_0_mean);
    });

    // subtract the mean of the pressure contraction term
    let pim = pi_term.mean()[0];
    for e in 0..mesh.num_elems() {
        for q in 0..NQ {
            let i = p_res.idx(e, q);
            p_res.values[i] -= pi_term.values[pi_term.idx(e, q)] - pim;
        }
    }

    // nodal velocity residual (for duality pairings and dumps)
    let mut v_nodal = GridFunction::zeros(SpaceTag::VelocityQ2, mh);
    let nn = v_nodal.num_nodes();
    for node in 0..nn {
        let x = v_nodal.node_coord(node);
        let y = [x[0] / eps, x[1] / eps];
        let (sg, _) = steklov_grad_hess(&ext, eps, s, x);
        let uev = ue.u.eval(x);
        let u0v = u0.u.eval(x);
        let mut corr = [0.0f64; 2];
        for j in 0..D {
            for be in 0..D {
                let chi = c.chi[j][be].eval(y);
                for al in 0..D {
                    corr[al] += eps * chi[al] * sg[be][j];
                }
            }
        }
        for al in 0..D {
            v_nodal.values[node * D + al] = uev[al] - u0v[al] - corr[al];
        }
    }

    Ok(ResidualFields { mesh: mesh.clone(), eps, v_nodal, v, grad_v, p_res, div_v })
}

#[inline]
fn hess_idx(k: usize, j: usize) -> usize {
    // symmetric [xx, xy, yy] storage
    k + j
}

/// S_eps applied to the gradient and Hessian of an extended field at one
/// point: returns (sg[c][k], sh[c][xx|xy|yy]).
pub fn steklov_grad_hess(
    ext: &ExtendedField,
    eps: f64,
    s: usize,
    x: [f64; 2],
) -> ([[f64; 2]; D], [[f64; 3]; D]) {
    let step = eps / s as f64;
    let mut sg = [[0.0f64; 2]; D];
    let mut sh = [[0.0f64; 3]; D];
    for kz in 0..s {
        for kx in 0..s {
            let p = [
                x[0] - (kx as f64 + 0.5) * step,
                x[1] - (kz as f64 + 0.5) * step,
            ];
            let (_, g, hh) = ext.eval_all(p);
            for c in 0..D {
                sg[c][0] += g[c][0];
                sg[c][1] += g[c][1];
                sh[c][0] += hh[c][0];
                sh[c][1] += hh[c][1];
                sh[c][2] += hh[c][2];
            }
        }
    }
    let inv = 1.0 / (s * s) as f64;
    for c in 0..D {
        for k in 0..2 {
            sg[c][k] *= inv;
        }
        for k in 0..3 {
            sh[c][k] *= inv;
        }
    }
    (sg, sh)
}

/// Measured constant of the Steklov difference estimate:
/// ||S_eps u - u||_{L2(Omega)} / (eps ||grad u||_{L2(Omega)}).
pub fn steklov_difference_ratio(
    u: &dyn SampleField,
    grad_u: &dyn Fn([f64; 2]) -> Vec<[f64; 2]>,
    eps: f64,
    mesh: &Arc<DomainMesh>,
) -> f64 {
    let s = steklov_subcells(eps, mesh.h());
    let nc = u.ncomp();
    let mh = MeshHandle::Domain(mesh.clone());
    let mut num = 0.0;
    let mut den = 0.0;
    let mut su = vec![0.0; nc];
    let mut uv = vec![0.0; nc];
    grid::for_each_qp(&mh, |_e, _q, x, w| {
        steklov_at(u, eps, s, x, &mut su);
        u.eval_into(x, &mut uv);
        let g = grad_u(x);
        for c in 0..nc {
            let d = su[c] - uv[c];
            num += w * d * d;
            den += w * (g[c][0] * g[c][0] + g[c][1] * g[c][1]);
        }
    });
    num.sqrt() / (eps * den.sqrt())
}

/// Both sides of the periodic-product estimate
/// ||f^eps S_eps u||_{L2(Omega)} <= ||f||_{L2(Y)} ||u||_{L2(Omega + pad)}.
pub fn periodic_product_bound(
    f_cell: &GridFunction,
    u: &dyn SampleField,
    eps: f64,
    mesh: &Arc<DomainMesh>,
) -> (f64, f64) {
    let s = steklov_subcells(eps, mesh.h());
    let mh = MeshHandle::Domain(mesh.clone());
    let nc = u.ncomp();
    let mut su = vec![0.0; nc];
    let mut lhs = 0.0;
    grid::for_each_qp(&mh, |_e, _q, x, w| {
        steklov_at(u, eps, s, x, &mut su);
        let fv = f_cell.eval([x[0] / eps, x[1] / eps])[0];
        for c in 0..nc {
            lhs += w * fv * fv * su[c] * su[c];
        }
    });
    let f_l2 = grid::l2_norm(f_cell);
    // ||u|| over the sampled region [-eps, 1]^2, padded out to whole cells
    let t = quad::tables();
    let h = mesh.h();
    let jac = h * h;
    let p = ((eps / h - 1e-12).ceil() as i64).max(0);
    let m = mesh.m as i64;
    let mut un = 0.0;
    let mut uv = vec![0.0; nc];
    for ey in -p..m {
        for ex in -p..m {
            for q in 0..NQ {
                let x = [
                    (ex as f64 + t.pts[q][0]) * h,
                    (ey as f64 + t.pts[q][1]) * h,
                ];
                let w = t.w[q] * jac;
                u.eval_into(x, &mut uv);
                for c in 0..nc {
                    un += w * uv[c] * uv[c];
                }
            }
        }
    }
    (lhs.sqrt(), f_l2 * un.sqrt())
}

/// Signed-distance-free distance to the boundary of the unit square, valid
/// inside and outside.
fn dist_to_square(x: [f64; 2]) -> f64 {
    let dx = (-x[0]).max(x[0] - 1.0).max(0.0);
    let dy = (-x[1]).max(x[1] - 1.0).max(0.0);
    if dx > 0.0 || dy > 0.0 {
        (dx * dx + dy * dy).sqrt()
    } else {
        DomainMesh::dist_to_boundary(x)
    }
}

/// Boundary-layer product integral of the near-boundary lemma:
/// (int_{(dOmega)_{2 eps}} |f^eps|^2 |S_eps u|^2)^{1/2} / sqrt(eps),
/// integrated over the two-sided strip using the padded tiling.
pub fn boundary_strip_product_ratio(
    f_cell: &GridFunction,
    u: &dyn SampleField,
    eps: f64,
    mesh: &Arc<DomainMesh>,
) -> f64 {
    let s = steklov_subcells(eps, mesh.h());
    let t = quad::tables();
    let h = mesh.h();
    let jac = h * h;
    let strip = 2.0 * eps;
    let p = ((strip / h).ceil() as i64).max(1);
    let m = mesh.m as i64;
    let nc = u.ncomp();
    let mut su = vec![0.0; nc];
    let mut acc = 0.0;
    for ey in -p..(m + p) {
        for ex in -p..(m + p) {
            // skip interior tiles that cannot intersect the strip
            for q in 0..NQ {
                let x = [
                    (ex as f64 + t.pts[q][0]) * h,
                    (ey as f64 + t.pts[q][1]) * h,
                ];
                if dist_to_square(x) > strip {
                    continue;
                }
                let w = t.w[q] * jac;
                steklov_at(u, eps, s, x, &mut su);
                let fv = f_cell.eval([x[0] / eps, x[1] / eps])[0];
                for c in 0..nc {
                    acc += w * fv * fv * su[c] * su[c];
                }
            }
        }
    }
    acc.sqrt() / eps.sqrt()
}
