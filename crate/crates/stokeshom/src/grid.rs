//! Structured meshes, discrete spaces and norm computations.
//!
//! Two meshes cover everything in this crate: a periodic unit cell
//! `CellGrid` (the torus [0,1)^2) and a bounded square `DomainMesh` on
//! (0,1)^2. Both carry a continuous biquadratic velocity space and a
//! discontinuous element-wise linear pressure space (the inf-sup stable
//! Q2-P1disc pair, which represents element-aligned pressure jumps exactly)
//! on uniform quadrilaterals with a 3x3 Gauss rule per element.

use crate::quad::{self, NB2, NQ};
use std::sync::Arc;
use thiserror::Error;

/// Spatial dimension of the reference build. Index loops are written for
/// general d but the meshes and tests are d = 2.
pub const D: usize = 2;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cell grid subdivisions must be even and at least 4, got {0}")]
    BadCellResolution(usize),
    #[error("domain mesh subdivisions must be at least 2, got {0}")]
    BadDomainResolution(usize),
    #[error("function is attached to a different mesh")]
    MeshMismatch,
    #[error("strip radius {0} out of range (0, diam]")]
    StripRadius(f64),
    #[error("operation requires a bounded-domain function, got a cell function")]
    NotADomainFunction,
    #[error("value vector has length {got}, space needs {want}")]
    BadLength { got: usize, want: usize },
}

/// Discrete space tags. Velocity spaces hold `D` interleaved components.
/// Pressure spaces are discontinuous linear with 3 dofs per element
/// {1, x1 - 1/2, x2 - 1/2} in element-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    VelocityQ2,
    PressureP1,
    ScalarQ2,
    CellVelocityQ2,
    CellPressureP1,
    CellScalarQ2,
}

impl SpaceTag {
    pub fn ncomp(self) -> usize {
        match self {
            SpaceTag::VelocityQ2 | SpaceTag::CellVelocityQ2 => D,
            _ => 1,
        }
    }

    pub fn is_cell(self) -> bool {
        matches!(
            self,
            SpaceTag::CellVelocityQ2 | SpaceTag::CellPressureP1 | SpaceTag::CellScalarQ2
        )
    }

    pub fn is_pressure(self) -> bool {
        matches!(self, SpaceTag::PressureP1 | SpaceTag::CellPressureP1)
    }
}

/// Periodic unit-cell discretization: n x n quadrilaterals on the torus,
/// node (0, y2) identified with node (1, y2) per axis.
#[derive(Debug)]
pub struct CellGrid {
    pub n: usize,
    /// Gauss rule order per element axis (fixed 3x3).
    pub quad_order: usize,
}

impl CellGrid {
    pub fn new(n: usize) -> Result<Arc<Self>, GridError> {
        if n < 4 || n % 2 != 0 {
            return Err(GridError::BadCellResolution(n));
        }
        Ok(Arc::new(CellGrid { n, quad_order: 3 }))
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Q2 nodes per axis (periodic, so no duplicated seam).
    pub fn q2_per_axis(&self) -> usize {
        2 * self.n
    }

    pub fn num_q2(&self) -> usize {
        self.q2_per_axis() * self.q2_per_axis()
    }

    pub fn num_elems(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn q2_node(&self, i: usize, j: usize) -> usize {
        let na = self.q2_per_axis();
        (j % na) * na + (i % na)
    }

    /// Global Q2 node ids of element (ex, ey), local order a + 3b.
    pub fn q2_elem_nodes(&self, ex: usize, ey: usize) -> [usize; NB2] {
        let mut out = [0usize; NB2];
        for b in 0..3 {
            for a in 0..3 {
                out[b * 3 + a] = self.q2_node(2 * ex + a, 2 * ey + b);
            }
        }
        out
    }

    pub fn q2_node_coord(&self, node: usize) -> [f64; 2] {
        let na = self.q2_per_axis();
        let i = node % na;
        let j = node / na;
        [i as f64 / na as f64, j as f64 / na as f64]
    }

    pub fn elem_center(&self, e: usize) -> [f64; 2] {
        let ex = e % self.n;
        let ey = e / self.n;
        [(ex as f64 + 0.5) * self.h(), (ey as f64 + 0.5) * self.h()]
    }

    /// Element containing the cell point `y` (reduced mod 1), with local
    /// reference coordinates.
    pub fn locate(&self, y: [f64; 2]) -> (usize, usize, [f64; 2]) {
        let n = self.n as f64;
        let fx = frac(y[0]) * n;
        let fy = frac(y[1]) * n;
        let ex = (fx.floor() as usize).min(self.n - 1);
        let ey = (fy.floor() as usize).min(self.n - 1);
        (ex, ey, [fx - ex as f64, fy - ey as f64])
    }
}

/// Reduce to the half-open unit interval [0, 1).
#[inline]
pub fn frac(t: f64) -> f64 {
    let f = t - t.floor();
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

/// One boundary facet of the domain mesh: an element edge on the boundary
/// of the unit square, with its outward unit normal.
#[derive(Debug, Clone, Copy)]
pub struct Facet {
    pub elem: (usize, usize),
    pub normal: [f64; 2],
    /// Local edge: 0 bottom, 1 right, 2 top, 3 left.
    pub side: u8,
}

/// Bounded-domain mesh: m x m quadrilaterals on the square (0,1)^2, with a
/// reflection-padding width (in cells) for the extension operator.
#[derive(Debug)]
pub struct DomainMesh {
    pub m: usize,
    /// Reflection padding width in cells on every side.
    pub pad: usize,
    pub boundary_facets: Vec<Facet>,
    pub quad_order: usize,
}

impl DomainMesh {
    pub fn new(m: usize, pad: usize) -> Result<Arc<Self>, GridError> {
        if m < 2 {
            return Err(GridError::BadDomainResolution(m));
        }
        let mut facets = Vec::with_capacity(4 * m);
        for e in 0..m {
            facets.push(Facet { elem: (e, 0), normal: [0.0, -1.0], side: 0 });
        }
        for e in 0..m {
            facets.push(Facet { elem: (m - 1, e), normal: [1.0, 0.0], side: 1 });
        }
        for e in 0..m {
            facets.push(Facet { elem: (e, m - 1), normal: [0.0, 1.0], side: 2 });
        }
        for e in 0..m {
            facets.push(Facet { elem: (0, e), normal: [-1.0, 0.0], side: 3 });
        }
        Ok(Arc::new(DomainMesh { m, pad, boundary_facets: facets, quad_order: 3 }))
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// Padding width as a length.
    pub fn pad_len(&self) -> f64 {
        self.pad as f64 * self.h()
    }

    pub fn q2_per_axis(&self) -> usize {
        2 * self.m + 1
    }

    pub fn num_q2(&self) -> usize {
        self.q2_per_axis() * self.q2_per_axis()
    }

    pub fn num_elems(&self) -> usize {
        self.m * self.m
    }

    #[inline]
    pub fn q2_node(&self, i: usize, j: usize) -> usize {
        j * self.q2_per_axis() + i
    }

    pub fn q2_elem_nodes(&self, ex: usize, ey: usize) -> [usize; NB2] {
        let mut out = [0usize; NB2];
        for b in 0..3 {
            for a in 0..3 {
                out[b * 3 + a] = self.q2_node(2 * ex + a, 2 * ey + b);
            }
        }
        out
    }

    pub fn q2_node_coord(&self, node: usize) -> [f64; 2] {
        let na = self.q2_per_axis();
        let i = node % na;
        let j = node / na;
        [i as f64 / (na - 1) as f64, j as f64 / (na - 1) as f64]
    }

    pub fn elem_center(&self, e: usize) -> [f64; 2] {
        let ex = e % self.m;
        let ey = e / self.m;
        [(ex as f64 + 0.5) * self.h(), (ey as f64 + 0.5) * self.h()]
    }

    /// Element containing `x` (clamped into the closed square) with local
    /// reference coordinates.
    pub fn locate(&self, x: [f64; 2]) -> (usize, usize, [f64; 2]) {
        let m = self.m as f64;
        let fx = (x[0].clamp(0.0, 1.0)) * m;
        let fy = (x[1].clamp(0.0, 1.0)) * m;
        let ex = (fx.floor() as usize).min(self.m - 1);
        let ey = (fy.floor() as usize).min(self.m - 1);
        (ex, ey, [fx - ex as f64, fy - ey as f64])
    }

    /// Distance to the boundary of the unit square.
    #[inline]
    pub fn dist_to_boundary(x: [f64; 2]) -> f64 {
        x[0].min(1.0 - x[0]).min(x[1]).min(1.0 - x[1])
    }
}

/// Which mesh a grid function lives on.
#[derive(Debug, Clone)]
pub enum MeshHandle {
    Cell(Arc<CellGrid>),
    Domain(Arc<DomainMesh>),
}

impl MeshHandle {
    pub fn same_as(&self, other: &MeshHandle) -> bool {
        match (self, other) {
            (MeshHandle::Cell(a), MeshHandle::Cell(b)) => a.n == b.n,
            (MeshHandle::Domain(a), MeshHandle::Domain(b)) => a.m == b.m,
            _ => false,
        }
    }

    pub fn cell(&self) -> Option<&Arc<CellGrid>> {
        match self {
            MeshHandle::Cell(g) => Some(g),
            _ => None,
        }
    }

    pub fn domain(&self) -> Option<&Arc<DomainMesh>> {
        match self {
            MeshHandle::Domain(m) => Some(m),
            _ => None,
        }
    }

    pub fn num_elems(&self) -> usize {
        match self {
            MeshHandle::Cell(g) => g.num_elems(),
            MeshHandle::Domain(m) => m.num_elems(),
        }
    }

    pub fn elems_per_axis(&self) -> usize {
        match self {
            MeshHandle::Cell(g) => g.n,
            MeshHandle::Domain(m) => m.m,
        }
    }

    pub fn h(&self) -> f64 {
        1.0 / self.elems_per_axis() as f64
    }
}

/// A finite-element coefficient vector in one of the tagged spaces.
/// Vector-valued functions store components interleaved: dof = node*ncomp + c.
/// Pressure functions store 3 dofs per element: [e*3 + k].
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub space: SpaceTag,
    pub values: Vec<f64>,
    pub mesh: MeshHandle,
}

impl GridFunction {
    pub fn zeros(space: SpaceTag, mesh: MeshHandle) -> Self {
        let n = space_dim(space, &mesh);
        GridFunction { space, values: vec![0.0; n], mesh }
    }

    pub fn from_values(
        space: SpaceTag,
        mesh: MeshHandle,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        let want = space_dim(space, &mesh);
        if values.len() != want {
            return Err(GridError::BadLength { got: values.len(), want });
        }
        Ok(GridFunction { space, values, mesh })
    }

    /// Nodal interpolation of a closure (exact for functions already in the
    /// space). Pressure functions are fitted per element at the center and
    /// two half-offset points.
    pub fn interpolate<F>(space: SpaceTag, mesh: MeshHandle, f: F) -> Self
    where
        F: Fn([f64; 2]) -> Vec<f64>,
    {
        let mut g = GridFunction::zeros(space, mesh);
        if space.is_pressure() {
            let h = g.mesh.h();
            for e in 0..g.mesh.num_elems() {
                let c = g.elem_center_of(e);
                let f0 = f(c)[0];
                let fx = f([c[0] + 0.25 * h, c[1]])[0];
                let fy = f([c[0], c[1] + 0.25 * h])[0];
                g.values[3 * e] = f0;
                g.values[3 * e + 1] = 4.0 * (fx - f0);
                g.values[3 * e + 2] = 4.0 * (fy - f0);
            }
        } else {
            let ncomp = space.ncomp();
            let nn = g.values.len() / ncomp;
            for node in 0..nn {
                let x = g.node_coord(node);
                let v = f(x);
                for c in 0..ncomp {
                    g.values[node * ncomp + c] = v[c];
                }
            }
        }
        g
    }

    pub fn ncomp(&self) -> usize {
        self.space.ncomp()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len() / self.ncomp()
    }

    fn elem_center_of(&self, e: usize) -> [f64; 2] {
        match &self.mesh {
            MeshHandle::Cell(g) => g.elem_center(e),
            MeshHandle::Domain(m) => m.elem_center(e),
        }
    }

    /// Representative coordinate of a dof: the Q2 node position, or the
    /// element center for pressure dofs.
    pub fn node_coord(&self, node: usize) -> [f64; 2] {
        if self.space.is_pressure() {
            return self.elem_center_of(node / 3);
        }
        match &self.mesh {
            MeshHandle::Cell(g) => g.q2_node_coord(node),
            MeshHandle::Domain(m) => m.q2_node_coord(node),
        }
    }

    /// Evaluate all components at a point (cell functions reduce mod 1,
    /// domain functions clamp into the closed square).
    pub fn eval(&self, x: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncomp()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: [f64; 2], out: &mut [f64]) {
        let ncomp = self.ncomp();
        out[..ncomp].fill(0.0);
        if self.space.is_pressure() {
            let (e, loc) = self.locate_elem(x);
            out[0] = self.values[3 * e]
                + self.values[3 * e + 1] * (loc[0] - 0.5)
                + self.values[3 * e + 2] * (loc[1] - 0.5);
            return;
        }
        let (nodes, loc) = self.locate_q2(x);
        let (nx, _, _) = quad::shape_q2_1d(loc[0]);
        let (ny, _, _) = quad::shape_q2_1d(loc[1]);
        for b in 0..3 {
            for a in 0..3 {
                let w = nx[a] * ny[b];
                let base = nodes[b * 3 + a] * ncomp;
                for c in 0..ncomp {
                    out[c] += w * self.values[base + c];
                }
            }
        }
    }

    /// Gradient of all components: out[c][k] = d f_c / d x_k.
    pub fn eval_grad(&self, x: [f64; 2]) -> Vec<[f64; 2]> {
        let ncomp = self.ncomp();
        let h = self.mesh.h();
        let mut out = vec![[0.0; 2]; ncomp];
        if self.space.is_pressure() {
            let (e, _) = self.locate_elem(x);
            out[0] = [self.values[3 * e + 1] / h, self.values[3 * e + 2] / h];
            return out;
        }
        let (nodes, loc) = self.locate_q2(x);
        let (nx, dx, _) = quad::shape_q2_1d(loc[0]);
        let (ny, dy, _) = quad::shape_q2_1d(loc[1]);
        for b in 0..3 {
            for a in 0..3 {
                let gx = dx[a] * ny[b] / h;
                let gy = nx[a] * dy[b] / h;
                let base = nodes[b * 3 + a] * ncomp;
                for c in 0..ncomp {
                    out[c][0] += gx * self.values[base + c];
                    out[c][1] += gy * self.values[base + c];
                }
            }
        }
        out
    }

    /// Element-wise second derivatives: out[c] = [f_xx, f_xy, f_yy].
    pub fn eval_hess(&self, x: [f64; 2]) -> Vec<[f64; 3]> {
        let ncomp = self.ncomp();
        let h = self.mesh.h();
        let h2 = h * h;
        let mut out = vec![[0.0; 3]; ncomp];
        if self.space.is_pressure() {
            return out;
        }
        let (nodes, loc) = self.locate_q2(x);
        let (nx, dx, ddx) = quad::shape_q2_1d(loc[0]);
        let (ny, dy, ddy) = quad::shape_q2_1d(loc[1]);
        for b in 0..3 {
            for a in 0..3 {
                let hxx = ddx[a] * ny[b] / h2;
                let hxy = dx[a] * dy[b] / h2;
                let hyy = nx[a] * ddy[b] / h2;
                let base = nodes[b * 3 + a] * ncomp;
                for c in 0..ncomp {
                    out[c][0] += hxx * self.values[base + c];
                    out[c][1] += hxy * self.values[base + c];
                    out[c][2] += hyy * self.values[base + c];
                }
            }
        }
        out
    }

    fn locate_elem(&self, x: [f64; 2]) -> (usize, [f64; 2]) {
        match &self.mesh {
            MeshHandle::Cell(g) => {
                let (ex, ey, loc) = g.locate(x);
                (ey * g.n + ex, loc)
            }
            MeshHandle::Domain(m) => {
                let (ex, ey, loc) = m.locate(x);
                (ey * m.m + ex, loc)
            }
        }
    }

    fn locate_q2(&self, x: [f64; 2]) -> ([usize; NB2], [f64; 2]) {
        match &self.mesh {
            MeshHandle::Cell(g) => {
                let (ex, ey, loc) = g.locate(x);
                (g.q2_elem_nodes(ex, ey), loc)
            }
            MeshHandle::Domain(m) => {
                let (ex, ey, loc) = m.locate(x);
                (m.q2_elem_nodes(ex, ey), loc)
            }
        }
    }
}

/// Coefficient-vector length of a tagged space on a mesh.
pub fn space_dim(space: SpaceTag, mesh: &MeshHandle) -> usize {
    if space.is_pressure() {
        return 3 * mesh.num_elems();
    }
    let nn = match mesh {
        MeshHandle::Cell(g) => g.num_q2(),
        MeshHandle::Domain(m) => m.num_q2(),
    };
    nn * space.ncomp()
}

/// Iterate over all elements x quadrature points of the mesh, driving
/// `visit(element_index, qp_index_in_elem, x_phys, weight)`.
pub fn for_each_qp<FN>(mesh: &MeshHandle, mut visit: FN)
where
    FN: FnMut(usize, usize, [f64; 2], f64),
{
    let t = quad::tables();
    let nel_axis = mesh.elems_per_axis();
    let h = mesh.h();
    let jac = h * h;
    for ey in 0..nel_axis {
        for ex in 0..nel_axis {
            let e = ey * nel_axis + ex;
            for q in 0..NQ {
                let x = [
                    (ex as f64 + t.pts[q][0]) * h,
                    (ey as f64 + t.pts[q][1]) * h,
                ];
                visit(e, q, x, t.w[q] * jac);
            }
        }
    }
}

/// Per-element evaluation of a grid function at the shared quadrature
/// points.
pub struct ElemEval<'a> {
    f: &'a GridFunction,
    nel_axis: usize,
    h: f64,
}

impl<'a> ElemEval<'a> {
    pub fn new(f: &'a GridFunction) -> Self {
        ElemEval { f, nel_axis: f.mesh.elems_per_axis(), h: f.mesh.h() }
    }

    pub fn q2_elem_nodes(&self, e: usize) -> [usize; NB2] {
        let ex = e % self.nel_axis;
        let ey = e / self.nel_axis;
        match &self.f.mesh {
            MeshHandle::Cell(g) => g.q2_elem_nodes(ex, ey),
            MeshHandle::Domain(m) => m.q2_elem_nodes(ex, ey),
        }
    }

    /// Value and gradient of every component at quadrature point q of
    /// element e.
    pub fn value_grad_at(&self, e: usize, q: usize) -> (Vec<f64>, Vec<[f64; 2]>) {
        let t = quad::tables();
        let ncomp = self.f.ncomp();
        let mut val = vec![0.0; ncomp];
        let mut grad = vec![[0.0; 2]; ncomp];
        if self.f.space.is_pressure() {
            let p = t.p1[q];
            val[0] = self.f.values[3 * e] * p[0]
                + self.f.values[3 * e + 1] * p[1]
                + self.f.values[3 * e + 2] * p[2];
            grad[0] = [
                self.f.values[3 * e + 1] / self.h,
                self.f.values[3 * e + 2] / self.h,
            ];
            return (val, grad);
        }
        let nodes = self.q2_elem_nodes(e);
        for (k, &node) in nodes.iter().enumerate() {
            let w = t.q2[q][k];
            let g = t.q2_d[q][k];
            for c in 0..ncomp {
                let v = self.f.values[node * ncomp + c];
                val[c] += w * v;
                grad[c][0] += g[0] / self.h * v;
                grad[c][1] += g[1] / self.h * v;
            }
        }
        (val, grad)
    }

    /// Second derivatives [xx, xy, yy] of every component at qp q of elem e
    /// (zero for pressure functions, which are linear per element).
    pub fn hess_at(&self, e: usize, q: usize) -> Vec<[f64; 3]> {
        let t = quad::tables();
        let ncomp = self.f.ncomp();
        let mut hess = vec![[0.0; 3]; ncomp];
        if self.f.space.is_pressure() {
            return hess;
        }
        let nodes = self.q2_elem_nodes(e);
        let h2 = self.h * self.h;
        for (k, &node) in nodes.iter().enumerate() {
            let dd = t.q2_dd[q][k];
            for c in 0..ncomp {
                let v = self.f.values[node * ncomp + c];
                hess[c][0] += dd[0] / h2 * v;
                hess[c][1] += dd[1] / h2 * v;
                hess[c][2] += dd[2] / h2 * v;
            }
        }
        hess
    }
}

/// L2 norm over the mesh the function lives on.
pub fn l2_norm(f: &GridFunction) -> f64 {
    let ev = ElemEval::new(f);
    let mut acc = 0.0;
    for_each_qp(&f.mesh, |e, q, _x, w| {
        let (val, _) = ev.value_grad_at(e, q);
        acc += w * val.iter().map(|v| v * v).sum::<f64>();
    });
    acc.sqrt()
}

/// H1 seminorm (L2 norm of the gradient).
pub fn h1_seminorm(f: &GridFunction) -> f64 {
    let ev = ElemEval::new(f);
    let mut acc = 0.0;
    for_each_qp(&f.mesh, |e, q, _x, w| {
        let (_, grad) = ev.value_grad_at(e, q);
        acc += w * grad.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum::<f64>();
    });
    acc.sqrt()
}

pub fn h1_norm(f: &GridFunction) -> f64 {
    let l2 = l2_norm(f);
    let h1 = h1_seminorm(f);
    (l2 * l2 + h1 * h1).sqrt()
}

/// Broken H2 surrogate: sqrt(||f||_H1^2 + sum_elems int |D^2 f|^2), with
/// element-wise second derivatives. Used as the ||.||_{H^2} scale in rate
/// reports.
pub fn h2_surrogate(f: &GridFunction) -> f64 {
    let ev = ElemEval::new(f);
    let mut acc = 0.0;
    for_each_qp(&f.mesh, |e, q, _x, w| {
        let (val, grad) = ev.value_grad_at(e, q);
        let hess = ev.hess_at(e, q);
        acc += w * val.iter().map(|v| v * v).sum::<f64>();
        acc += w * grad.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum::<f64>();
        // |D^2|^2 counts the mixed derivative twice
        acc += w
            * hess
                .iter()
                .map(|h| h[0] * h[0] + 2.0 * h[1] * h[1] + h[2] * h[2])
                .sum::<f64>();
    });
    acc.sqrt()
}

/// L2 norm restricted to the boundary strip Omega_r = {dist(x, dOmega) <= r},
/// decided per quadrature point.
pub fn strip_norm(f: &GridFunction, r: f64) -> Result<f64, GridError> {
    if f.mesh.domain().is_none() {
        return Err(GridError::NotADomainFunction);
    }
    let diam = (2.0f64).sqrt();
    if !(r > 0.0 && r <= diam) {
        return Err(GridError::StripRadius(r));
    }
    let ev = ElemEval::new(f);
    let mut acc = 0.0;
    for_each_qp(&f.mesh, |e, q, x, w| {
        if DomainMesh::dist_to_boundary(x) <= r {
            let (val, _) = ev.value_grad_at(e, q);
            acc += w * val.iter().map(|v| v * v).sum::<f64>();
        }
    });
    Ok(acc.sqrt())
}

/// L2 norm of the gradient restricted to the boundary strip Omega_r.
pub fn strip_h1_seminorm(f: &GridFunction, r: f64) -> Result<f64, GridError> {
    if f.mesh.domain().is_none() {
        return Err(GridError::NotADomainFunction);
    }
    let diam = (2.0f64).sqrt();
    if !(r > 0.0 && r <= diam) {
        return Err(GridError::StripRadius(r));
    }
    let ev = ElemEval::new(f);
    let mut acc = 0.0;
    for_each_qp(&f.mesh, |e, q, x, w| {
        if DomainMesh::dist_to_boundary(x) <= r {
            let (_, grad) = ev.value_grad_at(e, q);
            acc += w * grad.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum::<f64>();
        }
    });
    Ok(acc.sqrt())
}

/// Per-component mean over the mesh (domain/cell both have unit area).
pub fn mean(f: &GridFunction) -> Vec<f64> {
    let ev = ElemEval::new(f);
    let mut acc = vec![0.0; f.ncomp()];
    let mut area = 0.0;
    for_each_qp(&f.mesh, |e, q, _x, w| {
        let (val, _) = ev.value_grad_at(e, q);
        for c in 0..val.len() {
            acc[c] += w * val[c];
        }
        area += w;
    });
    for a in acc.iter_mut() {
        *a /= area;
    }
    acc
}

/// f minus its per-component mean.
pub fn subtract_mean(f: &GridFunction) -> GridFunction {
    let mu = mean(f);
    let mut g = f.clone();
    if f.space.is_pressure() {
        for e in 0..g.mesh.num_elems() {
            g.values[3 * e] -= mu[0];
        }
    } else {
        let ncomp = f.ncomp();
        for node in 0..g.num_nodes() {
            for c in 0..ncomp {
                g.values[node * ncomp + c] -= mu[c];
            }
        }
    }
    g
}

/// Values attached to the quadrature points of a mesh (ncomp per point).
/// Used for fields that are only meaningful pointwise (two-scale residuals,
/// flux discrepancies, sampled coefficients).
#[derive(Debug, Clone)]
pub struct QuadField {
    pub mesh: MeshHandle,
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl QuadField {
    pub fn zeros(mesh: MeshHandle, ncomp: usize) -> Self {
        let nel = mesh.num_elems();
        QuadField { mesh, ncomp, values: vec![0.0; nel * NQ * ncomp] }
    }

    #[inline]
    pub fn idx(&self, e: usize, q: usize) -> usize {
        (e * NQ + q) * self.ncomp
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for_each_qp(&self.mesh, |e, q, _x, w| {
            let i = self.idx(e, q);
            for c in 0..self.ncomp {
                acc += w * self.values[i + c] * self.values[i + c];
            }
        });
        acc.sqrt()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.ncomp];
        let mut area = 0.0;
        for_each_qp(&self.mesh, |e, q, _x, w| {
            let i = self.idx(e, q);
            for c in 0..self.ncomp {
                acc[c] += w * self.values[i + c];
            }
            area += w;
        });
        for a in acc.iter_mut() {
            *a /= area;
        }
        acc
    }

    /// L2 norm over the boundary strip (domain meshes only).
    pub fn strip_l2_norm(&self, r: f64) -> Result<f64, GridError> {
        if self.mesh.domain().is_none() {
            return Err(GridError::NotADomainFunction);
        }
        let mut acc = 0.0;
        for_each_qp(&self.mesh, |e, q, x, w| {
            if DomainMesh::dist_to_boundary(x) <= r {
                let i = self.idx(e, q);
                for c in 0..self.ncomp {
                    acc += w * self.values[i + c] * self.values[i + c];
                }
            }
        });
        Ok(acc.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_domain(m: usize) -> MeshHandle {
        MeshHandle::Domain(DomainMesh::new(m, 0).unwrap())
    }

    #[test]
    fn cell_grid_validation() {
        assert!(CellGrid::new(3).is_err());
        assert!(CellGrid::new(5).is_err());
        assert!(CellGrid::new(2).is_err());
        assert!(CellGrid::new(4).is_ok());
    }

    #[test]
    fn constant_function_norms() {
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(8), |_| vec![1.0]);
        assert_relative_eq!(l2_norm(&f), 1.0, epsilon = 1e-13);
        assert!(h1_seminorm(&f) < 1e-12);
    }

    #[test]
    fn linear_function_norms() {
        // f(x) = x1: ||f||_L2 = 1/sqrt(3), |f|_H1 = 1.
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(8), |x| vec![x[0]]);
        assert_relative_eq!(l2_norm(&f), 1.0 / 3.0f64.sqrt(), epsilon = 1e-13);
        assert_relative_eq!(h1_seminorm(&f), 1.0, epsilon = 1e-13);
        assert_relative_eq!(h1_norm(&f), (1.0 / 3.0 + 1.0f64).sqrt(), epsilon = 1e-13);
    }

    #[test]
    fn sine_product_l2() {
        // ||sin(pi x1) sin(pi x2)||_L2 = 1/2 within quadrature tolerance.
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(64), |x| {
            vec![(std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin()]
        });
        assert!((l2_norm(&f) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn quadrature_exact_for_quintic_monomials() {
        let mesh = unit_domain(4);
        for a in 0..=5u32 {
            for b in 0..=5u32 {
                let mut acc = 0.0;
                for_each_qp(&mesh, |_e, _q, x, w| {
                    acc += w * x[0].powi(a as i32) * x[1].powi(b as i32);
                });
                let exact = 1.0 / ((a as f64 + 1.0) * (b as f64 + 1.0));
                assert!(
                    (acc - exact).abs() < 1e-14,
                    "monomial x^{a} y^{b}: {acc} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn strip_norm_full_domain_equals_l2() {
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(16), |x| {
            vec![1.0 + x[0] * x[1]]
        });
        let full = strip_norm(&f, 2.0f64.sqrt()).unwrap();
        assert_relative_eq!(full, l2_norm(&f), epsilon = 1e-13);
    }

    #[test]
    fn strip_norm_of_constant_matches_strip_area() {
        // r = 0.1 on the unit square: strip area 1 - 0.8^2 = 0.36, norm 0.6,
        // resolved to the quadrature's geometric resolution.
        let m = 64;
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(m), |_| vec![1.0]);
        let s = strip_norm(&f, 0.1).unwrap();
        assert!((s - 0.6).abs() < 2.0 / m as f64, "strip norm {s}");
    }

    #[test]
    fn strip_norm_monotone_in_r() {
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(32), |x| vec![x[0]]);
        let mut prev = f64::INFINITY;
        for r in [0.4, 0.2, 0.1, 0.05, 0.025] {
            let s = strip_norm(&f, r).unwrap();
            assert!(s <= prev + 1e-14);
            prev = s;
        }
    }

    #[test]
    fn strip_plus_interior_partitions_l2() {
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(16), |x| {
            vec![x[0] + 2.0 * x[1]]
        });
        let r = 0.17;
        let strip = strip_norm(&f, r).unwrap();
        let ev = ElemEval::new(&f);
        let mut acc = 0.0;
        for_each_qp(&f.mesh, |e, q, x, w| {
            if DomainMesh::dist_to_boundary(x) > r {
                let (val, _) = ev.value_grad_at(e, q);
                acc += w * val[0] * val[0];
            }
        });
        let interior = acc.sqrt();
        assert_relative_eq!(
            (strip * strip + interior * interior).sqrt(),
            l2_norm(&f),
            epsilon = 1e-13
        );
    }

    #[test]
    fn strip_ratio_bounded_as_r_halves() {
        // For fixed smooth f with H1 norm O(1), strip_norm(f, r)/sqrt(r)
        // stays bounded as r halves; successive ratios stay below 4.
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(64), |x| {
            vec![(std::f64::consts::PI * x[0]).cos() * (1.0 + 0.3 * x[1])]
        });
        let mut prev: Option<f64> = None;
        for r in [0.2, 0.1, 0.05, 0.025] {
            let ratio = strip_norm(&f, r).unwrap() / r.sqrt();
            if let Some(p) = prev {
                assert!(p / ratio < 4.0 && ratio / p < 4.0, "{p} vs {ratio}");
            }
            prev = Some(ratio);
        }
    }

    #[test]
    fn mean_and_subtract_mean() {
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(8), |x| vec![x[0]]);
        let mu = mean(&f);
        assert_relative_eq!(mu[0], 0.5, epsilon = 1e-13);
        let g = subtract_mean(&f);
        assert!(mean(&g)[0].abs() < 1e-13);

        let c = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(8), |_| vec![3.25]);
        assert_relative_eq!(mean(&c)[0], 3.25, epsilon = 1e-13);
        assert!(l2_norm(&subtract_mean(&c)) < 1e-12);
    }

    #[test]
    fn cell_mean_of_sine_is_zero() {
        let grid = CellGrid::new(16).unwrap();
        let f = GridFunction::interpolate(
            SpaceTag::CellScalarQ2,
            MeshHandle::Cell(grid),
            |y| vec![(2.0 * std::f64::consts::PI * y[0]).sin()],
        );
        assert!(mean(&f)[0].abs() < 1e-12);
    }

    #[test]
    fn periodic_evaluation_wraps() {
        let grid = CellGrid::new(8).unwrap();
        let f = GridFunction::interpolate(
            SpaceTag::CellScalarQ2,
            MeshHandle::Cell(grid),
            |y| vec![(2.0 * std::f64::consts::PI * y[0]).cos()],
        );
        let a = f.eval([0.3, 0.4])[0];
        let b = f.eval([1.3, -0.6])[0];
        assert_relative_eq!(a, b, epsilon = 1e-13);
    }

    #[test]
    fn q2_interpolation_reproduces_quadratics() {
        let f = GridFunction::interpolate(SpaceTag::ScalarQ2, unit_domain(4), |x| {
            vec![1.0 + 2.0 * x[0] + x[1] + 0.5 * x[0] * x[0] + x[0] * x[1]]
        });
        let x = [0.37, 0.81];
        let v = f.eval(x)[0];
        let exact = 1.0 + 2.0 * x[0] + x[1] + 0.5 * x[0] * x[0] + x[0] * x[1];
        assert_relative_eq!(v, exact, epsilon = 1e-13);
        let g = f.eval_grad(x);
        assert_relative_eq!(g[0][0], 2.0 + x[0] + x[1], epsilon = 1e-12);
        assert_relative_eq!(g[0][1], 1.0 + x[0], epsilon = 1e-12);
        let hess = f.eval_hess(x);
        assert_relative_eq!(hess[0][0], 1.0, epsilon = 1e-11);
        assert_relative_eq!(hess[0][1], 1.0, epsilon = 1e-11);
        assert_relative_eq!(hess[0][2], 0.0, epsilon = 1e-11);
    }

    #[test]
    fn pressure_space_reproduces_linears() {
        let f = GridFunction::interpolate(SpaceTag::PressureP1, unit_domain(4), |x| {
            vec![2.0 - 3.0 * x[0] + 0.5 * x[1]]
        });
        for &x in &[[0.1, 0.2], [0.93, 0.41], [0.5, 0.99]] {
            assert_relative_eq!(f.eval(x)[0], 2.0 - 3.0 * x[0] + 0.5 * x[1], epsilon = 1e-12);
        }
        assert_relative_eq!(mean(&f)[0], 2.0 - 1.5 + 0.25, epsilon = 1e-13);
        let s = subtract_mean(&f);
        assert!(mean(&s)[0].abs() < 1e-13);
    }

    #[test]
    fn pressure_space_is_discontinuous() {
        // element-aligned jump is represented exactly
        let f = GridFunction::interpolate(SpaceTag::PressureP1, unit_domain(4), |x| {
            vec![if x[0] < 0.5 { 1.0 } else { 4.0 }]
        });
        assert_relative_eq!(f.eval([0.49, 0.3])[0], 1.0, epsilon = 1e-13);
        assert_relative_eq!(f.eval([0.51, 0.3])[0], 4.0, epsilon = 1e-13);
    }

    #[test]
    fn bad_length_rejected() {
        let mesh = unit_domain(4);
        assert!(GridFunction::from_values(SpaceTag::ScalarQ2, mesh, vec![0.0; 3]).is_err());
    }
}
