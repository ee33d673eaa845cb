//! Gauss quadrature and tensor-product shape functions on the reference
//! square [0,1]^2.
//!
//! Everything downstream (assembly, norms, effective-tensor averages) uses
//! the same 3x3 Gauss rule, so discrete identities that are derived from the
//! weak forms hold to solver precision rather than quadrature precision.

use std::sync::LazyLock;

/// Number of 1D Gauss points per element axis.
pub const GPTS: usize = 3;
/// Quadrature points per element.
pub const NQ: usize = GPTS * GPTS;
/// Q2 basis functions per element (3x3 nodes).
pub const NB2: usize = 9;
/// Q1 basis functions per element (2x2 nodes).
pub const NB1: usize = 4;

/// 3-point Gauss rule on [0,1]: (point, weight).
pub fn gauss3() -> [(f64, f64); 3] {
    let s = (0.6f64).sqrt() / 2.0;
    [
        (0.5 - s, 5.0 / 18.0),
        (0.5, 8.0 / 18.0),
        (0.5 + s, 5.0 / 18.0),
    ]
}

/// 1D quadratic Lagrange basis on [0,1] with nodes {0, 1/2, 1}:
/// values, first and second derivatives at `t`.
#[inline]
pub fn shape_q2_1d(t: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    (
        [
            (2.0 * t - 1.0) * (t - 1.0),
            4.0 * t * (1.0 - t),
            t * (2.0 * t - 1.0),
        ],
        [4.0 * t - 3.0, 4.0 - 8.0 * t, 4.0 * t - 1.0],
        [4.0, -8.0, 4.0],
    )
}

/// 1D linear Lagrange basis on [0,1]: values and derivatives at `t`.
#[inline]
pub fn shape_q1_1d(t: f64) -> ([f64; 2], [f64; 2]) {
    ([1.0 - t, t], [-1.0, 1.0])
}

/// Per-element tables at the 3x3 Gauss points, in reference coordinates.
///
/// Local Q2 node `a + 3*b` sits at (a/2, b/2); local Q1 node `a + 2*b` at
/// (a, b). Derivatives are with respect to reference coordinates and must be
/// scaled by 1/h (1/h^2 for second derivatives) at the call site.
pub struct QuadTables {
    /// Reference coordinates of quadrature point q.
    pub pts: [[f64; 2]; NQ],
    /// Quadrature weights (sum to 1).
    pub w: [f64; NQ],
    /// Q2 values: [q][basis].
    pub q2: [[f64; NB2]; NQ],
    /// Q2 reference gradients: [q][basis][axis].
    pub q2_d: [[[f64; 2]; NB2]; NQ],
    /// Q2 reference second derivatives: [q][basis][xx, xy, yy].
    pub q2_dd: [[[f64; 3]; NB2]; NQ],
    /// Q1 values: [q][basis].
    pub q1: [[f64; NB1]; NQ],
    /// Q1 reference gradients: [q][basis][axis].
    pub q1_d: [[[f64; 2]; NB1]; NQ],
    /// Discontinuous P1 values {1, x-1/2, y-1/2}: [q][basis].
    pub p1: [[f64; 3]; NQ],
}

impl QuadTables {
    fn build() -> Self {
        let g = gauss3();
        let mut t = QuadTables {
            pts: [[0.0; 2]; NQ],
            w: [0.0; NQ],
            q2: [[0.0; NB2]; NQ],
            q2_d: [[[0.0; 2]; NB2]; NQ],
            q2_dd: [[[0.0; 3]; NB2]; NQ],
            q1: [[0.0; NB1]; NQ],
            q1_d: [[[0.0; 2]; NB1]; NQ],
            p1: [[0.0; 3]; NQ],
        };
        for (qy, &(ty, wy)) in g.iter().enumerate() {
            for (qx, &(tx, wx)) in g.iter().enumerate() {
                let q = qy * GPTS + qx;
                t.pts[q] = [tx, ty];
                t.w[q] = wx * wy;
                let (nx, dx, ddx) = shape_q2_1d(tx);
                let (ny, dy, ddy) = shape_q2_1d(ty);
                for b in 0..3 {
                    for a in 0..3 {
                        let k = b * 3 + a;
                        t.q2[q][k] = nx[a] * ny[b];
                        t.q2_d[q][k] = [dx[a] * ny[b], nx[a] * dy[b]];
                        t.q2_dd[q][k] = [ddx[a] * ny[b], dx[a] * dy[b], nx[a] * ddy[b]];
                    }
                }
                let (mx, ex) = shape_q1_1d(tx);
                let (my, ey) = shape_q1_1d(ty);
                for b in 0..2 {
                    for a in 0..2 {
                        let k = b * 2 + a;
                        t.q1[q][k] = mx[a] * my[b];
                        t.q1_d[q][k] = [ex[a] * my[b], mx[a] * ey[b]];
                    }
                }
                t.p1[q] = shape_p1(tx, ty);
            }
        }
        t
    }
}

static TABLES: LazyLock<QuadTables> = LazyLock::new(QuadTables::build);

/// Shared quadrature/shape tables for the 3x3 rule.
pub fn tables() -> &'static QuadTables {
    &TABLES
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss3_integrates_quintics_exactly() {
        // 3-point Gauss is exact through degree 5 on [0,1].
        for p in 0..=5u32 {
            let exact = 1.0 / (p as f64 + 1.0);
            let got: f64 = gauss3().iter().map(|&(t, w)| w * t.powi(p as i32)).sum();
            assert!((got - exact).abs() < 1e-14, "degree {p}: {got} vs {exact}");
        }
    }

    #[test]
    fn q2_partition_of_unity() {
        let t = tables();
        for q in 0..NQ {
            let s: f64 = t.q2[q].iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            let sd: f64 = t.q2_d[q].iter().map(|g| g[0] + g[1]).sum();
            assert!(sd.abs() < 1e-13);
            let s1: f64 = t.q1[q].iter().sum();
            assert!((s1 - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn q2_nodal_interpolation() {
        // Basis k is 1 at its own node, 0 at the others.
        for b in 0..3 {
            for a in 0..3 {
                let (nx, _, _) = shape_q2_1d(a as f64 / 2.0);
                let (ny, _, _) = shape_q2_1d(b as f64 / 2.0);
                for bb in 0..3 {
                    for aa in 0..3 {
                        let v = nx[aa] * ny[bb];
                        let expect = if aa == a && bb == b { 1.0 } else { 0.0 };
                        assert!((v - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }
}
/// Discontinuous linear pressure basis on the reference element:
/// {1, x - 1/2, y - 1/2}. Reference gradients are [0,0], [1,0], [0,1].
#[inline]
pub fn shape_p1(tx: f64, ty: f64) -> [f64; 3] {
    [1.0, tx - 0.5, ty - 0.5]
}
