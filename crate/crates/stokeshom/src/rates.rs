//! Epsilon sweeps, error norms of the convergence-rate theorems, log-log
//! slope fitting and machine-readable reports.

use crate::cell::{self, Corrector, EffectiveTensor};
use crate::coeff::{builtin_family, CoefficientField, CoeffError};
use crate::grid::{self, DomainMesh, ElemEval, MeshHandle};
use crate::neumann::{
    self, FlowField, NeumannError, ProblemData, ScalarClosure, TractionClosure, VecClosure,
};
use crate::twoscale::{self, TwoScaleError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RatesError {
    #[error("invalid study config: {0}")]
    Config(String),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error(transparent)]
    Cell(#[from] cell::CellError),
    #[error(transparent)]
    Neumann(#[from] NeumannError),
    #[error(transparent)]
    TwoScale(#[from] TwoScaleError),
    #[error("slope fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("slope fit requires positive errors, got {0}")]
    NonpositiveError(f64),
    #[error(transparent)]
    Grid(#[from] grid::GridError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshRule {
    /// Subdivisions per eps: m = round(factor / eps); must keep h <= eps/8.
    pub factor: f64,
}

impl Default for MeshRule {
    fn default() -> Self {
        MeshRule { factor: 8.0 }
    }
}

impl MeshRule {
    pub fn subdivisions(&self, eps: f64) -> usize {
        (self.factor / eps).round() as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub solver: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { solver: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gates {
    pub l2_slope: f64,
    pub h1_slope: f64,
    pub p_slope: f64,
    pub min_r2: f64,
}

impl Default for Gates {
    fn default() -> Self {
        Gates { l2_slope: 0.9, h1_slope: 0.45, p_slope: 0.45, min_r2: 0.98 }
    }
}

/// Study configuration shared by every CLI pipeline. Unknown keys are
/// rejected so config errors name the offending field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub family: FamilySpec,
    pub eps_list: Vec<f64>,
    pub mesh_rule: MeshRule,
    pub cell_n: usize,
    /// Data generator: "default" (smooth body force with a compensating
    /// constant traction) or "zero".
    pub data_spec: String,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub workers: usize,
    /// Single-solve epsilon (the `solve` pipeline).
    pub eps: f64,
    /// Mesh sweep for the manufactured-solution study.
    pub mms_m_list: Vec<usize>,
    pub gates: Gates,
    pub dump_fields: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            family: FamilySpec { name: "trig".into(), params: vec![0.5, 0.4] },
            eps_list: vec![0.25, 0.125, 0.0625, 0.03125],
            mesh_rule: MeshRule::default(),
            cell_n: 64,
            data_spec: "default".into(),
            seed: 7,
            tolerances: Tolerances::default(),
            workers: 1,
            eps: 0.125,
            mms_m_list: vec![16, 32, 64],
            gates: Gates::default(),
            dump_fields: false,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), RatesError> {
        if self.eps_list.is_empty() {
            return Err(RatesError::Config("eps_list is empty".into()));
        }
        for w in self.eps_list.windows(2) {
            if w[1] >= w[0] {
                return Err(RatesError::Config(
                    "eps_list must be strictly decreasing".into(),
                ));
            }
        }
        for &e in &self.eps_list {
            if !(e > 0.0 && e <= 0.5) {
                return Err(RatesError::Config(format!("eps {e} outside (0, 1/2]")));
            }
            let m = self.mesh_rule.subdivisions(e);
            if (m as f64) * e + 1e-9 < 8.0 {
                return Err(RatesError::Config(format!(
                    "mesh_rule gives m = {m} at eps = {e}; need m >= 8/eps"
                )));
            }
        }
        if self.cell_n < 4 || self.cell_n % 2 != 0 {
            return Err(RatesError::Config(format!(
                "cell_n must be even and >= 4, got {}",
                self.cell_n
            )));
        }
        if !matches!(self.data_spec.as_str(), "default" | "zero") {
            return Err(RatesError::Config(format!(
                "unknown data_spec '{}'",
                self.data_spec
            )));
        }
        if self.workers == 0 {
            return Err(RatesError::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn coefficient(&self) -> Result<CoefficientField, CoeffError> {
        builtin_family(&self.family.name, &self.family.params)
    }

    /// Canonical hash of the configuration (reports embed it).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The (F, g, f) data generator for this study.
    pub fn problem_data(&self) -> ProblemData {
        match self.data_spec.as_str() {
            "zero" => ProblemData::zero(),
            _ => default_data(),
        }
    }
}

/// Smooth divergence-compatible default data: a generic body force whose
/// exact integral is compensated by a constant traction so the
/// compatibility condition holds analytically.
fn default_data() -> ProblemData {
    use std::f64::consts::PI;
    let body: VecClosure = Arc::new(|x| {
        [
            (PI * x[0]).cos() * (PI * x[1]).cos() + 0.5,
            (PI * x[0]).sin() * (PI * x[1]).sin(),
        ]
    });
    // int F = (1/2, 4/pi^2); |bdry| = 4
    let c = [-0.5 / 4.0, -(4.0 / (PI * PI)) / 4.0];
    let traction: TractionClosure = Arc::new(move |_x, _n| c);
    let g: ScalarClosure = Arc::new(|_| 0.0);
    ProblemData { body, div_datum: g, traction }
}

/// Least-squares log-log fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares on (log eps, log err).
pub fn fit_slope(points: &[(f64, f64)]) -> Result<Fit, RatesError> {
    if points.len() < 3 {
        return Err(RatesError::TooFewPoints(points.len()));
    }
    for &(_, e) in points {
        if e <= 0.0 {
            return Err(RatesError::NonpositiveError(e));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(x, _)| x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_tot: f64 = ys.iter().map(|y| (y - ym) * (y - ym)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let p = intercept + slope * x;
            (y - p) * (y - p)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(Fit { slope, intercept, r2 })
}

/// One row of the rate table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub eps: f64,
    pub m: usize,
    /// ||u_eps - u_0||_{L2}
    pub l2_u_err: f64,
    /// ||v_eps||_{H1}
    pub h1_v_err: f64,
    /// ||p_eps - p_0 - [pi^eps S_eps grad(u0~) - mean]||_{L2}
    pub l2_p_err: f64,
    /// ||div v_eps||_{L2}
    pub div_v: f64,
    /// H2 surrogate norm of the homogenized velocity.
    pub u0_h2: f64,
    pub res_osc: f64,
    pub res_hom: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slopes {
    pub l2_u: Fit,
    pub h1_v: Fit,
    pub l2_p: Fit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub family: String,
    pub params: Vec<f64>,
    pub cell_n: usize,
    pub config_hash: String,
    pub rows: Vec<RateRow>,
    /// Present when >= 3 rows and all errors sit above the noise floor.
    pub slopes: Option<Slopes>,
    pub flags: Vec<String>,
}

impl RateReport {
    /// CSV with exactly the documented row columns.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "eps,l2_u_err,h1_v_err,l2_p_err,div_v,u0_h2")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.eps, r.l2_u_err, r.h1_v_err, r.l2_p_err, r.div_v, r.u0_h2
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Whether the fitted slopes meet the configured gates.
    pub fn gates_pass(&self, gates: &Gates) -> bool {
        match &self.slopes {
            Some(s) => {
                s.l2_u.slope >= gates.l2_slope
                    && s.h1_v.slope >= gates.h1_slope
                    && s.l2_p.slope >= gates.p_slope
                    && s.l2_u.r2 >= gates.min_r2
            }
            None => false,
        }
    }
}

/// Pipeline products for one epsilon (shared by the rate study and the
/// diagnostics commands).
pub struct EpsSolve {
    pub eps: f64,
    pub mesh: Arc<DomainMesh>,
    pub oscillating: FlowField,
    pub homogenized: FlowField,
    pub residuals: twoscale::ResidualFields,
}

/// Solve the oscillating and homogenized problems at one epsilon and
/// assemble the two-scale residuals.
pub fn solve_at_eps(
    a: &CoefficientField,
    ahat: &EffectiveTensor,
    corr: &Corrector,
    data: &ProblemData,
    rule: &MeshRule,
    eps: f64,
    tol: f64,
) -> Result<EpsSolve, RatesError> {
    let m = rule.subdivisions(eps);
    let pad = (eps * m as f64).ceil() as usize;
    let mesh = DomainMesh::new(m, pad.max(1))?;
    let oscillating = neumann::solve_oscillating(a, eps, data, &mesh, tol)?;
    let homogenized = neumann::solve_homogenized(ahat, data, &mesh, tol)?;
    let residuals = twoscale::assemble_residuals(&oscillating, &homogenized, corr, eps, &mesh)?;
    Ok(EpsSolve { eps, mesh, oscillating, homogenized, residuals })
}

/// Run the full epsilon sweep: correctors and the effective tensor once,
/// then per-eps solves, residuals and slope fits.
pub fn run_study(cfg: &StudyConfig) -> Result<RateReport, RatesError> {
    cfg.validate()?;
    let a = cfg.coefficient()?;
    let grid = crate::grid::CellGrid::new(cfg.cell_n)
        .map_err(|e| RatesError::Config(e.to_string()))?;
    let tol = cfg.tolerances.solver;
    let corr = cell::solve_cell(&a, &grid, tol)?;
    let ahat = cell::effective_tensor(&a, &corr, &grid);
    let data = cfg.problem_data();

    let nrows = cfg.eps_list.len();
    let results: Vec<Mutex<Option<Result<RateRow, RatesError>>>> =
        (0..nrows).map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = cfg.workers.min(nrows);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= nrows {
                    break;
                }
                let eps = cfg.eps_list[idx];
                let row = solve_at_eps(&a, &ahat, &corr, &data, &cfg.mesh_rule, eps, tol).map(
                    |s| RateRow {
                        eps,
                        m: s.mesh.m,
                        l2_u_err: neumann::velocity_l2_diff(&s.oscillating, &s.homogenized),
                        h1_v_err: s.residuals.v_h1(),
                        l2_p_err: s.residuals.p_res_l2(),
                        div_v: s.residuals.div_v_l2(),
                        u0_h2: s.homogenized.u_h2,
                        res_osc: s.oscillating.solver_residual,
                        res_hom: s.homogenized.solver_residual,
                    },
                );
                *results[idx].lock().unwrap() = Some(row);
            });
        }
    });

    let mut rows = Vec::with_capacity(nrows);
    for cellr in results {
        match cellr.into_inner().unwrap() {
            Some(Ok(row)) => rows.push(row),
            Some(Err(e)) => return Err(e),
            None => unreachable!("all rows visited"),
        }
    }

    let mut flags = Vec::new();
    // noise floor: errors below 10x the algebraic residual scale carry no
    // rate information
    let noise = rows.iter().any(|r| {
        let floor = 10.0 * r.res_osc.max(r.res_hom) * r.u0_h2.max(1.0);
        r.l2_u_err < floor || r.h1_v_err < floor || r.l2_p_err < floor
    });
    if noise {
        flags.push("noise-floor: errors at solver-residual scale; slopes skipped".into());
    }
    if rows.len() < 3 {
        flags.push(format!("insufficient points for slopes ({} < 3)", rows.len()));
    }
    let slopes = if rows.len() >= 3 && !noise {
        let pts = |f: &dyn Fn(&RateRow) -> f64| -> Vec<(f64, f64)> {
            rows.iter().map(|r| (r.eps, f(r))).collect()
        };
        Some(Slopes {
            l2_u: fit_slope(&pts(&|r| r.l2_u_err))?,
            h1_v: fit_slope(&pts(&|r| r.h1_v_err))?,
            l2_p: fit_slope(&pts(&|r| r.l2_p_err))?,
        })
    } else {
        None
    };

    // monotonicity diagnostic: flag (not fail) inverted error columns
    for (name, get) in [
        ("l2_u_err", &(|r: &RateRow| r.l2_u_err) as &dyn Fn(&RateRow) -> f64),
        ("h1_v_err", &|r: &RateRow| r.h1_v_err),
        ("l2_p_err", &|r: &RateRow| r.l2_p_err),
    ] {
        for w in rows.windows(2) {
            if get(&w[1]) > get(&w[0]) * 1.05 {
                flags.push(format!(
                    "non-monotone {name} between eps {} and {}",
                    w[0].eps, w[1].eps
                ));
            }
        }
    }

    Ok(RateReport {
        family: cfg.family.name.clone(),
        params: cfg.family.params.clone(),
        cell_n: cfg.cell_n,
        config_hash: cfg.hash(),
        rows,
        slopes,
        flags,
    })
}

/// Weak flux-convergence diagnostic: e(eps) = |int (A^eps grad u_eps -
/// A_hat grad u_0) : Psi| for a fixed smooth matrix field Psi.
pub type MatrixClosure = Arc<dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync>;

#[derive(Debug, Clone, Serialize)]
pub struct FluxRow {
    pub eps: f64,
    pub pairing_err: f64,
}

pub fn flux_convergence(cfg: &StudyConfig, psi: &MatrixClosure) -> Result<Vec<FluxRow>, RatesError> {
    cfg.validate()?;
    let a = cfg.coefficient()?;
    let grid = crate::grid::CellGrid::new(cfg.cell_n)
        .map_err(|e| RatesError::Config(e.to_string()))?;
    let tol = cfg.tolerances.solver;
    let corr = cell::solve_cell(&a, &grid, tol)?;
    let ahat = cell::effective_tensor(&a, &corr, &grid);
    let data = cfg.problem_data();
    let mut out = Vec::new();
    for &eps in &cfg.eps_list {
        let s = solve_at_eps(&a, &ahat, &corr, &data, &cfg.mesh_rule, eps, tol)?;
        let ue = ElemEval::new(&s.oscillating.u);
        let u0 = ElemEval::new(&s.homogenized.u);
        let mh = MeshHandle::Domain(s.mesh.clone());
        let mut acc = 0.0;
        grid::for_each_qp(&mh, |e, q, x, w| {
            let aa = a.at([x[0] / eps, x[1] / eps]);
            let (_, ge) = ue.value_grad_at(e, q);
            let (_, g0) = u0.value_grad_at(e, q);
            let p = psi(x);
            for i in 0..2 {
                for al in 0..2 {
                    let mut flux_e = 0.0;
                    let mut flux_0 = 0.0;
                    for j in 0..2 {
                        for be in 0..2 {
                            flux_e += aa.get(i, j, al, be) * ge[be][j];
                            flux_0 += ahat.a_hat.get(i, j, al, be) * g0[be][j];
                        }
                    }
                    acc += w * (flux_e - flux_0) * p[i][al];
                }
            }
        });
        out.push(FluxRow { eps, pairing_err: acc.abs() });
    }
    Ok(out)
}

/// Boundary-layer gradient diagnostic: ||grad u||_{L2(Omega_{2 eps})} and
/// its ratio to sqrt(eps) (the quantity the duality argument bounds).
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryLayerProfile {
    pub eps: f64,
    pub strip_h1: f64,
    pub ratio: f64,
}

pub fn boundary_layer_profile(
    flow: &FlowField,
    eps: f64,
) -> Result<BoundaryLayerProfile, RatesError> {
    let strip_h1 = grid::strip_h1_seminorm(&flow.u, 2.0 * eps)?;
    Ok(BoundaryLayerProfile { eps, strip_h1, ratio: strip_h1 / eps.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn fit_slope_recovers_exact_powers() {
        let pts: Vec<(f64, f64)> = [0.25, 0.125, 0.0625, 0.03125]
            .iter()
            .map(|&e| (e, e))
            .collect();
        let f = fit_slope(&pts).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);

        let pts: Vec<(f64, f64)> = [0.25, 0.125, 0.0625, 0.03125]
            .iter()
            .map(|&e| (e, e.sqrt()))
            .collect();
        let f = fit_slope(&pts).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_slope_with_seeded_noise() {
        // err = 3 eps^{1.2} with 1% multiplicative noise lands in [1.1, 1.3]
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg_seed());
        let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.125, 0.0625, 0.03125]
            .iter()
            .map(|&e: &f64| {
                let noise: f64 = rng.gen_range(-1.0..1.0);
                (e, 3.0 * e.powf(1.2) * (1.0 + 0.01 * noise))
            })
            .collect();
        let f = fit_slope(&pts).unwrap();
        assert!(f.slope > 1.1 && f.slope < 1.3, "slope {}", f.slope);
    }

    fn cfg_seed() -> u64 {
        StudyConfig::default().seed
    }

    #[test]
    fn fit_slope_guards() {
        assert!(matches!(
            fit_slope(&[(0.5, 1.0), (0.25, 0.5)]),
            Err(RatesError::TooFewPoints(2))
        ));
        assert!(matches!(
            fit_slope(&[(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)]),
            Err(RatesError::NonpositiveError(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = StudyConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.eps_list = vec![0.125, 0.25];
        assert!(cfg.validate().is_err());
        cfg.eps_list = vec![0.6];
        assert!(cfg.validate().is_err());
        cfg.eps_list = vec![0.25];
        cfg.mesh_rule.factor = 4.0;
        assert!(cfg.validate().is_err());
        cfg = StudyConfig::default();
        cfg.cell_n = 7;
        assert!(cfg.validate().is_err());
        cfg = StudyConfig::default();
        cfg.data_spec = "wat".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = StudyConfig::default();
        let b = StudyConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = StudyConfig::default();
        c.seed = 8;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn default_data_is_compatible() {
        let data = default_data();
        let mesh = DomainMesh::new(16, 0).unwrap();
        let (defect, scale) = data.compatibility_defect(&mesh);
        assert!(defect <= 1e-10 * scale.max(1.0), "defect {defect}");
    }

    #[test]
    fn constant_family_study_hits_noise_floor() {
        let mut cfg = StudyConfig::default();
        cfg.family = FamilySpec { name: "constant".into(), params: vec![1.0] };
        cfg.eps_list = vec![0.5, 0.25, 0.125];
        cfg.cell_n = 8;
        let rep = run_study(&cfg).unwrap();
        assert!(rep.slopes.is_none());
        assert!(rep.flags.iter().any(|f| f.contains("noise-floor")));
        for r in &rep.rows {
            assert!(r.l2_u_err < 1e-8);
        }
    }

    #[test]
    fn csv_is_deterministic() {
        let mut cfg = StudyConfig::default();
        cfg.family = FamilySpec { name: "constant".into(), params: vec![1.0] };
        cfg.eps_list = vec![0.5, 0.25];
        cfg.cell_n = 8;
        let r1 = run_study(&cfg).unwrap();
        let r2 = run_study(&cfg).unwrap();
        let mut c1 = Vec::new();
        let mut c2 = Vec::new();
        r1.write_csv(&mut c1).unwrap();
        r2.write_csv(&mut c2).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn flux_pairing_zero_psi() {
        let mut cfg = StudyConfig::default();
        cfg.family = FamilySpec { name: "constant".into(), params: vec![1.0] };
        cfg.eps_list = vec![0.5, 0.25];
        cfg.cell_n = 8;
        let psi: MatrixClosure = Arc::new(|_| [[0.0; 2]; 2]);
        let rows = flux_convergence(&cfg, &psi).unwrap();
        for r in rows {
            assert_eq!(r.pairing_err, 0.0);
        }
    }
}
