// temporary probe: dual-corrector residual convergence under refinement
use stokeshom::cell::*;
use stokeshom::coeff::builtin_family;
use stokeshom::grid::CellGrid;

fn main() {
    let a = builtin_family("trig", &[0.5, 0.4]).unwrap();
    let mut prev: Option<(f64, f64)> = None;
    for n in [16usize, 32, 64, 128] {
        let grid = CellGrid::new(n).unwrap();
        let t0 = std::time::Instant::now();
        let c = solve_cell(&a, &grid, 1e-10).unwrap();
        let ahat = effective_tensor(&a, &c, &grid);
        let bf = b_field(&a, &c, &ahat, &grid);
        let dc = dual_correctors(&bf, &c, &grid, 1e-10).unwrap();
        let r = dual_residuals(&bf, &c, &dc);
        let (orders, op) = match prev {
            Some((d, p)) => (
                format!("order {:.2}", (d / r.decomposition).log2()),
                format!("order {:.2}", (p / r.pressure_relation).log2()),
            ),
            None => ("".into(), "".into()),
        };
        println!(
            "n={n:4}  decomp={:.4e} {orders}  prel={:.4e} {op}  ({:.1}s)  ahat00={:.8}",
            r.decomposition,
            r.pressure_relation,
            t0.elapsed().as_secs_f64(),
            ahat.a_hat.get(0, 0, 0, 0),
        );
        prev = Some((r.decomposition, r.pressure_relation));
    }
}
