use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use csvortex::elliptic::{laplacian, poisson_solve_periodic};
use csvortex::params::{alpha_beta, threshold_area};
use csvortex::variational::{nested_minimize, recover_uv, Problem, SolverSettings};
use csvortex::{build_coupling, classify_regime, CouplingParams, Grid, Point, Regime, ScalarField, VortexConfiguration};

use crate::config::parse_config;

const SAMPLE: &str = "\
[problem]
p = 1
q = -0.5
domain = disk
radius = 8
upper = (0.5, 0); (-0.5, 0)
lower = (0, 1)
[grid]
n1 = 129
[solver]
epsilons = 1e-2; 5e-3
";

type Check = (&'static str, fn() -> Result<String, String>);

fn vortex_free_torus() -> Result<String, String> {
    let params = CouplingParams::new(1.0, -0.5).map_err(|e| e.to_string())?;
    let grid = Arc::new(Grid::torus(2.0 * PI, 2.0 * PI, 32, 32).map_err(|e| e.to_string())?);
    let problem = Problem::torus(params, VortexConfiguration::default(), grid, 0.1).map_err(|e| e.to_string())?;
    let (state, report) = nested_minimize(problem.clone(), SolverSettings::default(), None).map_err(|e| e.to_string())?;
    let (u, v) = recover_uv(&problem, &state);
    let err = u.values().iter().chain(v.values()).map(|x| (x + LN_2).abs()).fold(0.0, f64::max);
    if report.converged && err < 1e-8 {
        Ok(format!("|u + ln 2| <= {err:.1e}"))
    } else {
        Err(format!("converged {}, deviation {err:.3e}", report.converged))
    }
}

fn periodic_poisson() -> Result<String, String> {
    let grid = Arc::new(Grid::torus(2.0 * PI, 2.0 * PI, 64, 64).map_err(|e| e.to_string())?);
    let rhs = ScalarField::from_fn(grid.clone(), |x, y| x.sin() * (2.0 * y).cos());
    let sol = poisson_solve_periodic(&rhs).map_err(|e| e.to_string())?;
    let back = laplacian(&grid, sol.values());
    let err = back.iter().zip(rhs.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err < 1e-10 {
        Ok(format!("round trip error {err:.1e}"))
    } else {
        Err(format!("round trip error {err:.3e}"))
    }
}

fn threshold() -> Result<String, String> {
    let params = CouplingParams::new(1.0, -0.5).map_err(|e| e.to_string())?;
    let vort = VortexConfiguration::new(vec![Point::new(0.1, 0.1); 2], vec![Point::new(0.2, 0.2)]);
    let t = threshold_area(params, &vort);
    let below = alpha_beta(0.99 * t, params, &vort).map_err(|e| e.to_string())?;
    let above = alpha_beta(1.01 * t, params, &vort).map_err(|e| e.to_string())?;
    if !below.feasible() && above.feasible() {
        Ok(format!("threshold {t:.6}"))
    } else {
        Err("feasibility does not flip at the threshold".into())
    }
}

fn regimes() -> Result<String, String> {
    let classify = |p, q| -> Result<Regime, String> {
        let k = build_coupling(CouplingParams::new(p, q).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        Ok(classify_regime(&k))
    };
    let got = [classify(1.0, -0.5)?, classify(1.0, -2.0)?, classify(1.0, 0.5)?];
    if got == [Regime::IndefiniteA, Regime::IndefiniteB, Regime::PositiveDefinite] {
        Ok("A, B and positive-definite cases".into())
    } else {
        Err(format!("got {got:?}"))
    }
}

fn config() -> Result<String, String> {
    let cfg = parse_config(SAMPLE, &[]).map_err(|e| e.to_string())?;
    let v = &cfg.problem.vortices;
    if v.n1() == 2 && v.n2() == 1 && cfg.solver.epsilons.as_ref().is_some_and(|e| e.len() == 2) {
        Ok("sample configuration parsed".into())
    } else {
        Err("sample configuration parsed incorrectly".into())
    }
}

/// Run every check; exit code 0 when all pass, 2 otherwise.
pub fn run(quiet: bool) -> u8 {
    let checks: [Check; 5] = [
        ("regime classification", regimes),
        ("configuration parser", config),
        ("existence threshold", threshold),
        ("periodic Poisson", periodic_poisson),
        ("vortex-free torus", vortex_free_torus),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        if !quiet || tag == "FAIL" {
            println!("selftest {name}: {tag} ({detail})");
        }
    }
    if failures == 0 { 0 } else { 2 }
}
