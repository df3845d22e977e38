//! Full-plane limits: ε-continuation, growing disks, the scalar
//! topological equation, and the radial asymptotics of solutions.

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use faer::linalg::solvers::SolveLstsq;
use faer::Mat;
use serde::Serialize;

use crate::elliptic::{monotone_iteration, semilinear_newton_with, MonotoneEquation, NewtonSettings, ShiftedLaplacian};
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::params::{require_indefinite, CouplingMatrix, CouplingParams, Point, Regime, VortexConfiguration};
use crate::sources::{harmonic_correction, log_background, smooth_source};
use crate::variational::{
    recover_uv, NestedSolver, Problem, Setting, SolveReport, SolverSettings, VariationalState,
};

/// Regularization and domain schedules for the two limits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationSchedule {
    /// Strictly decreasing regularization parameters.
    pub epsilons: Vec<f64>,
    /// Strictly increasing disk radii.
    pub radii: Vec<f64>,
}

impl ContinuationSchedule {
    /// `ε_k = (2h)² 2^{−k}` for `k = 0..4` and radii `{4, 6, 8, 12}`.
    pub fn default_for_spacing(h: f64) -> Self {
        Self {
            epsilons: default_epsilons(h),
            radii: vec![4.0, 6.0, 8.0, 12.0],
        }
    }

    pub fn validate(&self, r0: f64) -> Result<()> {
        let dec = self.epsilons.windows(2).all(|w| w[1] < w[0]);
        let inc = self.radii.windows(2).all(|w| w[1] > w[0]);
        if self.epsilons.is_empty() || self.radii.is_empty() || !dec || !inc {
            return Err(Error::InvalidParameter(
                "schedules must be nonempty and strictly monotone".into(),
            ));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidParameter("epsilons must be positive".into()));
        }
        if self.radii[0] <= r0 {
            return Err(Error::InvalidParameter(format!(
                "all radii must exceed the largest vortex modulus {r0}"
            )));
        }
        Ok(())
    }
}

pub fn default_epsilons(h: f64) -> Vec<f64> {
    (0..5).map(|k| 4.0 * h * h * 0.5f64.powi(k)).collect()
}

fn disk_radius(grid: &Grid) -> Result<f64> {
    match grid.domain {
        crate::grid::DomainSpec::Disk { radius } => Ok(radius),
        _ => Err(Error::WrongGridKind("this operation needs a disk grid")),
    }
}

/// Solution of the scalar equation at each ε of the schedule.
#[derive(Debug, Clone)]
pub struct SingleEquationSolution {
    pub u: ScalarField,
    pub stages: Vec<(f64, ScalarField)>,
}

/// Solve `Δu = 8(eᵘ − 1) + Σ 4ε/(ε + |x − p_j|²)²` on a disk with `u = 0` on
/// the boundary, for each ε of `epsilons` in turn (warm-started).
///
/// The closed-form part `Σ ln((ε+r²)/(1+r²))` plus its harmonic correction is
/// subtracted, so the Newton unknown solves a problem with the smooth source
/// `Σ 4/(1+r²)²`.
pub fn single_equation_solve(
    points: &[Point],
    grid: &Arc<Grid>,
    epsilons: &[f64],
    settings: &NewtonSettings,
) -> Result<SingleEquationSolution> {
    let radius = disk_radius(grid)?;
    if let Some(p) = points.iter().find(|p| p.norm() >= radius - 1.0) {
        return Err(Error::InvalidParameter(format!(
            "vortex ({}, {}) must lie inside B_(R-1)",
            p.x, p.y
        )));
    }
    if epsilons.is_empty() {
        return Err(Error::InvalidParameter("empty epsilon schedule".into()));
    }
    let mut op = ShiftedLaplacian::new(grid.clone())?;
    let h = smooth_source(points, grid);
    let mut u = ScalarField::zeros(grid.clone());
    let mut stages = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let u0 = log_background(points, eps, grid)?;
        let big_u0 = harmonic_correction(&u0.map(|v| -v), 1e-12)?;
        let f0: Vec<f64> = (0..grid.len())
            .map(|k| if grid.is_pinned(k) { 0.0 } else { u0.values()[k] + big_u0.values()[k] })
            .collect();
        let nonlin = |k: usize, s: f64| {
            let e = 8.0 * (f0[k] + s).min(700.0).exp();
            (e - 8.0 + h.values()[k], e)
        };
        let guess = ScalarField::new(
            grid.clone(),
            (0..grid.len()).map(|k| u.values()[k] - f0[k]).collect(),
        )?;
        let (w, _) = semilinear_newton_with(&mut op, &nonlin, &guess, settings)?;
        u = ScalarField::new(grid.clone(), (0..grid.len()).map(|k| f0[k] + w.values()[k]).collect())?;
        stages.push((eps, u.clone()));
    }
    Ok(SingleEquationSolution { u, stages })
}

/// `λ = (4/π) ∫(1 − eᵘ) − 2N₊` by midpoint quadrature over the domain.
pub fn lambda_estimate(u: &ScalarField, n_plus: usize) -> f64 {
    let w = u.grid().weights();
    let integral: f64 = u.values().iter().zip(&w).map(|(v, w)| w * (1.0 - v.exp())).sum();
    4.0 / PI * integral - 2.0 * n_plus as f64
}

/// `∫ 8(1 − eᵘ)`, which should equal `4πN₊` for topological solutions.
pub fn mass_integral(u: &ScalarField) -> f64 {
    let w = u.grid().weights();
    u.values().iter().zip(&w).map(|(v, w)| 8.0 * w * (1.0 - v.exp())).sum()
}

/// One solve of the continuation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub radius: f64,
    pub epsilon: f64,
    pub outer_iterations: usize,
    pub residual_outer: f64,
    /// `max |ũ|, |ṽ|` on the circle `|x| = R − 1`.
    pub boundary_indicator: f64,
    /// Largest interior value of `ũ = u + ln 2`.
    pub max_u_shifted: f64,
    pub max_v_shifted: f64,
}

/// Result of the full-plane continuation: the final disk solve and its history.
#[derive(Debug, Clone)]
pub struct FullPlaneSolution {
    pub problem: Problem,
    pub state: VariationalState,
    pub u: ScalarField,
    pub v: ScalarField,
    pub stages: Vec<StageRecord>,
    pub report: SolveReport,
}

/// State whose recovered fields are `ũ`, `ṽ` (given at every node of the
/// problem's grid) on the problem's background.
pub fn state_from_shifted(problem: &Problem, ut: &[f64], vt: &[f64]) -> Result<VariationalState> {
    let Setting::Bounded(bg) = &problem.setting else {
        return Err(Error::WrongGridKind("shifted warm starts are for bounded problems"));
    };
    let grid = problem.grid.clone();
    let mut xi = vec![0.0; grid.len()];
    let mut zeta = vec![0.0; grid.len()];
    for &k in grid.free_nodes() {
        let u3 = ut[k] - bg.f0.values()[k];
        let v3 = vt[k] - bg.g0.values()[k];
        xi[k] = u3 + v3;
        zeta[k] = u3 - v3;
    }
    Ok(VariationalState {
        xi: ScalarField::new(grid.clone(), xi)?,
        zeta: ScalarField::new(grid, zeta)?,
        xibar: 0.0,
        zetabar: 0.0,
    })
}

fn ring_max(grid: &Grid, fields: &[&[f64]], radius: f64) -> f64 {
    let h = grid.h1.max(grid.h2);
    grid.free_nodes()
        .iter()
        .filter(|&&k| (grid.radius_of(k) - radius).abs() < h)
        .map(|&k| fields.iter().map(|f| f[k].abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

fn interior_max(grid: &Grid, f: &[f64]) -> f64 {
    grid.free_nodes().iter().map(|&k| f[k]).fold(f64::NEG_INFINITY, f64::max)
}

/// Reject couplings for which no full-plane solution is available.
pub fn require_full_plane_regime(params: CouplingParams) -> Result<CouplingMatrix> {
    let (k, regime) = require_indefinite(params)?;
    if regime == Regime::IndefiniteB {
        return Err(Error::RegimeBFullPlane { det: k.det });
    }
    Ok(k)
}

/// Solve on the disks of `schedule.radii` (each through the ε schedule) with
/// warm starts, using grid spacing `h` throughout.
pub fn domain_continuation(
    params: CouplingParams,
    vortices: &VortexConfiguration,
    schedule: &ContinuationSchedule,
    h: f64,
    settings: SolverSettings,
) -> Result<FullPlaneSolution> {
    require_full_plane_regime(params)?;
    schedule.validate(vortices.max_modulus())?;
    let mut prev: Option<(Arc<Grid>, Vec<f64>, Vec<f64>)> = None;
    let mut stages = Vec::new();
    let mut last = None;
    for &radius in &schedule.radii {
        let grid = Arc::new(Grid::disk_with_spacing(radius, h)?);
        // ũ, ṽ carried over to the new grid, zero outside the previous disk
        let (mut ut, mut vt) = match &prev {
            None => (vec![0.0; grid.len()], vec![0.0; grid.len()]),
            Some((g_old, u_old, v_old)) => {
                let r_old = disk_radius(g_old)?;
                let carry = |f: &[f64]| -> Vec<f64> {
                    (0..grid.len())
                        .map(|k| {
                            let (x, y) = grid.coords(k);
                            if x.hypot(y) >= r_old {
                                0.0
                            } else {
                                g_old.interpolate(f, x, y).unwrap_or(0.0)
                            }
                        })
                        .collect()
                };
                (carry(u_old), carry(v_old))
            }
        };
        for &eps in &schedule.epsilons {
            let problem = Problem::bounded(params, vortices.clone(), grid.clone(), eps)?;
            let init = state_from_shifted(&problem, &ut, &vt)?;
            let mut solver = NestedSolver::new(problem, settings)?;
            let (state, report) = solver.solve(Some(&init))?;
            let problem = solver.problem;
            let (u, v) = recover_uv(&problem, &state);
            ut = u.values().iter().map(|x| x + LN_2).collect();
            vt = v.values().iter().map(|x| x + LN_2).collect();
            stages.push(StageRecord {
                radius,
                epsilon: eps,
                outer_iterations: report.iterations.len().saturating_sub(1),
                residual_outer: report.final_residual_outer,
                boundary_indicator: ring_max(&grid, &[&ut, &vt], radius - 1.0),
                max_u_shifted: interior_max(&grid, &ut),
                max_v_shifted: interior_max(&grid, &vt),
            });
            last = Some((problem, state, u, v, report));
        }
        prev = Some((grid, ut.clone(), vt.clone()));
    }
    let (problem, state, u, v, report) = last.expect("nonempty schedule");
    Ok(FullPlaneSolution {
        problem,
        state,
        u,
        v,
        stages,
        report,
    })
}

/// Outcome of the sub/supersolution comparison for `w`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub sweeps: usize,
    /// Largest interior value of the limit `w` (must be negative).
    pub max_w: f64,
    /// Smallest interior value of `w − ½(ũ + ṽ)` (must be nonnegative).
    pub min_gap: f64,
    pub pass: bool,
}

/// Run the monotone scheme for `Δw = 4(e^w − 1) + ½(S₁ + S₂)` from the
/// subsolution `½(ũ + ṽ)` of a converged bounded solve, below the
/// supersolution `w = 0`.
///
/// The closed-form background `½(f₀ + g₀)` is subtracted from `w` so the
/// iteration sees the smooth sources `½(h₁ + h₂)`.
pub fn sandwich_check(
    problem: &Problem,
    state: &VariationalState,
    tol: f64,
    max_iter: usize,
) -> Result<SandwichReport> {
    let Setting::Bounded(bg) = &problem.setting else {
        return Err(Error::WrongGridKind("the sandwich bound concerns bounded problems"));
    };
    let grid = problem.grid.clone();
    let n = grid.len();
    let half_bg: Vec<f64> = (0..n)
        .map(|k| 0.5 * (bg.f0.values()[k] + bg.g0.values()[k]))
        .collect();
    let xi = state.full_xi();
    let sub = ScalarField::new(grid.clone(), xi.iter().map(|x| 0.5 * x).collect())?;
    let sup = ScalarField::new(
        grid.clone(),
        (0..n).map(|k| if grid.is_pinned(k) { 0.0 } else { -half_bg[k] }).collect(),
    )?;
    let eq = MonotoneEquation {
        coeff: half_bg.iter().map(|b| 4.0 * b.exp()).collect(),
        constant: -4.0,
        sources: (0..n)
            .map(|k| 0.5 * (bg.h1.values()[k] + bg.h2.values()[k]))
            .collect(),
    };
    let (omega, rep) = monotone_iteration(&sub, &sup, &eq, tol, max_iter)?;
    let mut max_w = f64::NEG_INFINITY;
    let mut min_gap = f64::INFINITY;
    for &k in grid.free_nodes() {
        let w = half_bg[k] + omega.values()[k];
        max_w = max_w.max(w);
        min_gap = min_gap.min(omega.values()[k] - sub.values()[k]);
    }
    Ok(SandwichReport {
        sweeps: rep.sweeps,
        max_w,
        min_gap,
        pass: max_w < 0.0 && min_gap >= -1e-9,
    })
}

/// Values of `field` at `n` equally spaced points of the circle of radius `r`
/// about the grid centre (points outside the node box are skipped).
pub fn circle_samples(grid: &Grid, values: &[f64], r: f64, n: usize) -> Vec<f64> {
    let (cx, cy) = grid.center();
    (0..n)
        .filter_map(|i| {
            let th = 2.0 * PI * i as f64 / n as f64;
            grid.interpolate(values, cx + r * th.cos(), cy + r * th.sin())
        })
        .collect()
}

fn exp_quotient(s: f64) -> f64 {
    if s == 0.0 {
        1.0
    } else {
        (s.exp() - 1.0).abs() / s.abs().max(1e-300)
    }
}

/// `Φ(r) = 4 min_{|x|=r} [(k₁₂/2)|e^ṽ − 1|/|ṽ| + (k₁₁/2)|e^ũ − 1|/|ũ|]` at each radius.
pub fn phi_profile(
    u: &ScalarField,
    v: &ScalarField,
    coupling: &CouplingMatrix,
    radii: &[f64],
    n_angles: usize,
) -> Result<Vec<(f64, f64)>> {
    if !u.same_grid(v) {
        return Err(Error::GridMismatch);
    }
    let grid = u.grid();
    let n_angles = n_angles.max(64);
    let ut: Vec<f64> = u.values().iter().map(|x| x + LN_2).collect();
    let vt: Vec<f64> = v.values().iter().map(|x| x + LN_2).collect();
    let mut out = Vec::with_capacity(radii.len());
    for &r in radii {
        let su = circle_samples(grid, &ut, r, n_angles);
        let sv = circle_samples(grid, &vt, r, n_angles);
        if su.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let phi = su
            .iter()
            .zip(&sv)
            .map(|(&a, &b)| 4.0 * (0.5 * coupling.k12 * exp_quotient(b) + 0.5 * coupling.k11 * exp_quotient(a)))
            .fold(f64::INFINITY, f64::min);
        out.push((r, phi));
    }
    Ok(out)
}

/// Radial comparison function on a uniform mesh.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BellmanSolution {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
}

fn interp_profile(profile: &[(f64, f64)], t: f64) -> f64 {
    if t <= profile[0].0 {
        return profile[0].1;
    }
    for win in profile.windows(2) {
        let ((t0, p0), (t1, p1)) = (win[0], win[1]);
        if t <= t1 {
            return p0 + (p1 - p0) * (t - t0) / (t1 - t0);
        }
    }
    profile[profile.len() - 1].1
}

/// Solve `w'' + w'/t − (λ + Φ_s(t)) w = 0` on `[t0, t_end]` with `λ = 4`,
/// `Φ_s = Φ − 4`, `w(t0) = alpha0`, `w(t_end) = 0`, by second-order finite
/// differences on `n_intervals` cells.
pub fn bellman_ode_solve(
    profile: &[(f64, f64)],
    t0: f64,
    t_end: f64,
    alpha0: f64,
    n_intervals: usize,
) -> Result<BellmanSolution> {
    if profile.is_empty() {
        return Err(Error::SingularProfile("empty profile"));
    }
    if profile.iter().any(|(r, p)| !r.is_finite() || !p.is_finite()) {
        return Err(Error::SingularProfile("non-finite profile values"));
    }
    if profile.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::SingularProfile("profile radii must increase"));
    }
    if profile.iter().any(|&(_, p)| p < 0.0) {
        return Err(Error::SingularProfile("negative potential"));
    }
    let tail: f64 = profile
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * ((w[0].1 - 4.0).abs() + (w[1].1 - 4.0).abs()))
        .sum();
    if !tail.is_finite() {
        return Err(Error::SingularProfile("non-integrable tail"));
    }
    if !(t0 > 0.0 && t_end > t0 && n_intervals >= 2) {
        return Err(Error::InvalidParameter("need 0 < t0 < t_end and at least two cells".into()));
    }
    let m = n_intervals;
    let dt = (t_end - t0) / m as f64;
    let t: Vec<f64> = (0..=m).map(|i| t0 + i as f64 * dt).collect();
    let lambda = 4.0;
    // tridiagonal system for interior unknowns 1..m-1
    let n = m - 1;
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let ti = t[i + 1];
        let phi_s = interp_profile(profile, ti) - 4.0;
        lower[i] = 1.0 / (dt * dt) - 1.0 / (2.0 * ti * dt);
        upper[i] = 1.0 / (dt * dt) + 1.0 / (2.0 * ti * dt);
        diag[i] = -2.0 / (dt * dt) - (lambda + phi_s);
    }
    rhs[0] -= lower[0] * alpha0;
    // Thomas algorithm
    for i in 1..n {
        let f = lower[i] / diag[i - 1];
        diag[i] -= f * upper[i - 1];
        rhs[i] -= f * rhs[i - 1];
    }
    let mut interior = vec![0.0; n];
    interior[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        interior[i] = (rhs[i] - upper[i] * interior[i + 1]) / diag[i];
    }
    let mut w = Vec::with_capacity(m + 1);
    w.push(alpha0);
    w.extend(interior);
    w.push(0.0);
    Ok(BellmanSolution { t, w })
}

/// `e^{−2t} t^{−1/2}`.
pub fn decay_model(t: f64) -> f64 {
    (-2.0 * t).exp() / t.sqrt()
}

/// `(min, max)` of `w₀/W₀` over mesh points in `[a, b]`.
pub fn ratio_band(sol: &BellmanSolution, a: f64, b: f64) -> Option<(f64, f64)> {
    let ratios: Vec<f64> = sol
        .t
        .iter()
        .zip(&sol.w)
        .filter(|(t, _)| **t >= a - 1e-12 && **t <= b + 1e-12)
        .map(|(t, w)| w / decay_model(*t))
        .collect();
    if ratios.is_empty() {
        return None;
    }
    Some((
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ))
}

/// Least-squares fits of the decay of a topological solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    /// Rate of `ln m(r) + ½ ln r = −rate·r + ln C`.
    pub rate: f64,
    /// Power from the free fit `ln m(r) = ln C − rate·r + power·ln r`.
    pub power: f64,
    pub free_rate: f64,
    pub c: f64,
    pub window: [f64; 2],
    /// Coefficient of determination of the `r^{−1/2}` model.
    pub r2: f64,
    /// Same for the pure exponential `ln m = −rate·r + ln C`.
    pub r2_pure_exponential: f64,
    pub pure_exponential_rate: f64,
    /// Rate of the same `r^{−1/2}` model fitted to gradient magnitudes.
    pub gradient_rate: f64,
    pub samples: usize,
}

fn lstsq(columns: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let a = Mat::from_fn(y.len(), columns.len(), |i, j| columns[j][i]);
    let b = Mat::from_fn(y.len(), 1, |i, _| y[i]);
    let x = a.qr().solve_lstsq(&b);
    (0..columns.len()).map(|j| x[(j, 0)]).collect()
}

fn r_squared(y: &[f64], fit: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fit).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Central-difference gradient magnitude at free nodes (zero elsewhere).
pub fn gradient_magnitude(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let n2 = grid.n2;
    let nodes: Vec<usize> = if grid.is_periodic() {
        (0..grid.len()).collect()
    } else {
        grid.free_nodes().to_vec()
    };
    for k in nodes {
        let (i, j) = (k / n2, k % n2);
        let ip = grid.index((i + 1) % grid.n1, j);
        let im = grid.index((i + grid.n1 - 1) % grid.n1, j);
        let jp = grid.index(i, (j + 1) % n2);
        let jm = grid.index(i, (j + n2 - 1) % n2);
        let gx = (f[ip] - f[im]) / (2.0 * grid.h1);
        let gy = (f[jp] - f[jm]) / (2.0 * grid.h2);
        out[k] = gx.hypot(gy);
    }
    out
}

/// Fit the circle maxima of `max(|ũ|, |ṽ|)` (and of their gradients) over
/// `window`, sampling radii at the grid spacing.
pub fn decay_fit(u: &ScalarField, v: &ScalarField, window: [f64; 2], r0: f64) -> Result<DecayFit> {
    if !u.same_grid(v) {
        return Err(Error::GridMismatch);
    }
    let ut: Vec<f64> = u.values().iter().map(|x| x + LN_2).collect();
    let vt: Vec<f64> = v.values().iter().map(|x| x + LN_2).collect();
    decay_fit_shifted(u.grid(), &ut, &vt, window, r0)
}

/// As [`decay_fit`] for fields that are already shifted (decaying to zero).
pub fn decay_fit_shifted(grid: &Grid, ut: &[f64], vt: &[f64], window: [f64; 2], r0: f64) -> Result<DecayFit> {
    let [r_min, r_max] = window;
    let outer = match grid.domain {
        crate::grid::DomainSpec::Disk { radius } => radius - 1.0,
        crate::grid::DomainSpec::Rectangle { lx, ly } => 0.5 * lx.min(ly) - 1.0,
        crate::grid::DomainSpec::Torus { tau1, tau2 } => 0.5 * tau1.min(tau2) - 1.0,
    };
    if r_min <= r0 + 1.0 {
        return Err(Error::WindowOutOfRange { r_min, r_max, reason: "window must start beyond R0 + 1" });
    }
    if r_max > outer || r_max <= r_min {
        return Err(Error::WindowOutOfRange { r_min, r_max, reason: "window must end inside the resolved region" });
    }
    let h = grid.h1.max(grid.h2);
    let count = ((r_max - r_min) / h).floor() as usize + 1;
    if count < 10 {
        return Err(Error::WindowOutOfRange { r_min, r_max, reason: "fewer than 10 sample radii" });
    }
    let radii: Vec<f64> = (0..count).map(|i| r_min + i as f64 * (r_max - r_min) / (count - 1) as f64).collect();
    let n_angles = 128;
    let mag: Vec<f64> = ut.iter().zip(vt).map(|(a, b)| a.abs().max(b.abs())).collect();
    let gu = gradient_magnitude(grid, ut);
    let gv = gradient_magnitude(grid, vt);
    let gmag: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| a.max(*b)).collect();
    let circle_max = |f: &[f64], r: f64| {
        circle_samples(grid, f, r, n_angles).into_iter().fold(0.0, f64::max)
    };
    let y: Vec<f64> = radii.iter().map(|&r| circle_max(&mag, r).max(1e-300).ln()).collect();
    let yg: Vec<f64> = radii.iter().map(|&r| circle_max(&gmag, r).max(1e-300).ln()).collect();
    let ones = vec![1.0; count];
    let neg_r: Vec<f64> = radii.iter().map(|r| -r).collect();
    let ln_r: Vec<f64> = radii.iter().map(|r| r.ln()).collect();

    let y_corr: Vec<f64> = y.iter().zip(&ln_r).map(|(a, l)| a + 0.5 * l).collect();
    let fixed = lstsq(&[ones.clone(), neg_r.clone()], &y_corr);
    let fixed_pred: Vec<f64> = (0..count).map(|i| fixed[0] - fixed[1] * radii[i] - 0.5 * ln_r[i]).collect();
    let pure = lstsq(&[ones.clone(), neg_r.clone()], &y);
    let pure_pred: Vec<f64> = (0..count).map(|i| pure[0] - pure[1] * radii[i]).collect();
    let free = lstsq(&[ones.clone(), neg_r.clone(), ln_r.clone()], &y);
    let yg_corr: Vec<f64> = yg.iter().zip(&ln_r).map(|(a, l)| a + 0.5 * l).collect();
    let grad = lstsq(&[ones, neg_r], &yg_corr);

    Ok(DecayFit {
        rate: fixed[1],
        power: free[2],
        free_rate: free[1],
        c: fixed[0].exp(),
        window,
        r2: r_squared(&y, &fixed_pred),
        r2_pure_exponential: r_squared(&y, &pure_pred),
        pure_exponential_rate: pure[1],
        gradient_rate: grad[1],
        samples: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_equation_without_vortices_is_zero() {
        let g = Arc::new(Grid::disk(3.0, 41).unwrap());
        let sol = single_equation_solve(&[], &g, &[0.1], &NewtonSettings::default()).unwrap();
        assert!(sol.u.max_abs() < 1e-12);
        assert_eq!(lambda_estimate(&sol.u, 0), 0.0);
    }

    #[test]
    fn lambda_of_constant_field() {
        let g = Arc::new(Grid::rectangle(2.0, 3.0, 21, 31).unwrap());
        let u = ScalarField::constant(g.clone(), -LN_2);
        let area: f64 = g.weights().iter().sum();
        assert!((lambda_estimate(&u, 0) - 4.0 / PI * area / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_vortex_is_negative_and_radially_increasing() {
        let g = Arc::new(Grid::disk(6.0, 121).unwrap());
        let h = g.h1;
        let sol = single_equation_solve(&[Point::new(0.0, 0.0)], &g, &default_epsilons(h), &NewtonSettings::default()).unwrap();
        for &k in g.free_nodes() {
            assert!(sol.u.values()[k] < 0.0);
        }
        let c = 60;
        for j in c + 1..g.n2 - 1 {
            let k = g.index(c, j);
            if !g.is_pinned(k + 1) {
                assert!(sol.u.values()[k + 1] >= sol.u.values()[k] - 1e-12);
            }
        }
        let mass = mass_integral(&sol.u);
        assert!((mass - 4.0 * PI).abs() < 0.02 * 4.0 * PI, "mass {mass}");
    }

    #[test]
    fn phi_of_ground_state_is_four() {
        let g = Arc::new(Grid::disk(5.0, 51).unwrap());
        let u = ScalarField::constant(g.clone(), -LN_2);
        let k = crate::params::build_coupling(CouplingParams::new(1.0, -0.5).unwrap()).unwrap();
        let prof = phi_profile(&u, &u, &k, &[1.0, 2.0, 3.0], 64).unwrap();
        for (_, p) in prof {
            assert!((p - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bellman_flat_profile_matches_bessel_decay() {
        let profile = vec![(0.5, 4.0), (20.0, 4.0)];
        let (t0, t_end) = (1.0, 14.0);
        let sol = bellman_ode_solve(&profile, t0, t_end, 1.0, 4000).unwrap();
        let (lo, hi) = ratio_band(&sol, t0 + 2.0, t_end - 2.0).unwrap();
        assert!(hi / lo < 1.05, "band {lo} {hi}");
        let zero = bellman_ode_solve(&profile, t0, t_end, 0.0, 100).unwrap();
        assert!(zero.w.iter().all(|&w| w == 0.0));
        assert!(bellman_ode_solve(&[(1.0, f64::NAN)], 1.0, 2.0, 1.0, 10).is_err());
    }

    #[test]
    fn decay_fit_recovers_synthetic_model() {
        let g = Arc::new(Grid::disk(8.0, 513).unwrap());
        let ut: Vec<f64> = (0..g.len())
            .map(|k| {
                let r = g.radius_of(k).max(1e-3);
                0.7 * decay_model(r)
            })
            .collect();
        let fit = decay_fit_shifted(&g, &ut, &ut, [3.0, 6.0], 0.0).unwrap();
        assert!((fit.free_rate - 2.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.power + 0.5).abs() < 1e-3, "{fit:?}");
        assert!((fit.rate - 2.0).abs() < 1e-3);
        assert!((fit.gradient_rate - 2.0).abs() < 0.02);
        assert!(fit.r2 > fit.r2_pure_exponential);
        assert!(decay_fit_shifted(&g, &ut, &ut, [0.5, 6.0], 0.0).is_err());
        assert!(decay_fit_shifted(&g, &ut, &ut, [3.0, 7.5], 0.0).is_err());
    }
}
