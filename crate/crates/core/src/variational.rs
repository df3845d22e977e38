//! The nested constrained problem in the variables `ξ = u₃ + v₃`, `ζ = u₃ − v₃`.
//!
//! On both bounded domains and tori the transformed system reads
//!
//! ```text
//! Δξ = a (e^F + e^G) − 8 + s₊        F = f₀ + (ξ + ζ)/2
//! Δζ = b det K (e^F − e^G) + s₋      G = g₀ + (ξ − ζ)/2
//! ```
//!
//! with `(a, b) = (4, 1)` on bounded domains (shifted fields, regularized
//! sources `s± = h₁ ± h₂`) and `(a, b) = (8, 2)` on tori (unshifted fields,
//! `s± = 4πN±/|Ω|`). Both are the Euler–Lagrange equations of
//!
//! ```text
//! I(ξ, ζ) = ∫ (det K/8)|∇ξ|² + ½|∇ζ|² + c det K (e^F + e^G) − 2 det K ξ
//!             + (det K/4) s₊ ξ + s₋ ζ,              c = a/2.
//! ```
//!
//! The first equation (the admissibility constraint) is solved exactly for
//! `ξ` given `ζ`; the second is the gradient of the reduced functional
//! `ζ ↦ I(ξ(ζ), ζ)`.
//!
//! Two outer iterations are available (see [`OuterMethod`]). On tori the
//! reduced functional is minimized by Barzilai–Borwein descent with an
//! `(−Δ + σ)⁻¹` preconditioner. On bounded domains the minimizer is not the
//! topological branch (one layer saturates at `e^v = 1/k₁₁`), and the branch
//! continued from the ground state is a saddle of the reduced functional, so
//! reduced Newton steps are used there.

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use serde::Serialize;

use crate::elliptic::{
    laplacian, semilinear_newton_with, NewtonReport, NewtonSettings, ShiftedLaplacian, SparsePattern,
};
use crate::error::{Error, Result};
use crate::grid::{max_abs, Grid, ScalarField};
use crate::params::{
    alpha_beta, require_indefinite, CouplingMatrix, CouplingParams, Regime, VortexConfiguration,
};
use crate::sources::{torus_background, RegularizedBackground, TorusBackground};
use crate::elliptic::PeriodicPoisson;

/// Exponent arguments above this trigger [`Error::Overflow`].
pub const EXP_GUARD: f64 = 700.0;

#[inline]
fn guarded_exp(x: f64) -> Result<f64> {
    if x > EXP_GUARD || x.is_nan() {
        Err(Error::Overflow { value: x })
    } else {
        Ok(x.exp())
    }
}

/// Background data of the two settings.
#[derive(Debug, Clone)]
pub enum Setting {
    Bounded(RegularizedBackground),
    Torus {
        background: TorusBackground,
        alpha: f64,
        beta: f64,
    },
}

/// A fully specified transformed problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub params: CouplingParams,
    pub coupling: CouplingMatrix,
    pub regime: Regime,
    pub vortices: VortexConfiguration,
    pub grid: Arc<Grid>,
    pub setting: Setting,
    s_plus: Vec<f64>,
    s_minus: Vec<f64>,
    f0: Vec<f64>,
    g0: Vec<f64>,
    weights: Vec<f64>,
}

impl Problem {
    /// Bounded-domain problem (rectangle or disk) with regularization `epsilon`.
    pub fn bounded(
        params: CouplingParams,
        vortices: VortexConfiguration,
        grid: Arc<Grid>,
        epsilon: f64,
    ) -> Result<Self> {
        let (coupling, regime) = require_indefinite(params)?;
        if grid.is_periodic() {
            return Err(Error::WrongGridKind("bounded problems need a Dirichlet grid"));
        }
        let bg = RegularizedBackground::build(&vortices, epsilon, &grid, 1e-12)?;
        Ok(Self::from_bounded_background(params, coupling, regime, vortices, grid, bg))
    }

    fn from_bounded_background(
        params: CouplingParams,
        coupling: CouplingMatrix,
        regime: Regime,
        vortices: VortexConfiguration,
        grid: Arc<Grid>,
        bg: RegularizedBackground,
    ) -> Self {
        let s_plus = bg.h1.values().iter().zip(bg.h2.values()).map(|(a, b)| a + b).collect();
        let s_minus = bg.h1.values().iter().zip(bg.h2.values()).map(|(a, b)| a - b).collect();
        let weights = (0..grid.len())
            .map(|k| if grid.is_pinned(k) { 0.0 } else { grid.cell_area() })
            .collect();
        Self {
            params,
            coupling,
            regime,
            vortices,
            f0: bg.f0.values().to_vec(),
            g0: bg.g0.values().to_vec(),
            grid,
            setting: Setting::Bounded(bg),
            s_plus,
            s_minus,
            weights,
        }
    }

    /// Doubly periodic problem. Fails with [`Error::Infeasible`] below the area threshold.
    pub fn torus(
        params: CouplingParams,
        vortices: VortexConfiguration,
        grid: Arc<Grid>,
        epsilon: f64,
    ) -> Result<Self> {
        let (coupling, regime) = require_indefinite(params)?;
        if !grid.is_periodic() {
            return Err(Error::WrongGridKind("torus problems need a periodic grid"));
        }
        let area = grid.domain.area();
        let c = alpha_beta(area, params, &vortices)?;
        if !c.feasible() {
            return Err(Error::Infeasible { alpha: c.alpha, beta: c.beta });
        }
        let solver = PeriodicPoisson::new(grid.clone())?;
        let bg = torus_background(&vortices, &solver, epsilon)?;
        Ok(Self::from_torus_background(params, coupling, regime, vortices, grid, bg, c.alpha, c.beta))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_torus_background(
        params: CouplingParams,
        coupling: CouplingMatrix,
        regime: Regime,
        vortices: VortexConfiguration,
        grid: Arc<Grid>,
        bg: TorusBackground,
        alpha: f64,
        beta: f64,
    ) -> Self {
        let area = grid.domain.area();
        let n = grid.len();
        let sp = 4.0 * PI * vortices.n_plus() as f64 / area;
        let sm = 4.0 * PI * vortices.n_minus() as f64 / area;
        Self {
            params,
            coupling,
            regime,
            f0: bg.u0.values().to_vec(),
            g0: bg.v0.values().to_vec(),
            vortices,
            weights: vec![grid.cell_area(); n],
            grid,
            setting: Setting::Torus { background: bg, alpha, beta },
            s_plus: vec![sp; n],
            s_minus: vec![sm; n],
        }
    }

    /// The same problem with the two vortex lists exchanged.
    pub fn swapped(&self) -> Self {
        let vortices = self.vortices.swapped();
        match &self.setting {
            Setting::Bounded(bg) => Self::from_bounded_background(
                self.params,
                self.coupling,
                self.regime,
                vortices,
                self.grid.clone(),
                bg.swapped(),
            ),
            Setting::Torus { background, alpha, beta } => Self::from_torus_background(
                self.params,
                self.coupling,
                self.regime,
                vortices,
                self.grid.clone(),
                background.swapped(),
                *beta,
                *alpha,
            ),
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.setting, Setting::Torus { .. })
    }

    /// Coefficient `c` of the exponential terms in `I`.
    pub fn c_coeff(&self) -> f64 {
        if self.is_torus() { 4.0 } else { 2.0 }
    }

    fn a_coeff(&self) -> f64 {
        2.0 * self.c_coeff()
    }

    fn b_coeff(&self) -> f64 {
        0.5 * self.c_coeff()
    }

    pub fn det(&self) -> f64 {
        self.coupling.det
    }

    pub fn epsilon(&self) -> f64 {
        match &self.setting {
            Setting::Bounded(bg) => bg.epsilon,
            Setting::Torus { background, .. } => background.epsilon,
        }
    }

    /// Midpoint weights used by the functional and constraints.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn alpha_beta(&self) -> Option<(f64, f64)> {
        match self.setting {
            Setting::Torus { alpha, beta, .. } => Some((alpha, beta)),
            Setting::Bounded(_) => None,
        }
    }

    /// Exponents `F = f₀ + (ξ+ζ)/2`, `G = g₀ + (ξ−ζ)/2` from full fields.
    fn exponents(&self, xi: &[f64], zeta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.grid.len();
        let mut ef = Vec::with_capacity(n);
        let mut eg = Vec::with_capacity(n);
        for k in 0..n {
            ef.push(guarded_exp(self.f0[k] + 0.5 * (xi[k] + zeta[k]))?);
            eg.push(guarded_exp(self.g0[k] + 0.5 * (xi[k] - zeta[k]))?);
        }
        Ok((ef, eg))
    }
}

/// The pair `(ξ, ζ)`. On tori `xi`/`zeta` are mean-free and the means are kept
/// separately; on bounded domains the means are zero and the fields vanish at
/// pinned nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub xi: ScalarField,
    pub zeta: ScalarField,
    pub xibar: f64,
    pub zetabar: f64,
}

impl VariationalState {
    pub fn zero(grid: &Arc<Grid>) -> Self {
        Self {
            xi: ScalarField::zeros(grid.clone()),
            zeta: ScalarField::zeros(grid.clone()),
            xibar: 0.0,
            zetabar: 0.0,
        }
    }

    pub fn full_xi(&self) -> Vec<f64> {
        self.xi.values().iter().map(|v| v + self.xibar).collect()
    }

    pub fn full_zeta(&self) -> Vec<f64> {
        self.zeta.values().iter().map(|v| v + self.zetabar).collect()
    }

    /// Exchange of the two layers: `ζ ↦ −ζ`.
    pub fn swapped(&self) -> Self {
        Self {
            xi: self.xi.clone(),
            zeta: self.zeta.map(|v| -v),
            xibar: self.xibar,
            zetabar: -self.zetabar,
        }
    }
}

/// Functional value and residual norms at a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FunctionalValue {
    pub i: f64,
    pub residual_inner: f64,
    pub residual_outer: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn project_mean_free(v: &mut [f64]) -> f64 {
    let m = mean(v);
    v.iter_mut().for_each(|x| *x -= m);
    m
}

/// `Σ_edges (φ_a − φ_b)²/h² · h₁h₂`, whose gradient is `−2 Δ_h φ · h₁h₂`.
pub fn gradient_energy(grid: &Grid, phi: &[f64]) -> f64 {
    let (n1, n2) = (grid.n1, grid.n2);
    let c1 = 1.0 / (grid.h1 * grid.h1);
    let c2 = 1.0 / (grid.h2 * grid.h2);
    let mut e = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            let k = i * n2 + j;
            if i + 1 < n1 {
                e += c1 * (phi[k + n2] - phi[k]).powi(2);
            } else if grid.is_periodic() {
                e += c1 * (phi[j] - phi[k]).powi(2);
            }
            if j + 1 < n2 {
                e += c2 * (phi[k + 1] - phi[k]).powi(2);
            } else if grid.is_periodic() {
                e += c2 * (phi[i * n2] - phi[k]).powi(2);
            }
        }
    }
    e * grid.cell_area()
}

/// Discrete value of `I` at full fields `ξ`, `ζ`.
pub fn functional_i(problem: &Problem, state: &VariationalState) -> Result<f64> {
    let xi = state.full_xi();
    let zeta = state.full_zeta();
    functional_i_full(problem, &xi, &zeta)
}

fn functional_i_full(problem: &Problem, xi: &[f64], zeta: &[f64]) -> Result<f64> {
    let det = problem.det();
    let c = problem.c_coeff();
    let (ef, eg) = problem.exponents(xi, zeta)?;
    let grid = &problem.grid;
    let mut pot = 0.0;
    for k in 0..grid.len() {
        let w = problem.weights[k];
        if w == 0.0 {
            continue;
        }
        pot += w
            * (c * det * (ef[k] + eg[k]) - 2.0 * det * xi[k]
                + 0.25 * det * problem.s_plus[k] * xi[k]
                + problem.s_minus[k] * zeta[k]);
    }
    Ok(0.125 * det * gradient_energy(grid, xi) + 0.5 * gradient_energy(grid, zeta) + pot)
}

fn inner_residual_full(problem: &Problem, xi: &[f64], ef: &[f64], eg: &[f64]) -> Vec<f64> {
    let a = problem.a_coeff();
    let mut r = laplacian(&problem.grid, xi);
    for &k in problem.grid.free_nodes() {
        r[k] -= a * (ef[k] + eg[k]) - 8.0 + problem.s_plus[k];
    }
    r
}

fn outer_residual_full(problem: &Problem, zeta: &[f64], ef: &[f64], eg: &[f64]) -> Vec<f64> {
    let bd = problem.b_coeff() * problem.det();
    let mut r = laplacian(&problem.grid, zeta);
    for &k in problem.grid.free_nodes() {
        r[k] -= bd * (ef[k] - eg[k]) + problem.s_minus[k];
    }
    r
}

/// Residual of the admissibility constraint (the `ξ` equation).
pub fn inner_residual(problem: &Problem, state: &VariationalState) -> Result<ScalarField> {
    let xi = state.full_xi();
    let (ef, eg) = problem.exponents(&xi, &state.full_zeta())?;
    ScalarField::new(problem.grid.clone(), inner_residual_full(problem, &xi, &ef, &eg))
}

/// `Δ_h ζ − b det K (e^F − e^G) − s₋`: the second Euler–Lagrange residual.
pub fn outer_residual(problem: &Problem, state: &VariationalState) -> Result<ScalarField> {
    let zeta = state.full_zeta();
    let (ef, eg) = problem.exponents(&state.full_xi(), &zeta)?;
    ScalarField::new(problem.grid.clone(), outer_residual_full(problem, &zeta, &ef, &eg))
}

/// Nodal gradient of the reduced functional with respect to `ζ` (per unit
/// cell area): the negative of [`outer_residual`].
pub fn reduced_gradient(problem: &Problem, state: &VariationalState) -> Result<ScalarField> {
    Ok(outer_residual(problem, state)?.map(|v| -v))
}

pub fn evaluate(problem: &Problem, state: &VariationalState) -> Result<FunctionalValue> {
    Ok(FunctionalValue {
        i: functional_i(problem, state)?,
        residual_inner: inner_residual(problem, state)?.max_abs(),
        residual_outer: outer_residual(problem, state)?.max_abs(),
    })
}

/// Means `(ξ̄, ζ̄)` that make `∫e^{u₀+u₁} = α` and `∫e^{v₀+v₁} = β` hold exactly.
pub fn torus_mean_update(
    xitilde: &[f64],
    zetatilde: &[f64],
    background: &TorusBackground,
    alpha: f64,
    beta: f64,
    grid: &Grid,
) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Infeasible { alpha, beta });
    }
    let w = grid.cell_area();
    let u0 = background.u0.values();
    let v0 = background.v0.values();
    let mut a_int = 0.0;
    let mut b_int = 0.0;
    for k in 0..grid.len() {
        a_int += guarded_exp(u0[k] + 0.5 * (xitilde[k] + zetatilde[k]))?;
        b_int += guarded_exp(v0[k] + 0.5 * (xitilde[k] - zetatilde[k]))?;
    }
    let (la, lb) = ((a_int * w).ln(), (b_int * w).ln());
    let (lal, lbe) = (alpha.ln(), beta.ln());
    let xibar = (lal + lbe) - (la + lb);
    let zetabar = (lal - lbe) + (lb - la);
    Ok((xibar, zetabar))
}

/// Settings of the nested solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    /// Outer convergence threshold on `‖outer residual‖_∞`.
    pub tol_outer: f64,
    /// Inner (constraint) tolerance; 100× tighter than the outer one by default.
    pub tol_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Smallest outer damping factor before reporting a stall.
    pub min_step: f64,
    pub method: OuterMethod,
    /// Iteration cap of the descent method.
    pub max_descent: usize,
    /// Shift `σ` of the descent preconditioner `−Δ + σ`.
    pub preconditioner_shift: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_outer: 1e-8,
            tol_inner: 1e-10,
            max_outer: 100,
            max_inner: 50,
            min_step: 1e-12,
            method: OuterMethod::Auto,
            max_descent: 5000,
            preconditioner_shift: 1.0,
        }
    }
}

/// Outer iteration of [`NestedSolver::solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OuterMethod {
    /// Descent on tori, Newton on bounded domains.
    Auto,
    /// Preconditioned Barzilai–Borwein descent on the reduced functional
    /// with Armijo backtracking on `I`; `I` never increases.
    Descent,
    /// Reduced Newton steps with backtracking on the outer residual norm.
    Newton,
}

impl SolverSettings {
    fn newton(&self) -> NewtonSettings {
        NewtonSettings {
            tol_residual: self.tol_inner,
            max_iter: self.max_inner,
            min_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub functional: f64,
    pub residual_inner: f64,
    pub residual_outer: f64,
    pub step: f64,
    pub inner_iterations: usize,
}

/// History and verdict of a solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
    pub final_residual_inner: f64,
    pub final_residual_outer: f64,
    pub notes: Vec<String>,
}

/// Reusable solver: caches the sparse structures of the inner and coupled
/// linearizations across iterations.
pub struct NestedSolver {
    pub problem: Problem,
    pub settings: SolverSettings,
    inner_op: ShiftedLaplacian,
    coupled: Option<CoupledSystem>,
}

struct CoupledSystem {
    pattern: SparsePattern,
    /// `(row, col, kind)` where kind encodes how to fill the value.
    entries: Vec<(usize, usize, Entry)>,
    n_free: usize,
}

#[derive(Clone, Copy)]
enum Entry {
    Stencil(f64),
    XiXi(usize),
    XiZeta(usize),
    ZetaXi(usize),
    ZetaZeta(usize),
}

impl CoupledSystem {
    fn new(grid: &Grid) -> Result<Self> {
        let free = grid.free_nodes();
        let mut unknown = vec![usize::MAX; grid.len()];
        for (idx, &k) in free.iter().enumerate() {
            unknown[k] = idx;
        }
        let c1 = 1.0 / (grid.h1 * grid.h1);
        let c2 = 1.0 / (grid.h2 * grid.h2);
        let mut entries = Vec::with_capacity(12 * free.len());
        for (idx, &k) in free.iter().enumerate() {
            let (i, j) = (k / grid.n2, k % grid.n2);
            let (rx, rz) = (2 * idx, 2 * idx + 1);
            entries.push((rx, rx, Entry::XiXi(k)));
            entries.push((rx, rz, Entry::XiZeta(k)));
            entries.push((rz, rx, Entry::ZetaXi(k)));
            entries.push((rz, rz, Entry::ZetaZeta(k)));
            entries.push((rx, rx, Entry::Stencil(-2.0 * (c1 + c2))));
            entries.push((rz, rz, Entry::Stencil(-2.0 * (c1 + c2))));
            for (di, dj, c) in [(1isize, 0isize, c1), (-1, 0, c1), (0, 1, c2), (0, -1, c2)] {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                let nb = if grid.is_periodic() {
                    grid.index(ii.rem_euclid(grid.n1 as isize) as usize, jj.rem_euclid(grid.n2 as isize) as usize)
                } else {
                    grid.index(ii as usize, jj as usize)
                };
                let col = unknown[nb];
                if col != usize::MAX {
                    entries.push((rx, 2 * col, Entry::Stencil(c)));
                    entries.push((rz, 2 * col + 1, Entry::Stencil(c)));
                }
            }
        }
        let pairs: Vec<(usize, usize)> = entries.iter().map(|&(r, c, _)| (r, c)).collect();
        let pattern = SparsePattern::new(2 * free.len(), &pairs)?;
        Ok(Self {
            pattern,
            entries,
            n_free: free.len(),
        })
    }
}

impl NestedSolver {
    pub fn new(problem: Problem, settings: SolverSettings) -> Result<Self> {
        let inner_op = ShiftedLaplacian::new(problem.grid.clone())?;
        Ok(Self {
            problem,
            settings,
            inner_op,
            coupled: None,
        })
    }

    /// Solve the constraint equation for `ξ` given `ζ` (mean-free on tori),
    /// starting from `xi_guess`.
    pub fn inner_solve(
        &mut self,
        zeta: &ScalarField,
        xi_guess: &ScalarField,
    ) -> Result<(VariationalState, NewtonReport)> {
        if !zeta.same_grid(xi_guess) || !(Arc::ptr_eq(zeta.grid(), &self.problem.grid) || **zeta.grid() == *self.problem.grid) {
            return Err(Error::GridMismatch);
        }
        if self.problem.is_torus() {
            self.inner_solve_torus(zeta, xi_guess)
        } else {
            self.inner_solve_bounded(zeta, xi_guess)
        }
    }

    fn inner_solve_bounded(
        &mut self,
        zeta: &ScalarField,
        xi_guess: &ScalarField,
    ) -> Result<(VariationalState, NewtonReport)> {
        let p = &self.problem;
        let a = p.a_coeff();
        let z = zeta.values();
        let nonlin = |k: usize, s: f64| {
            let ef = (p.f0[k] + 0.5 * (s + z[k])).min(EXP_GUARD + 1.0).exp();
            let eg = (p.g0[k] + 0.5 * (s - z[k])).min(EXP_GUARD + 1.0).exp();
            let val = a * (ef + eg) - 8.0 + p.s_plus[k];
            if p.f0[k] + 0.5 * (s + z[k]) > EXP_GUARD || p.g0[k] + 0.5 * (s - z[k]) > EXP_GUARD {
                (f64::INFINITY, 0.5 * a * (ef + eg))
            } else {
                (val, 0.5 * a * (ef + eg))
            }
        };
        let mut guess = xi_guess.clone();
        let mut zeta_pinned_zero = zeta.clone();
        for k in 0..p.grid.len() {
            if p.grid.is_pinned(k) {
                guess.values_mut()[k] = 0.0;
                zeta_pinned_zero.values_mut()[k] = 0.0;
            }
        }
        let settings = self.settings.newton();
        let (xi, report) = semilinear_newton_with(&mut self.inner_op, &nonlin, &guess, &settings)?;
        Ok((
            VariationalState {
                xi,
                zeta: zeta_pinned_zero,
                xibar: 0.0,
                zetabar: 0.0,
            },
            report,
        ))
    }

    fn inner_solve_torus(
        &mut self,
        zeta: &ScalarField,
        xi_guess: &ScalarField,
    ) -> Result<(VariationalState, NewtonReport)> {
        let p = &self.problem;
        let grid = p.grid.clone();
        let Setting::Torus { background, alpha, beta } = &p.setting else {
            unreachable!()
        };
        let (alpha, beta) = (*alpha, *beta);
        let a = p.a_coeff();
        let w = grid.cell_area();
        let n = grid.len();
        let mut zt = zeta.values().to_vec();
        project_mean_free(&mut zt);
        let mut xt = xi_guess.values().to_vec();
        project_mean_free(&mut xt);

        let residual_at = |xt: &[f64], xb: f64, zb: f64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let xi: Vec<f64> = xt.iter().map(|v| v + xb).collect();
            let ze: Vec<f64> = zt.iter().map(|v| v + zb).collect();
            let (ef, eg) = p.exponents(&xi, &ze)?;
            let r = inner_residual_full(p, &xi, &ef, &eg);
            Ok((r, ef, eg))
        };

        let (mut xb, mut zb) = torus_mean_update(&xt, &zt, background, alpha, beta, &grid)?;
        let (mut res, mut ef, mut eg) = residual_at(&xt, xb, zb)?;
        let mut res_inf = max_abs(&res);
        let mut report = NewtonReport {
            iterations: 0,
            residual_history: vec![res_inf],
            steps: Vec::new(),
        };
        let settings = self.settings.newton();
        let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut converged = res_inf <= settings.tol_residual;
        let mut it = 0;
        while !converged && it < settings.max_iter {
            it += 1;
            let d: Vec<f64> = (0..n).map(|k| 0.5 * a * (ef[k] + eg[k])).collect();
            let fac = self.inner_op.factor(&d)?;
            let y1 = fac.solve(&res)?;
            let c: Vec<f64> = (0..n).map(|k| 0.5 * a * (ef[k] - eg[k])).collect();
            let y2 = fac.solve(&c)?;
            let mut gy1 = 0.0;
            let mut gy2 = 0.0;
            let mut s = 0.0;
            for k in 0..n {
                let g = 0.5 * w * (ef[k] - eg[k]);
                gy1 += g * y1[k];
                gy2 += g * y2[k];
                s += 0.5 * w * (ef[k] + eg[k]);
            }
            let dzb = -gy1 / (s - gy2);
            let delta: Vec<f64> = (0..n).map(|k| y1[k] - y2[k] * dzb).collect();
            let base = l2(&res);
            let mut t = 1.0;
            let accepted = loop {
                let mut trial: Vec<f64> = (0..n).map(|k| xt[k] + xb + t * delta[k]).collect();
                project_mean_free(&mut trial);
                let attempt = torus_mean_update(&trial, &zt, background, alpha, beta, &grid)
                    .and_then(|(txb, tzb)| residual_at(&trial, txb, tzb).map(|r| (txb, tzb, r)));
                if let Ok((txb, tzb, (tres, tef, teg))) = attempt {
                    let tl2 = l2(&tres);
                    if tl2.is_finite() && tl2 <= (1.0 - 1e-4 * t) * base {
                        break Some((trial, txb, tzb, tres, tef, teg));
                    }
                }
                t *= 0.5;
                if t < settings.min_step {
                    break None;
                }
            };
            match accepted {
                Some((trial, txb, tzb, tres, tef, teg)) => {
                    xt = trial;
                    xb = txb;
                    zb = tzb;
                    res = tres;
                    ef = tef;
                    eg = teg;
                    res_inf = max_abs(&res);
                    report.steps.push(t);
                    report.residual_history.push(res_inf);
                    converged = res_inf <= settings.tol_residual;
                }
                None => {
                    if res_inf <= 10.0 * settings.tol_residual {
                        converged = true;
                    } else {
                        return Err(Error::LineSearchStalled { residual: res_inf });
                    }
                }
            }
        }
        report.iterations = it;
        if !converged {
            return Err(Error::MaxIterExceeded {
                solver: "torus inner Newton",
                iterations: it,
                residual: res_inf,
            });
        }
        Ok((
            VariationalState {
                xi: ScalarField::new(grid.clone(), xt)?,
                zeta: ScalarField::new(grid, zt)?,
                xibar: xb,
                zetabar: zb,
            },
            report,
        ))
    }

    /// Newton step of the coupled `(ξ, ζ)` linearization at `state`, returned
    /// as full-field increments (zero at pinned nodes).
    fn coupled_step(&mut self, state: &VariationalState) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = &self.problem;
        let grid = p.grid.clone();
        if self.coupled.is_none() {
            self.coupled = Some(CoupledSystem::new(&grid)?);
        }
        let sys = self.coupled.as_mut().expect("coupled system");
        let xi = state.full_xi();
        let zeta = state.full_zeta();
        let (ef, eg) = p.exponents(&xi, &zeta)?;
        let ri = inner_residual_full(p, &xi, &ef, &eg);
        let ro = outer_residual_full(p, &zeta, &ef, &eg);
        let ha = 0.5 * p.a_coeff();
        let hb = 0.5 * p.b_coeff() * p.det();
        let vals: Vec<f64> = sys
            .entries
            .iter()
            .map(|&(_, _, e)| match e {
                Entry::Stencil(c) => c,
                Entry::XiXi(k) => -ha * (ef[k] + eg[k]),
                Entry::XiZeta(k) => -ha * (ef[k] - eg[k]),
                Entry::ZetaXi(k) => -hb * (ef[k] - eg[k]),
                Entry::ZetaZeta(k) => -hb * (ef[k] + eg[k]),
            })
            .collect();
        let fac = sys.pattern.lu(&vals)?;
        let free = grid.free_nodes();
        let mut rhs = vec![0.0; 2 * sys.n_free];
        for (idx, &k) in free.iter().enumerate() {
            rhs[2 * idx] = -ri[k];
            rhs[2 * idx + 1] = -ro[k];
        }
        let sol = fac.solve(&rhs)?;
        let mut dxi = vec![0.0; grid.len()];
        let mut dzeta = vec![0.0; grid.len()];
        for (idx, &k) in free.iter().enumerate() {
            dxi[k] = sol[2 * idx];
            dzeta[k] = sol[2 * idx + 1];
        }
        Ok((dxi, dzeta))
    }

    /// Find the constrained critical point, starting from `initial` (or zero).
    pub fn solve(&mut self, initial: Option<&VariationalState>) -> Result<(VariationalState, SolveReport)> {
        let descent = match self.settings.method {
            OuterMethod::Auto => self.problem.is_torus(),
            OuterMethod::Descent => true,
            OuterMethod::Newton => false,
        };
        if descent {
            self.solve_descent(initial)
        } else {
            self.solve_newton(initial)
        }
    }

    fn solve_descent(&mut self, initial: Option<&VariationalState>) -> Result<(VariationalState, SolveReport)> {
        let grid = self.problem.grid.clone();
        let start = initial.cloned().unwrap_or_else(|| VariationalState::zero(&grid));
        let free = grid.free_nodes().to_vec();
        let nf = free.len();
        let mut pre_op = ShiftedLaplacian::new(grid.clone())?;
        let pre = pre_op.factor(&vec![self.settings.preconditioner_shift; nf])?;
        let w = grid.cell_area();
        let periodic = self.problem.is_torus();
        let gather = |v: &[f64]| -> Vec<f64> { free.iter().map(|&k| v[k]).collect() };
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

        let (mut state, inner) = self.inner_solve(&start.zeta, &start.xi)?;
        let mut value = functional_i(&self.problem, &state)?;
        let mut outer = outer_residual(&self.problem, &state)?;
        let mut inner_res = *inner.residual_history.last().unwrap_or(&0.0);
        let mut report = SolveReport::default();
        report.notes.push("preconditioned Barzilai-Borwein descent".into());
        report.iterations.push(IterationRecord {
            iteration: 0,
            functional: value,
            residual_inner: inner_res,
            residual_outer: outer.max_abs(),
            step: 0.0,
            inner_iterations: inner.iterations,
        });
        // previous iterate and residual (free nodes) for the step length
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut tau = 1.0;
        for it in 1..=self.settings.max_descent {
            if outer.max_abs() <= self.settings.tol_outer {
                report.converged = true;
                break;
            }
            let r = gather(outer.values());
            let z = gather(state.zeta.values());
            let mut dir = pre.solve(&r)?;
            if periodic {
                project_mean_free(&mut dir);
            }
            if let Some((zp, rp)) = &prev {
                // s = Δζ, y = Δ(gradient) = −Δr; step sᵀy / yᵀP⁻¹y
                let s: Vec<f64> = z.iter().zip(zp).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = rp.iter().zip(&r).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                let py = pre.solve(&y)?;
                let ypy = dot(&y, &py);
                tau = if sy > 0.0 && ypy > 0.0 { sy / ypy } else { 1.0 };
            }
            let slope = -w * dot(&r, &dir);
            let mut t = tau;
            let accepted = loop {
                let mut trial = state.zeta.values().to_vec();
                for (idx, &k) in free.iter().enumerate() {
                    trial[k] += t * dir[idx];
                }
                let zf = ScalarField::new(grid.clone(), trial)?;
                if let Ok((cand, inner)) = self.inner_solve(&zf, &state.xi) {
                    if let Ok(v) = functional_i(&self.problem, &cand) {
                        if v.is_finite() && v <= value + 1e-4 * t * slope + 1e-14 * value.abs() {
                            break Some((cand, inner, v));
                        }
                    }
                }
                t *= 0.5;
                if t < self.settings.min_step * tau.max(1.0) {
                    break None;
                }
            };
            let Some((cand, inner, v)) = accepted else {
                report.final_residual_inner = inner_res;
                report.final_residual_outer = outer.max_abs();
                return Err(Error::Stalled { step: t, residual: outer.max_abs() });
            };
            prev = Some((z, r));
            state = cand;
            value = v;
            outer = outer_residual(&self.problem, &state)?;
            inner_res = *inner.residual_history.last().unwrap_or(&0.0);
            report.iterations.push(IterationRecord {
                iteration: it,
                functional: value,
                residual_inner: inner_res,
                residual_outer: outer.max_abs(),
                step: t,
                inner_iterations: inner.iterations,
            });
        }
        report.final_residual_inner = inner_res;
        report.final_residual_outer = outer.max_abs();
        if outer.max_abs() <= self.settings.tol_outer {
            report.converged = true;
        }
        if !report.converged {
            return Err(Error::MaxIterExceeded {
                solver: "preconditioned descent",
                iterations: self.settings.max_descent,
                residual: outer.max_abs(),
            });
        }
        Ok((state, report))
    }

    fn solve_newton(&mut self, initial: Option<&VariationalState>) -> Result<(VariationalState, SolveReport)> {
        let grid = self.problem.grid.clone();
        let start = initial.cloned().unwrap_or_else(|| VariationalState::zero(&grid));
        let (mut state, inner) = self.inner_solve(&start.zeta, &start.xi)?;
        let mut report = SolveReport::default();
        let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut outer = outer_residual(&self.problem, &state)?;
        let mut inner_res = *inner.residual_history.last().unwrap_or(&0.0);
        report.iterations.push(IterationRecord {
            iteration: 0,
            functional: functional_i(&self.problem, &state)?,
            residual_inner: inner_res,
            residual_outer: outer.max_abs(),
            step: 0.0,
            inner_iterations: inner.iterations,
        });
        for it in 1..=self.settings.max_outer {
            if outer.max_abs() <= self.settings.tol_outer {
                report.converged = true;
                break;
            }
            let (dxi, dzeta) = self.coupled_step(&state)?;
            let base = l2(outer.values());
            let mut t = 1.0;
            let accepted = loop {
                let mut zeta_trial: Vec<f64> =
                    state.zeta.values().iter().zip(&dzeta).map(|(z, d)| z + t * d).collect();
                let mut xi_trial: Vec<f64> =
                    state.xi.values().iter().zip(&dxi).map(|(x, d)| x + t * d).collect();
                if self.problem.is_torus() {
                    project_mean_free(&mut zeta_trial);
                    project_mean_free(&mut xi_trial);
                }
                let zf = ScalarField::new(grid.clone(), zeta_trial)?;
                let xf = ScalarField::new(grid.clone(), xi_trial)?;
                if let Ok((cand, inner)) = self.inner_solve(&zf, &xf) {
                    if let Ok(o) = outer_residual(&self.problem, &cand) {
                        let ol2 = l2(o.values());
                        if ol2.is_finite() && ol2 <= (1.0 - 1e-4 * t) * base {
                            break Some((cand, inner, o));
                        }
                    }
                }
                t *= 0.5;
                if t < self.settings.min_step {
                    break None;
                }
            };
            let Some((cand, inner, o)) = accepted else {
                report.final_residual_inner = inner_res;
                report.final_residual_outer = outer.max_abs();
                return Err(Error::Stalled { step: t, residual: outer.max_abs() });
            };
            state = cand;
            outer = o;
            inner_res = *inner.residual_history.last().unwrap_or(&0.0);
            report.iterations.push(IterationRecord {
                iteration: it,
                functional: functional_i(&self.problem, &state)?,
                residual_inner: inner_res,
                residual_outer: outer.max_abs(),
                step: t,
                inner_iterations: inner.iterations,
            });
        }
        report.final_residual_inner = inner_res;
        report.final_residual_outer = outer.max_abs();
        if outer.max_abs() <= self.settings.tol_outer {
            report.converged = true;
        }
        if !report.converged {
            return Err(Error::MaxIterExceeded {
                solver: "nested reduced Newton",
                iterations: self.settings.max_outer,
                residual: outer.max_abs(),
            });
        }
        Ok((state, report))
    }

    /// Reduced functional `ζ ↦ I(ξ(ζ), ζ)` (mean-free `ζ` on tori), with the
    /// inner solve warm-started at `xi_guess`.
    pub fn reduced_functional(&mut self, zeta: &ScalarField, xi_guess: &ScalarField) -> Result<(f64, VariationalState)> {
        let (state, _) = self.inner_solve(zeta, xi_guess)?;
        Ok((functional_i(&self.problem, &state)?, state))
    }
}

/// Run the nested solver on a problem with the given settings.
pub fn nested_minimize(
    problem: Problem,
    settings: SolverSettings,
    initial: Option<&VariationalState>,
) -> Result<(VariationalState, SolveReport)> {
    NestedSolver::new(problem, settings)?.solve(initial)
}

/// Recover `(u, v)` from a state through the substitution chain.
pub fn recover_uv(problem: &Problem, state: &VariationalState) -> (ScalarField, ScalarField) {
    let grid = problem.grid.clone();
    let xi = state.full_xi();
    let zeta = state.full_zeta();
    let shift = if problem.is_torus() { 0.0 } else { LN_2 };
    let u = (0..grid.len())
        .map(|k| problem.f0[k] + 0.5 * (xi[k] + zeta[k]) - shift)
        .collect();
    let v = (0..grid.len())
        .map(|k| problem.g0[k] + 0.5 * (xi[k] - zeta[k]) - shift)
        .collect();
    (
        ScalarField::new(grid.clone(), u).expect("grid length"),
        ScalarField::new(grid, v).expect("grid length"),
    )
}

/// Residuals of the original system
/// `Δu = 4k₁₁eᵘ + 4k₁₂eᵛ − 4 + S₁` (and its mirror) for the regularized sources.
///
/// On bounded domains the Laplacian of the closed-form part `u₀^ε` is taken
/// analytically (`S₁ − h₁`) and only the smooth remainder is differenced; on
/// tori `Δ_h u₀` equals its balanced source by construction.
pub fn system_residual(problem: &Problem, state: &VariationalState) -> Result<(ScalarField, ScalarField)> {
    let grid = problem.grid.clone();
    let (u, v) = recover_uv(problem, state);
    let k = problem.coupling;
    let xi = state.full_xi();
    let zeta = state.full_zeta();
    let n = grid.len();
    let mut ru = vec![0.0; n];
    let mut rv = vec![0.0; n];
    match &problem.setting {
        Setting::Bounded(bg) => {
            let u3: Vec<f64> = (0..n).map(|i| bg.big_u0eps.values()[i] + 0.5 * (xi[i] + zeta[i])).collect();
            let v3: Vec<f64> = (0..n).map(|i| bg.big_v0eps.values()[i] + 0.5 * (xi[i] - zeta[i])).collect();
            let lu = laplacian(&grid, &u3);
            let lv = laplacian(&grid, &v3);
            for &i in grid.free_nodes() {
                let eu = guarded_exp(u.values()[i])?;
                let ev = guarded_exp(v.values()[i])?;
                let (s1, s2) = (bg.delta1.values()[i], bg.delta2.values()[i]);
                ru[i] = lu[i] + s1 - bg.h1.values()[i] - (4.0 * k.k11 * eu + 4.0 * k.k12 * ev - 4.0 + s1);
                rv[i] = lv[i] + s2 - bg.h2.values()[i] - (4.0 * k.k12 * eu + 4.0 * k.k11 * ev - 4.0 + s2);
            }
        }
        Setting::Torus { background, .. } => {
            let area = grid.domain.area();
            let lu = laplacian(&grid, u.values());
            let lv = laplacian(&grid, v.values());
            let c1 = 4.0 * PI * problem.vortices.n1() as f64 / area;
            let c2 = 4.0 * PI * problem.vortices.n2() as f64 / area;
            for i in 0..n {
                let eu = guarded_exp(u.values()[i])?;
                let ev = guarded_exp(v.values()[i])?;
                let s1 = background.source1.values()[i] + c1;
                let s2 = background.source2.values()[i] + c2;
                ru[i] = lu[i] - (4.0 * k.k11 * eu + 4.0 * k.k12 * ev - 4.0 + s1);
                rv[i] = lv[i] - (4.0 * k.k12 * eu + 4.0 * k.k11 * ev - 4.0 + s2);
            }
        }
    }
    Ok((ScalarField::new(grid.clone(), ru)?, ScalarField::new(grid, rv)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Point;

    fn pq(p: f64, q: f64) -> CouplingParams {
        CouplingParams::new(p, q).unwrap()
    }

    fn torus_grid(n: usize) -> Arc<Grid> {
        Arc::new(Grid::torus(2.0 * PI, 2.0 * PI, n, n).unwrap())
    }

    #[test]
    fn no_vortex_functional_value_and_sign() {
        let g = Arc::new(Grid::disk(2.0, 41).unwrap());
        let empty = VortexConfiguration::new(vec![], vec![]);
        let prob = Problem::bounded(pq(1.0, -0.5), empty, g.clone(), 0.1).unwrap();
        let i = functional_i(&prob, &VariationalState::zero(&g)).unwrap();
        let area: f64 = prob.weights().iter().sum();
        assert!((i - 4.0 * prob.det() * area).abs() < 1e-10 * area);
        assert!(i < 0.0);
    }

    #[test]
    fn rejects_non_indefinite_regimes() {
        let g = torus_grid(8);
        let empty = VortexConfiguration::new(vec![], vec![]);
        assert!(matches!(
            Problem::torus(pq(1.0, 0.5), empty, g, 0.1),
            Err(Error::OutOfScopeRegime { .. })
        ));
    }

    #[test]
    fn zero_background_mean_update() {
        let g = torus_grid(16);
        let solver = PeriodicPoisson::new(g.clone()).unwrap();
        let empty = VortexConfiguration::new(vec![], vec![]);
        let bg = torus_background(&empty, &solver, 0.1).unwrap();
        let zeros = vec![0.0; g.len()];
        let area = g.domain.area();
        let (a, b) = (10.0, 7.0);
        let (xb, zb) = torus_mean_update(&zeros, &zeros, &bg, a, b, &g).unwrap();
        assert!((xb - (a * b / (area * area)).ln()).abs() < 1e-12);
        assert!((zb - (a / b).ln()).abs() < 1e-12);
        assert!(matches!(
            torus_mean_update(&zeros, &zeros, &bg, 1.0, 0.0, &g),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn torus_without_vortices_is_constant() {
        let g = torus_grid(16);
        let empty = VortexConfiguration::new(vec![], vec![]);
        let prob = Problem::torus(pq(1.0, -0.5), empty, g, 0.1).unwrap();
        let (state, rep) = nested_minimize(prob, SolverSettings::default(), None).unwrap();
        assert!(rep.iterations.len() <= 2);
        assert!(state.xi.max_abs() < 1e-12 && state.zeta.max_abs() < 1e-12);
        // e^u = e^v = 1/2, so the means carry ln(αβ/|Ω|²) = ln(1/4)
        assert!((state.xibar - 0.25f64.ln()).abs() < 1e-12 && state.zetabar.abs() < 1e-12);
    }

    #[test]
    fn torus_single_vortex_constraints() {
        let g = torus_grid(32);
        let cfg = VortexConfiguration::new(vec![Point::new(PI, PI)], vec![]);
        let prob = Problem::torus(pq(1.0, -0.5), cfg, g.clone(), 0.2).unwrap();
        let (alpha, beta) = prob.alpha_beta().unwrap();
        let (state, rep) = nested_minimize(prob.clone(), SolverSettings::default(), None).unwrap();
        assert!(rep.converged);
        let (u, v) = recover_uv(&prob, &state);
        let w = g.cell_area();
        let iu: f64 = u.values().iter().map(|x| x.exp() * w).sum();
        let iv: f64 = v.values().iter().map(|x| x.exp() * w).sum();
        assert!((iu - alpha).abs() < 1e-9 * alpha);
        assert!((iv - beta).abs() < 1e-9 * beta);
        let (ru, rv) = system_residual(&prob, &state).unwrap();
        assert!(ru.max_abs() < 1e-7 && rv.max_abs() < 1e-7);
    }

    #[test]
    fn bounded_solve_and_swap() {
        let g = Arc::new(Grid::disk(3.0, 41).unwrap());
        let cfg = VortexConfiguration::new(vec![Point::new(0.4, 0.1)], vec![Point::new(-0.5, -0.3)]);
        let prob = Problem::bounded(pq(1.0, -0.5), cfg, g.clone(), 0.05).unwrap();
        let (state, rep) = nested_minimize(prob.clone(), SolverSettings::default(), None).unwrap();
        assert!(rep.converged);
        let sw = prob.swapped();
        let (state2, _) = nested_minimize(sw.clone(), SolverSettings::default(), None).unwrap();
        let (u, v) = recover_uv(&prob, &state);
        let (u2, v2) = recover_uv(&sw, &state2);
        assert_eq!(u.values(), v2.values());
        assert_eq!(v.values(), u2.values());
    }

    fn curvature_along(solver: &mut NestedSolver, state: &VariationalState, dir: &ScalarField) -> f64 {
        let t = 1e-2;
        let mut vals = Vec::new();
        for s in [-1.0, 0.0, 1.0] {
            let z = ScalarField::new(
                dir.grid().clone(),
                state.zeta.values().iter().zip(dir.values()).map(|(a, b)| a + s * t * b).collect(),
            )
            .unwrap();
            vals.push(solver.reduced_functional(&z, &state.xi).unwrap().0);
        }
        (vals[0] - 2.0 * vals[1] + vals[2]) / (t * t)
    }

    #[test]
    fn descent_finds_minimizer_newton_finds_saddle() {
        let g = torus_grid(16);
        let cfg = VortexConfiguration::new(vec![Point::new(PI, PI)], vec![]);
        let prob = Problem::torus(pq(1.0, -0.5), cfg, g.clone(), 0.5).unwrap();
        let dir = ScalarField::from_fn(g.clone(), |x, _| x.cos());

        let mut descent = NestedSolver::new(prob.clone(), SolverSettings::default()).unwrap();
        let (min_state, report) = descent.solve(None).unwrap();
        let history: Vec<f64> = report.iterations.iter().map(|r| r.functional).collect();
        assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()), "{history:?}");
        assert!(curvature_along(&mut descent, &min_state, &dir) > 0.0);

        let newton_settings = SolverSettings { method: OuterMethod::Newton, ..SolverSettings::default() };
        let mut newton = NestedSolver::new(prob, newton_settings).unwrap();
        let (saddle, _) = newton.solve(None).unwrap();
        assert!(curvature_along(&mut newton, &saddle, &dir) < 0.0);
        let i_min = functional_i(&descent.problem, &min_state).unwrap();
        let i_saddle = functional_i(&newton.problem, &saddle).unwrap();
        assert!(i_min < i_saddle, "{i_min} vs {i_saddle}");
    }
}
