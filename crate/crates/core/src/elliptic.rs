//! Discrete Laplacians, linear Poisson solvers, damped Newton for monotone
//! semilinear equations and the sub/supersolution monotone iteration.

use std::f64::consts::PI;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::{Mat, Side};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{max_abs, Grid, ScalarField};

const NO_UNKNOWN: usize = usize::MAX;

/// Neighbour of node `(i, j)` shifted by `(di, dj)`, wrapping on periodic grids.
/// Returns `None` when the shift leaves a Dirichlet grid.
#[inline]
fn neighbour(grid: &Grid, i: usize, j: usize, di: isize, dj: isize) -> Option<usize> {
    let ii = i as isize + di;
    let jj = j as isize + dj;
    let (n1, n2) = (grid.n1 as isize, grid.n2 as isize);
    if grid.is_periodic() {
        Some(grid.index(ii.rem_euclid(n1) as usize, jj.rem_euclid(n2) as usize))
    } else if ii < 0 || jj < 0 || ii >= n1 || jj >= n2 {
        None
    } else {
        Some(grid.index(ii as usize, jj as usize))
    }
}

/// Five-point Laplacian of raw nodal values. Pinned nodes receive zero.
pub fn laplacian(grid: &Grid, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    laplacian_into(grid, values, &mut out);
    out
}

pub fn laplacian_into(grid: &Grid, values: &[f64], out: &mut [f64]) {
    let (n1, n2) = (grid.n1, grid.n2);
    let c1 = 1.0 / (grid.h1 * grid.h1);
    let c2 = 1.0 / (grid.h2 * grid.h2);
    if grid.is_periodic() {
        for i in 0..n1 {
            let ip = (i + 1) % n1;
            let im = (i + n1 - 1) % n1;
            for j in 0..n2 {
                let jp = (j + 1) % n2;
                let jm = (j + n2 - 1) % n2;
                let c = values[i * n2 + j];
                out[i * n2 + j] = c1 * (values[ip * n2 + j] - 2.0 * c + values[im * n2 + j])
                    + c2 * (values[i * n2 + jp] - 2.0 * c + values[i * n2 + jm]);
            }
        }
    } else {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &k in grid.free_nodes() {
            let c = values[k];
            out[k] = c1 * (values[k + n2] - 2.0 * c + values[k - n2])
                + c2 * (values[k + 1] - 2.0 * c + values[k - 1]);
        }
    }
}

pub fn laplacian_apply(field: &ScalarField) -> ScalarField {
    let grid = field.grid().clone();
    let vals = laplacian(&grid, field.values());
    ScalarField::new(grid, vals).expect("same grid")
}

/// Spectral solver for `Δ_h u = f` on a periodic grid.
pub struct PeriodicPoisson {
    grid: Arc<Grid>,
    fwd1: Arc<dyn Fft<f64>>,
    inv1: Arc<dyn Fft<f64>>,
    fwd2: Arc<dyn Fft<f64>>,
    inv2: Arc<dyn Fft<f64>>,
    eigen: Vec<f64>,
}

impl PeriodicPoisson {
    pub fn new(grid: Arc<Grid>) -> Result<Self> {
        if !grid.is_periodic() {
            return Err(Error::WrongGridKind("spectral Poisson solve needs a periodic grid"));
        }
        let mut planner = FftPlanner::new();
        let (n1, n2) = (grid.n1, grid.n2);
        let eigen = (0..n1 * n2)
            .map(|k| {
                let (k1, k2) = (k / n2, k % n2);
                let s1 = (PI * k1 as f64 / n1 as f64).sin();
                let s2 = (PI * k2 as f64 / n2 as f64).sin();
                -4.0 * s1 * s1 / (grid.h1 * grid.h1) - 4.0 * s2 * s2 / (grid.h2 * grid.h2)
            })
            .collect();
        Ok(Self {
            fwd1: planner.plan_fft_forward(n1),
            inv1: planner.plan_fft_inverse(n1),
            fwd2: planner.plan_fft_forward(n2),
            inv2: planner.plan_fft_inverse(n2),
            eigen,
            grid,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Symbol of the discrete Laplacian at each Fourier mode `(k1, k2)`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let (n1, n2) = (self.grid.n1, self.grid.n2);
        let (row, col) = if forward {
            (&self.fwd2, &self.fwd1)
        } else {
            (&self.inv2, &self.inv1)
        };
        for chunk in data.chunks_exact_mut(n2) {
            row.process(chunk);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); n1];
        for j in 0..n2 {
            for i in 0..n1 {
                column[i] = data[i * n2 + j];
            }
            col.process(&mut column);
            for i in 0..n1 {
                data[i * n2 + j] = column[i];
            }
        }
    }

    /// Solve `Δ_h u = rhs` with `u` of zero mean. `rhs` must have zero discrete mean.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.len();
        if rhs.len() != n {
            return Err(Error::GridMismatch);
        }
        let mean = rhs.iter().sum::<f64>() / n as f64;
        if mean.abs() > 1e-10 * max_abs(rhs).max(1.0) {
            return Err(Error::NonZeroMean { mean });
        }
        let mut data: Vec<Complex64> = rhs.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        self.transform(&mut data, true);
        data[0] = Complex64::new(0.0, 0.0);
        for (d, &lam) in data.iter_mut().zip(&self.eigen).skip(1) {
            *d /= lam;
        }
        self.transform(&mut data, false);
        let scale = 1.0 / n as f64;
        let mut out: Vec<f64> = data.iter().map(|c| c.re * scale).collect();
        let m = out.iter().sum::<f64>() / n as f64;
        out.iter_mut().for_each(|v| *v -= m);
        Ok(out)
    }
}

pub fn poisson_solve_periodic(rhs: &ScalarField) -> Result<ScalarField> {
    let solver = PeriodicPoisson::new(rhs.grid().clone())?;
    let vals = solver.solve(rhs.values())?;
    ScalarField::new(rhs.grid().clone(), vals)
}

/// Outcome of an iterative linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Solve `Δ_h u = rhs` at free nodes of a Dirichlet grid with pinned values
/// taken from `boundary_values`, by Jacobi-preconditioned conjugate gradients.
/// Stops when the nodal residual satisfies `‖Δ_h u − rhs‖_∞ ≤ tol`.
pub fn poisson_solve_dirichlet(
    rhs: &ScalarField,
    boundary_values: &ScalarField,
    tol: f64,
) -> Result<ScalarField> {
    Ok(poisson_solve_dirichlet_report(rhs, boundary_values, tol)?.0)
}

pub fn poisson_solve_dirichlet_report(
    rhs: &ScalarField,
    boundary_values: &ScalarField,
    tol: f64,
) -> Result<(ScalarField, CgReport)> {
    let grid = rhs.grid().clone();
    if grid.is_periodic() {
        return Err(Error::WrongGridKind("Dirichlet Poisson solve needs a Dirichlet grid"));
    }
    if !rhs.same_grid(boundary_values) {
        return Err(Error::GridMismatch);
    }
    let free = grid.free_nodes();
    let mut u: Vec<f64> = (0..grid.len())
        .map(|k| if grid.is_pinned(k) { boundary_values.values()[k] } else { 0.0 })
        .collect();
    let diag = 2.0 / (grid.h1 * grid.h1) + 2.0 / (grid.h2 * grid.h2);

    // CG on A = −Δ_h (SPD) with b = −rhs, so the CG residual is −(rhs − Δ_h u).
    let residual = |u: &[f64]| -> Vec<f64> {
        let lap = laplacian(&grid, u);
        free.iter().map(|&k| rhs.values()[k] - lap[k]).collect()
    };
    let mut r: Vec<f64> = residual(&u).iter().map(|v| -v).collect();
    let max_iter = 10 * free.len() + 100;
    let mut z: Vec<f64> = r.iter().map(|v| v / diag).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut work = vec![0.0; grid.len()];
    let mut ap = vec![0.0; free.len()];
    let mut lap_buf = vec![0.0; grid.len()];
    for it in 0..=max_iter {
        let res = max_abs(&r);
        if res <= tol {
            // confirm on the true residual to guard against drift
            let true_res = max_abs(&residual(&u));
            if true_res <= tol {
                return Ok((
                    ScalarField::new(grid.clone(), u)?,
                    CgReport { iterations: it, residual: true_res },
                ));
            }
            r = residual(&u).iter().map(|v| -v).collect();
            z = r.iter().map(|v| v / diag).collect();
            p = z.clone();
            rz = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            continue;
        }
        if it == max_iter {
            return Err(Error::MaxIterExceeded {
                solver: "conjugate gradient",
                iterations: it,
                residual: res,
            });
        }
        for (idx, &k) in free.iter().enumerate() {
            work[k] = p[idx];
        }
        laplacian_into(&grid, &work, &mut lap_buf);
        for (idx, &k) in free.iter().enumerate() {
            ap[idx] = -lap_buf[k];
        }
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for (idx, &k) in free.iter().enumerate() {
            u[k] += alpha * p[idx];
            r[idx] -= alpha * ap[idx];
        }
        z = r.iter().map(|v| v / diag).collect();
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    unreachable!()
}

/// Sparsity pattern with cached symbolic factorizations, for matrices that are
/// refactored many times with new values but an unchanging structure.
pub struct SparsePattern {
    n: usize,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    llt: Option<SymbolicLlt<usize>>,
    lu: Option<SymbolicLu<usize>>,
}

impl SparsePattern {
    pub fn new(n: usize, entries: &[(usize, usize)]) -> Result<Self> {
        let pairs: Vec<Pair<usize, usize>> =
            entries.iter().map(|&(row, col)| Pair { row, col }).collect();
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &pairs)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self {
            n,
            symbolic,
            argsort,
            llt: None,
            lu: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn matrix(&self, values: &[f64]) -> Result<SparseColMat<usize, f64>> {
        SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values)
            .map_err(|e| Error::Factorization(format!("{e:?}")))
    }

    /// Cholesky factorization of a symmetric positive definite matrix whose
    /// entries are given in the order the pattern was created with.
    pub fn cholesky(&mut self, values: &[f64]) -> Result<SparseFactor> {
        let mat = self.matrix(values)?;
        if self.llt.is_none() {
            self.llt = Some(
                SymbolicLlt::try_new(self.symbolic.as_ref(), Side::Lower)
                    .map_err(|e| Error::Factorization(format!("{e:?}")))?,
            );
        }
        let sym = self.llt.clone().expect("symbolic factor");
        let llt = Llt::try_new_with_symbolic(sym, mat.as_ref(), Side::Lower)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(SparseFactor::Llt(llt))
    }

    pub fn lu(&mut self, values: &[f64]) -> Result<SparseFactor> {
        let mat = self.matrix(values)?;
        if self.lu.is_none() {
            self.lu = Some(
                SymbolicLu::try_new(self.symbolic.as_ref())
                    .map_err(|e| Error::Factorization(format!("{e:?}")))?,
            );
        }
        let sym = self.lu.clone().expect("symbolic factor");
        let lu = Lu::try_new_with_symbolic(sym, mat.as_ref())
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(SparseFactor::Lu(lu))
    }
}

pub enum SparseFactor {
    Llt(Llt<usize, f64>),
    Lu(Lu<usize, f64>),
}

impl SparseFactor {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let b = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let x = match self {
            SparseFactor::Llt(f) => f.solve(&b),
            SparseFactor::Lu(f) => f.solve(&b),
        };
        let out: Vec<f64> = (0..rhs.len()).map(|i| x[(i, 0)]).collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::Factorization("non-finite solution".into()))
        }
    }
}

/// Factorizations of `Δ_h − diag(d)` (restricted to free nodes) for varying `d ≥ 0`.
pub struct ShiftedLaplacian {
    grid: Arc<Grid>,
    unknown: Vec<usize>,
    entries: Vec<(usize, usize, f64)>,
    diag_slot: Vec<usize>,
    pattern: SparsePattern,
}

impl ShiftedLaplacian {
    pub fn new(grid: Arc<Grid>) -> Result<Self> {
        let free = grid.free_nodes();
        let mut unknown = vec![NO_UNKNOWN; grid.len()];
        for (idx, &k) in free.iter().enumerate() {
            unknown[k] = idx;
        }
        let c1 = 1.0 / (grid.h1 * grid.h1);
        let c2 = 1.0 / (grid.h2 * grid.h2);
        let mut entries = Vec::with_capacity(5 * free.len());
        let mut diag_slot = Vec::with_capacity(free.len());
        for (idx, &k) in free.iter().enumerate() {
            let (i, j) = (k / grid.n2, k % grid.n2);
            diag_slot.push(entries.len());
            entries.push((idx, idx, 2.0 * c1 + 2.0 * c2));
            for (di, dj, c) in [(1, 0, c1), (-1, 0, c1), (0, 1, c2), (0, -1, c2)] {
                if let Some(nb) = neighbour(&grid, i, j, di, dj) {
                    let col = unknown[nb];
                    if col != NO_UNKNOWN {
                        entries.push((idx, col, -c));
                    }
                }
            }
        }
        let pairs: Vec<(usize, usize)> = entries.iter().map(|&(r, c, _)| (r, c)).collect();
        let pattern = SparsePattern::new(free.len(), &pairs)?;
        Ok(Self {
            grid,
            unknown,
            entries,
            diag_slot,
            pattern,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Map from node index to unknown index (`usize::MAX` for pinned nodes).
    pub fn unknown_index(&self) -> &[usize] {
        &self.unknown
    }

    /// Factor `−Δ_h + diag(d)`, where `d` holds one entry per free node.
    pub fn factor(&mut self, d: &[f64]) -> Result<SparseFactor> {
        let mut vals: Vec<f64> = self.entries.iter().map(|e| e.2).collect();
        for (slot, &di) in self.diag_slot.iter().zip(d) {
            vals[*slot] += di;
        }
        self.pattern.cholesky(&vals)
    }
}

/// Settings for [`semilinear_newton`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Convergence threshold on the ∞-norm of the nodal residual.
    pub tol_residual: f64,
    pub max_iter: usize,
    /// Smallest damping factor tried by the backtracking line search.
    pub min_step: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol_residual: 1e-10,
            max_iter: 50,
            min_step: 1e-6,
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tol_residual > 0.0 && self.max_iter >= 1 && self.min_step > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter("Newton settings need tol > 0, max_iter >= 1, min_step > 0".into()))
        }
    }
}

/// A nodal nonlinearity `F(x_k, s)`, nondecreasing in `s`.
pub trait Nonlinearity {
    /// Value and `∂F/∂s` at node `k`.
    fn eval(&self, k: usize, s: f64) -> (f64, f64);
}

impl<T: Fn(usize, f64) -> (f64, f64)> Nonlinearity for T {
    fn eval(&self, k: usize, s: f64) -> (f64, f64) {
        self(k, s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    /// ∞-norm of the residual before each iteration and at the end.
    pub residual_history: Vec<f64>,
    pub steps: Vec<f64>,
}

/// Residual `Δ_h s − F(s)` at free nodes (zero at pinned nodes).
pub fn semilinear_residual(grid: &Grid, f: &impl Nonlinearity, s: &[f64]) -> Vec<f64> {
    let mut res = laplacian(grid, s);
    for &k in grid.free_nodes() {
        res[k] -= f.eval(k, s[k]).0;
    }
    res
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn finite_max(v: &[f64]) -> f64 {
    if v.iter().all(|x| x.is_finite()) {
        max_abs(v)
    } else {
        f64::INFINITY
    }
}

/// Solve `Δ_h s = F(x, s)` at free nodes by damped Newton. Pinned nodes keep
/// the values of `initial`.
pub fn semilinear_newton(
    f: &impl Nonlinearity,
    initial: &ScalarField,
    settings: &NewtonSettings,
) -> Result<ScalarField> {
    let mut op = ShiftedLaplacian::new(initial.grid().clone())?;
    Ok(semilinear_newton_with(&mut op, f, initial, settings)?.0)
}

/// As [`semilinear_newton`], reusing a prepared operator and returning the
/// iteration history.
pub fn semilinear_newton_with(
    op: &mut ShiftedLaplacian,
    f: &impl Nonlinearity,
    initial: &ScalarField,
    settings: &NewtonSettings,
) -> Result<(ScalarField, NewtonReport)> {
    settings.validate()?;
    let grid = initial.grid().clone();
    if *op.grid() != grid && !Arc::ptr_eq(op.grid(), &grid) {
        return Err(Error::GridMismatch);
    }
    let free = grid.free_nodes();
    let mut s = initial.values().to_vec();
    let mut res = semilinear_residual(&grid, f, &s);
    let mut res_inf = finite_max(&res);
    if !res_inf.is_finite() {
        return Err(Error::Overflow { value: max_abs(&s) });
    }
    let mut report = NewtonReport {
        iterations: 0,
        residual_history: vec![res_inf],
        steps: Vec::new(),
    };
    for it in 0..settings.max_iter {
        if res_inf <= settings.tol_residual {
            report.iterations = it;
            return Ok((ScalarField::new(grid, s)?, report));
        }
        let mut d = Vec::with_capacity(free.len());
        for &k in free {
            let deriv = f.eval(k, s[k]).1;
            if !(deriv >= -1e-14 * (1.0 + deriv.abs())) {
                return Err(Error::NonMonotone { node: k, derivative: deriv });
            }
            d.push(deriv.max(0.0));
        }
        let fac = op.factor(&d)?;
        // (Δ − D) δ = −R  ⇔  (−Δ + D) δ = R
        let rhs: Vec<f64> = free.iter().map(|&k| res[k]).collect();
        let delta = fac.solve(&rhs)?;
        let base = l2(&rhs);
        let mut t = 1.0;
        let accepted = loop {
            let mut trial = s.clone();
            for (idx, &k) in free.iter().enumerate() {
                trial[k] += t * delta[idx];
            }
            let tres = semilinear_residual(&grid, f, &trial);
            let tl2 = if tres.iter().all(|x| x.is_finite()) { l2(&tres) } else { f64::INFINITY };
            if tl2 <= (1.0 - 1e-4 * t) * base || (tl2 <= base && tl2 < 1e-9 * base.max(1.0)) {
                break Some((trial, tres));
            }
            t *= 0.5;
            if t < settings.min_step {
                break None;
            }
        };
        match accepted {
            Some((trial, tres)) => {
                s = trial;
                res = tres;
                res_inf = finite_max(&res);
                report.steps.push(t);
                report.residual_history.push(res_inf);
            }
            None => {
                // near machine precision the residual may not decrease further
                if res_inf <= 10.0 * settings.tol_residual {
                    report.iterations = it;
                    return Ok((ScalarField::new(grid, s)?, report));
                }
                return Err(Error::LineSearchStalled { residual: res_inf });
            }
        }
    }
    if res_inf <= settings.tol_residual {
        report.iterations = settings.max_iter;
        return Ok((ScalarField::new(grid, s)?, report));
    }
    Err(Error::MaxIterExceeded {
        solver: "semilinear Newton",
        iterations: settings.max_iter,
        residual: res_inf,
    })
}

/// The equation `Δw = coeff(x)·e^w + constant + sources(x)` with Dirichlet
/// data (pinned values) or periodic boundary conditions.
#[derive(Debug, Clone)]
pub struct MonotoneEquation {
    pub coeff: Vec<f64>,
    pub constant: f64,
    pub sources: Vec<f64>,
}

impl MonotoneEquation {
    pub fn uniform(coeff: f64, constant: f64, sources: Vec<f64>) -> Self {
        Self {
            coeff: vec![coeff; sources.len()],
            constant,
            sources,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub sweeps: usize,
    pub shift: f64,
    /// `‖w_{k+1} − w_k‖_∞` per sweep.
    pub increments: Vec<f64>,
}

/// Sub/supersolution iteration `(Δ_h − c) w_{k+1} = G(w_k) − c w_k`, started at
/// the subsolution, with `c = max(coeff·exp(super)) + 1`. Pinned nodes keep the
/// values of the subsolution. Every sweep asserts `w_k ≤ w_{k+1} ≤ super`.
pub fn monotone_iteration(
    sub: &ScalarField,
    sup: &ScalarField,
    eq: &MonotoneEquation,
    tol: f64,
    max_iter: usize,
) -> Result<(ScalarField, MonotoneReport)> {
    let grid = sub.grid().clone();
    if !sub.same_grid(sup) || eq.sources.len() != grid.len() || eq.coeff.len() != grid.len() {
        return Err(Error::GridMismatch);
    }
    if eq.coeff.iter().any(|&c| c < 0.0) {
        return Err(Error::InvalidParameter("monotone scheme needs a nonnegative exponential coefficient".into()));
    }
    let free = grid.free_nodes();
    if let Some(&k) = free.iter().find(|&&k| sub.values()[k] > sup.values()[k]) {
        return Err(Error::MonotonicityViolated {
            sweep: 0,
            node: k,
            detail: "subsolution exceeds supersolution",
        });
    }
    let c = free
        .iter()
        .map(|&k| eq.coeff[k] * sup.values()[k].exp())
        .fold(0.0, f64::max)
        + 1.0;
    let mut op = ShiftedLaplacian::new(grid.clone())?;
    let fac = op.factor(&vec![c; free.len()])?;
    let unknown = op.unknown_index().to_vec();
    let mut w = sub.values().to_vec();
    let mut report = MonotoneReport {
        sweeps: 0,
        shift: c,
        increments: Vec::new(),
    };
    let c1 = 1.0 / (grid.h1 * grid.h1);
    let c2 = 1.0 / (grid.h2 * grid.h2);
    for sweep in 1..=max_iter {
        // (−Δ + c) w_new = −(G(w) − c w) − (pinned-neighbour contributions)
        let mut rhs: Vec<f64> = free
            .iter()
            .map(|&k| -(eq.coeff[k] * w[k].exp() + eq.constant + eq.sources[k] - c * w[k]))
            .collect();
        if !grid.is_periodic() {
            for (idx, &k) in free.iter().enumerate() {
                let (i, j) = (k / grid.n2, k % grid.n2);
                for (di, dj, cc) in [(1, 0, c1), (-1, 0, c1), (0, 1, c2), (0, -1, c2)] {
                    if let Some(nb) = neighbour(&grid, i, j, di, dj) {
                        if unknown[nb] == NO_UNKNOWN {
                            rhs[idx] += cc * w[nb];
                        }
                    }
                }
            }
        }
        let next = fac.solve(&rhs)?;
        let mut inc: f64 = 0.0;
        for (idx, &k) in free.iter().enumerate() {
            let slack = 1e-9 * (1.0 + w[k].abs());
            if next[idx] < w[k] - slack {
                return Err(Error::MonotonicityViolated {
                    sweep,
                    node: k,
                    detail: "iterate decreased",
                });
            }
            if next[idx] > sup.values()[k] + slack {
                return Err(Error::MonotonicityViolated {
                    sweep,
                    node: k,
                    detail: "iterate exceeded the supersolution",
                });
            }
            inc = inc.max((next[idx] - w[k]).abs());
            w[k] = next[idx];
        }
        report.sweeps = sweep;
        report.increments.push(inc);
        if inc <= tol {
            return Ok((ScalarField::new(grid, w)?, report));
        }
    }
    Err(Error::MaxIterExceeded {
        solver: "monotone iteration",
        iterations: max_iter,
        residual: report.increments.last().copied().unwrap_or(f64::INFINITY),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus(n: usize) -> Arc<Grid> {
        Arc::new(Grid::torus(2.0 * PI, 2.0 * PI, n, n).unwrap())
    }

    #[test]
    fn constant_has_zero_laplacian() {
        let g = torus(16);
        let f = ScalarField::constant(g, 3.5);
        assert!(laplacian_apply(&f).max_abs() < 1e-12);
    }

    #[test]
    fn plane_wave_eigenvalue() {
        let g = torus(32);
        let f = ScalarField::from_fn(g.clone(), |x, y| (3.0 * x).cos() * (2.0 * y).cos());
        let lam = -4.0 / (g.h1 * g.h1) * (1.5 * g.h1).sin().powi(2)
            - 4.0 / (g.h2 * g.h2) * (g.h2).sin().powi(2);
        let lap = laplacian_apply(&f);
        for (a, b) in lap.values().iter().zip(f.values()) {
            assert!((a - lam * b).abs() < 1e-11);
        }
    }

    #[test]
    fn quadratic_is_exact_on_dirichlet_grid() {
        let g = Arc::new(Grid::rectangle(2.0, 1.0, 11, 9).unwrap());
        let f = ScalarField::from_fn(g.clone(), |x, _| x * x);
        let lap = laplacian_apply(&f);
        for &k in g.free_nodes() {
            assert!((lap.values()[k] - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_round_trip() {
        let g = torus(24);
        let rhs = ScalarField::from_fn(g.clone(), |x, y| (x + 2.0 * y).sin() + (3.0 * x).cos() * y.sin());
        let u = poisson_solve_periodic(&rhs).unwrap();
        let back = laplacian_apply(&u);
        for (a, b) in back.values().iter().zip(rhs.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(u.values().iter().sum::<f64>().abs() < 1e-10);
        assert!(poisson_solve_periodic(&ScalarField::zeros(g.clone())).unwrap().max_abs() == 0.0);
        let bad = ScalarField::constant(g, 1.0);
        assert!(matches!(poisson_solve_periodic(&bad), Err(Error::NonZeroMean { .. })));
    }

    #[test]
    fn dirichlet_harmonic_polynomial_reproduced() {
        let g = Arc::new(Grid::rectangle(1.0, 1.0, 21, 21).unwrap());
        let exact = ScalarField::from_fn(g.clone(), |x, y| x * x - y * y);
        let u = poisson_solve_dirichlet(&ScalarField::zeros(g.clone()), &exact, 1e-12).unwrap();
        for (a, b) in u.values().iter().zip(exact.values()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn newton_constant_root() {
        let g = Arc::new(Grid::rectangle(1.0, 1.0, 9, 9).unwrap());
        let f = |_: usize, s: f64| (8.0 * (s.exp() - 1.0), 8.0 * s.exp());
        let u = semilinear_newton(&f, &ScalarField::constant(g.clone(), 0.0), &NewtonSettings::default()).unwrap();
        assert!(u.max_abs() < 1e-12);
    }

    #[test]
    fn newton_single_node_scalar_root() {
        let g = Arc::new(Grid::torus(1.0, 1.0, 1, 1).unwrap());
        let c = 8.0 * (1f64.exp() - 1.0);
        let f = move |_: usize, s: f64| (8.0 * (s.exp() - 1.0) - c, 8.0 * s.exp());
        let u = semilinear_newton(&f, &ScalarField::zeros(g), &NewtonSettings::default()).unwrap();
        assert!((u.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn newton_rejects_decreasing_nonlinearity() {
        let g = Arc::new(Grid::rectangle(1.0, 1.0, 5, 5).unwrap());
        let f = |_: usize, s: f64| (-s - 1.0, -1.0);
        assert!(matches!(
            semilinear_newton(&f, &ScalarField::zeros(g), &NewtonSettings::default()),
            Err(Error::NonMonotone { .. })
        ));
    }

    #[test]
    fn monotone_iteration_constant_solutions() {
        let g = Arc::new(Grid::rectangle(1.0, 1.0, 11, 11).unwrap());
        let eq = MonotoneEquation::uniform(8.0, -8.0, vec![0.0; g.len()]);
        let sub = ScalarField::from_fn(g.clone(), |x, y| {
            if x == 0.0 || y == 0.0 || x >= 1.0 - 1e-12 || y >= 1.0 - 1e-12 { 0.0 } else { -1.0 }
        });
        let (w, rep) = monotone_iteration(&sub, &ScalarField::zeros(g.clone()), &eq, 1e-12, 2000).unwrap();
        assert!(w.max_abs() < 1e-10);
        assert!(rep.increments.len() >= 2);

        let ln2 = 2f64.ln();
        let eq = MonotoneEquation::uniform(8.0, -4.0, vec![0.0; g.len()]);
        let sub = ScalarField::from_fn(g.clone(), |x, y| {
            if x == 0.0 || y == 0.0 || x >= 1.0 - 1e-12 || y >= 1.0 - 1e-12 { -ln2 } else { -2.0 }
        });
        let (w, _) = monotone_iteration(&sub, &ScalarField::constant(g, -ln2), &eq, 1e-12, 2000).unwrap();
        assert!(w.values().iter().all(|v| (v + ln2).abs() < 1e-10));
    }
}
