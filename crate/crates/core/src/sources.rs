//! Regularized vortex sources and the background functions that absorb them.

use std::sync::Arc;

use crate::elliptic::{poisson_solve_dirichlet, PeriodicPoisson};
use crate::error::{Error, Result};
use crate::grid::{DomainSpec, Grid, ScalarField};
use crate::params::{Point, VortexConfiguration};

/// Default regularization tied to the grid: `ε = (2h)²`.
pub fn default_epsilon(grid: &Grid) -> f64 {
    let h = grid.h1.max(grid.h2);
    4.0 * h * h
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")))
    }
}

/// `Σ_j 4ε / (ε + |x − p_j|²)²`, which integrates to `4π` per point over the plane.
pub fn regularized_delta_sum(points: &[Point], epsilon: f64, grid: &Arc<Grid>) -> Result<ScalarField> {
    check_epsilon(epsilon)?;
    Ok(ScalarField::from_fn(grid.clone(), |x, y| {
        points
            .iter()
            .map(|p| {
                let d = epsilon + (x - p.x).powi(2) + (y - p.y).powi(2);
                4.0 * epsilon / (d * d)
            })
            .sum()
    }))
}

/// `Σ_j ln((ε + |x − p_j|²) / (1 + |x − p_j|²))`.
pub fn log_background(points: &[Point], epsilon: f64, grid: &Arc<Grid>) -> Result<ScalarField> {
    check_epsilon(epsilon)?;
    Ok(ScalarField::from_fn(grid.clone(), |x, y| {
        points
            .iter()
            .map(|p| {
                let r2 = (x - p.x).powi(2) + (y - p.y).powi(2);
                ((epsilon + r2) / (1.0 + r2)).ln()
            })
            .sum()
    }))
}

/// `Σ_j 4 / (1 + |x − p_j|²)²`; contains no ε.
pub fn smooth_source(points: &[Point], grid: &Arc<Grid>) -> ScalarField {
    ScalarField::from_fn(grid.clone(), |x, y| {
        points
            .iter()
            .map(|p| {
                let d = 1.0 + (x - p.x).powi(2) + (y - p.y).powi(2);
                4.0 / (d * d)
            })
            .sum()
    })
}

/// Closed-form fields `(u0eps, v0eps, h1, h2)`.
pub fn background_fields(
    vortices: &VortexConfiguration,
    epsilon: f64,
    grid: &Arc<Grid>,
) -> Result<(ScalarField, ScalarField, ScalarField, ScalarField)> {
    Ok((
        log_background(&vortices.upper, epsilon, grid)?,
        log_background(&vortices.lower, epsilon, grid)?,
        smooth_source(&vortices.upper, grid),
        smooth_source(&vortices.lower, grid),
    ))
}

/// Discrete-harmonic extension of the pinned values of `boundary_data`.
pub fn harmonic_correction(boundary_data: &ScalarField, tol: f64) -> Result<ScalarField> {
    let grid = boundary_data.grid().clone();
    if grid.is_periodic() {
        return Err(Error::WrongGridKind("harmonic correction needs a Dirichlet grid"));
    }
    poisson_solve_dirichlet(&ScalarField::zeros(grid), boundary_data, tol)
}

/// Everything the bounded-domain solver needs about the vortex sources.
#[derive(Debug, Clone)]
pub struct RegularizedBackground {
    pub epsilon: f64,
    pub u0eps: ScalarField,
    pub v0eps: ScalarField,
    pub h1: ScalarField,
    pub h2: ScalarField,
    pub big_u0eps: ScalarField,
    pub big_v0eps: ScalarField,
    /// `u0eps + U0eps`, zero at pinned nodes.
    pub f0: ScalarField,
    pub g0: ScalarField,
    /// Regularized delta sums of each layer.
    pub delta1: ScalarField,
    pub delta2: ScalarField,
}

impl RegularizedBackground {
    pub fn build(
        vortices: &VortexConfiguration,
        epsilon: f64,
        grid: &Arc<Grid>,
        tol: f64,
    ) -> Result<Self> {
        if grid.is_periodic() {
            return Err(Error::WrongGridKind("regularized backgrounds live on Dirichlet grids"));
        }
        grid.domain.check_vortices(vortices)?;
        let (u0eps, v0eps, h1, h2) = background_fields(vortices, epsilon, grid)?;
        let big_u0eps = harmonic_correction(&u0eps.map(|v| -v), tol)?;
        let big_v0eps = if vortices.lower == vortices.upper {
            big_u0eps.clone()
        } else {
            harmonic_correction(&v0eps.map(|v| -v), tol)?
        };
        let sum = |a: &ScalarField, b: &ScalarField| {
            let vals = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
            ScalarField::new(grid.clone(), vals)
        };
        let mut f0 = sum(&u0eps, &big_u0eps)?;
        let mut g0 = sum(&v0eps, &big_v0eps)?;
        for k in 0..grid.len() {
            if grid.is_pinned(k) {
                f0.values_mut()[k] = 0.0;
                g0.values_mut()[k] = 0.0;
            }
        }
        Ok(Self {
            epsilon,
            delta1: regularized_delta_sum(&vortices.upper, epsilon, grid)?,
            delta2: regularized_delta_sum(&vortices.lower, epsilon, grid)?,
            u0eps,
            v0eps,
            h1,
            h2,
            big_u0eps,
            big_v0eps,
            f0,
            g0,
        })
    }

    /// Mirror image with the two layers exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            epsilon: self.epsilon,
            u0eps: self.v0eps.clone(),
            v0eps: self.u0eps.clone(),
            h1: self.h2.clone(),
            h2: self.h1.clone(),
            big_u0eps: self.big_v0eps.clone(),
            big_v0eps: self.big_u0eps.clone(),
            f0: self.g0.clone(),
            g0: self.f0.clone(),
            delta1: self.delta2.clone(),
            delta2: self.delta1.clone(),
        }
    }
}

/// Periodic background functions with `Δ_h u0 = (bumps − mean)` and zero mean.
#[derive(Debug, Clone)]
pub struct TorusBackground {
    pub epsilon: f64,
    pub u0: ScalarField,
    pub v0: ScalarField,
    /// Mean-balanced periodized bump sources, `Δ_h u0` and `Δ_h v0`.
    pub source1: ScalarField,
    pub source2: ScalarField,
}

fn periodized_bumps(points: &[Point], epsilon: f64, grid: &Arc<Grid>, tau: (f64, f64)) -> Result<ScalarField> {
    let mut images = Vec::with_capacity(9 * points.len());
    for p in points {
        for m in -1..=1 {
            for n in -1..=1 {
                images.push(Point::new(p.x + m as f64 * tau.0, p.y + n as f64 * tau.1));
            }
        }
    }
    regularized_delta_sum(&images, epsilon, grid)
}

fn balanced_background(
    points: &[Point],
    epsilon: f64,
    solver: &PeriodicPoisson,
    tau: (f64, f64),
) -> Result<(ScalarField, ScalarField)> {
    let grid = solver.grid();
    let mut src = periodized_bumps(points, epsilon, grid, tau)?;
    let n = grid.len() as f64;
    let mean = src.values().iter().sum::<f64>() / n;
    src.values_mut().iter_mut().for_each(|v| *v -= mean);
    let residual_mean = src.values().iter().sum::<f64>() / n;
    if residual_mean.abs() > 1e-10 {
        return Err(Error::NonZeroMean { mean: residual_mean });
    }
    let u0 = ScalarField::new(grid.clone(), solver.solve(src.values())?)?;
    Ok((u0, src))
}

/// Torus background functions for the given vortices.
pub fn torus_background(
    vortices: &VortexConfiguration,
    solver: &PeriodicPoisson,
    epsilon: f64,
) -> Result<TorusBackground> {
    check_epsilon(epsilon)?;
    let grid = solver.grid();
    let tau = match grid.domain {
        DomainSpec::Torus { tau1, tau2 } => (tau1, tau2),
        _ => return Err(Error::WrongGridKind("torus background needs a periodic grid")),
    };
    grid.domain.check_vortices(vortices)?;
    let (u0, source1) = balanced_background(&vortices.upper, epsilon, solver, tau)?;
    let (v0, source2) = if vortices.lower == vortices.upper {
        (u0.clone(), source1.clone())
    } else {
        balanced_background(&vortices.lower, epsilon, solver, tau)?
    };
    Ok(TorusBackground {
        epsilon,
        u0,
        v0,
        source1,
        source2,
    })
}

impl TorusBackground {
    pub fn swapped(&self) -> Self {
        Self {
            epsilon: self.epsilon,
            u0: self.v0.clone(),
            v0: self.u0.clone(),
            source1: self.source2.clone(),
            source2: self.source1.clone(),
        }
    }
}
