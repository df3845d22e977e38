//! Computational domains, uniform node grids and nodal scalar fields.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Point, VortexConfiguration};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DomainSpec {
    /// Doubly periodic cell `[0, tau1) x [0, tau2)`.
    Torus { tau1: f64, tau2: f64 },
    /// Disk of the given radius centred at the origin.
    Disk { radius: f64 },
    /// Rectangle `[0, lx] x [0, ly]`.
    Rectangle { lx: f64, ly: f64 },
}

impl DomainSpec {
    pub fn area(&self) -> f64 {
        match *self {
            DomainSpec::Torus { tau1, tau2 } => tau1 * tau2,
            DomainSpec::Disk { radius } => PI * radius * radius,
            DomainSpec::Rectangle { lx, ly } => lx * ly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DomainSpec::Torus { tau1, tau2 } => tau1 > 0.0 && tau2 > 0.0,
            DomainSpec::Disk { radius } => radius > 0.0,
            DomainSpec::Rectangle { lx, ly } => lx > 0.0 && ly > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("domain sizes must be positive: {self:?}")))
        }
    }

    /// Whether a point lies strictly inside the domain (the fundamental cell for a torus).
    pub fn contains(&self, pt: Point) -> bool {
        match *self {
            DomainSpec::Torus { tau1, tau2 } => {
                pt.x >= 0.0 && pt.x < tau1 && pt.y >= 0.0 && pt.y < tau2
            }
            DomainSpec::Disk { radius } => pt.norm() < radius,
            DomainSpec::Rectangle { lx, ly } => pt.x > 0.0 && pt.x < lx && pt.y > 0.0 && pt.y < ly,
        }
    }

    pub fn check_vortices(&self, vortices: &VortexConfiguration) -> Result<()> {
        for (layer, pts) in [("upper", &vortices.upper), ("lower", &vortices.lower)] {
            if let Some(pt) = pts.iter().find(|pt| !self.contains(**pt)) {
                return Err(Error::InvalidParameter(format!(
                    "{layer} vortex ({}, {}) lies outside the domain",
                    pt.x, pt.y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

/// A uniform node grid.
///
/// Node `(i, j)` sits at `origin + (i h1, j h2)` and has flat index `i * n2 + j`.
/// Periodic grids satisfy `n h = period`; Dirichlet grids include their boundary
/// nodes, which together with any masked-out nodes are *pinned* (their values are
/// data, not unknowns).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n1: usize,
    pub n2: usize,
    pub h1: f64,
    pub h2: f64,
    pub origin: [f64; 2],
    pub boundary: Boundary,
    pub domain: DomainSpec,
    pinned: Vec<bool>,
    free: Vec<usize>,
}

impl Grid {
    pub fn torus(tau1: f64, tau2: f64, n1: usize, n2: usize) -> Result<Self> {
        let domain = DomainSpec::Torus { tau1, tau2 };
        domain.validate()?;
        if n1 == 0 || n2 == 0 {
            return Err(Error::InvalidParameter("periodic grids need at least one node per side".into()));
        }
        Ok(Self::assemble(
            n1,
            n2,
            tau1 / n1 as f64,
            tau2 / n2 as f64,
            [0.0, 0.0],
            Boundary::Periodic,
            domain,
            vec![false; n1 * n2],
        ))
    }

    /// Rectangle `[0, lx] x [0, ly]` with `n1 x n2` nodes including the boundary.
    pub fn rectangle(lx: f64, ly: f64, n1: usize, n2: usize) -> Result<Self> {
        let domain = DomainSpec::Rectangle { lx, ly };
        domain.validate()?;
        if n1 < 3 || n2 < 3 {
            return Err(Error::InvalidParameter("Dirichlet grids need at least 3 nodes per side".into()));
        }
        let mut pinned = vec![false; n1 * n2];
        for i in 0..n1 {
            for j in 0..n2 {
                pinned[i * n2 + j] = i == 0 || j == 0 || i == n1 - 1 || j == n2 - 1;
            }
        }
        Ok(Self::assemble(
            n1,
            n2,
            lx / (n1 - 1) as f64,
            ly / (n2 - 1) as f64,
            [0.0, 0.0],
            Boundary::Dirichlet,
            domain,
            pinned,
        ))
    }

    /// Disk of the given radius embedded in the square `[-R, R]^2` with `n x n`
    /// nodes; nodes with `|x| >= R` are pinned.
    pub fn disk(radius: f64, n: usize) -> Result<Self> {
        let domain = DomainSpec::Disk { radius };
        domain.validate()?;
        if n < 3 {
            return Err(Error::InvalidParameter("Dirichlet grids need at least 3 nodes per side".into()));
        }
        let h = 2.0 * radius / (n - 1) as f64;
        let mut pinned = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let x = -radius + i as f64 * h;
                let y = -radius + j as f64 * h;
                let edge = i == 0 || j == 0 || i == n - 1 || j == n - 1;
                pinned[i * n + j] = edge || x.hypot(y) >= radius;
            }
        }
        Ok(Self::assemble(
            n,
            n,
            h,
            h,
            [-radius, -radius],
            Boundary::Dirichlet,
            domain,
            pinned,
        ))
    }

    /// Disk grid with a prescribed spacing (the node count is rounded up so that
    /// the spacing is at most `h`).
    pub fn disk_with_spacing(radius: f64, h: f64) -> Result<Self> {
        let n = (2.0 * radius / h - 1e-9).ceil() as usize + 1;
        Self::disk(radius, n)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n1: usize,
        n2: usize,
        h1: f64,
        h2: f64,
        origin: [f64; 2],
        boundary: Boundary,
        domain: DomainSpec,
        pinned: Vec<bool>,
    ) -> Self {
        let free = (0..n1 * n2).filter(|&k| !pinned[k]).collect();
        Self {
            n1,
            n2,
            h1,
            h2,
            origin,
            boundary,
            domain,
            pinned,
            free,
        }
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::Periodic
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n2 + j
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (f64, f64) {
        let i = k / self.n2;
        let j = k % self.n2;
        (
            self.origin[0] + i as f64 * self.h1,
            self.origin[1] + j as f64 * self.h2,
        )
    }

    #[inline]
    pub fn is_pinned(&self, k: usize) -> bool {
        self.pinned[k]
    }

    /// Flat indices of the unknown (non-pinned) nodes in increasing order.
    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn cell_area(&self) -> f64 {
        self.h1 * self.h2
    }

    /// Midpoint quadrature weights: `h1 h2` at every node of the domain, zero at
    /// pinned nodes of a masked disk. Rectangles use half weights on edges and
    /// quarter weights at corners.
    pub fn weights(&self) -> Vec<f64> {
        let w = self.cell_area();
        match self.domain {
            DomainSpec::Torus { .. } => vec![w; self.len()],
            DomainSpec::Disk { .. } => self
                .pinned
                .iter()
                .map(|&p| if p { 0.0 } else { w })
                .collect(),
            DomainSpec::Rectangle { .. } => (0..self.len())
                .map(|k| {
                    let i = k / self.n2;
                    let j = k % self.n2;
                    let fi = if i == 0 || i == self.n1 - 1 { 0.5 } else { 1.0 };
                    let fj = if j == 0 || j == self.n2 - 1 { 0.5 } else { 1.0 };
                    w * fi * fj
                })
                .collect(),
        }
    }

    /// Centre of the domain (the origin for disks).
    pub fn center(&self) -> (f64, f64) {
        match self.domain {
            DomainSpec::Torus { tau1, tau2 } => (0.5 * tau1, 0.5 * tau2),
            DomainSpec::Disk { .. } => (0.0, 0.0),
            DomainSpec::Rectangle { lx, ly } => (0.5 * lx, 0.5 * ly),
        }
    }

    /// Distance of node `k` from the domain centre.
    pub fn radius_of(&self, k: usize) -> f64 {
        let (x, y) = self.coords(k);
        let (cx, cy) = self.center();
        (x - cx).hypot(y - cy)
    }

    /// Bilinear interpolation of nodal values at `(x, y)`; `None` outside the node box.
    pub fn interpolate(&self, values: &[f64], x: f64, y: f64) -> Option<f64> {
        let mut s = (x - self.origin[0]) / self.h1;
        let mut t = (y - self.origin[1]) / self.h2;
        let (n1, n2) = (self.n1 as f64, self.n2 as f64);
        if self.is_periodic() {
            s = s.rem_euclid(n1);
            t = t.rem_euclid(n2);
        } else if s < 0.0 || t < 0.0 || s > n1 - 1.0 || t > n2 - 1.0 {
            return None;
        }
        let i0 = (s.floor() as usize).min(if self.is_periodic() { self.n1 - 1 } else { self.n1 - 2 });
        let j0 = (t.floor() as usize).min(if self.is_periodic() { self.n2 - 1 } else { self.n2 - 2 });
        let fs = s - i0 as f64;
        let ft = t - j0 as f64;
        let i1 = (i0 + 1) % self.n1;
        let j1 = (j0 + 1) % self.n2;
        let v = |i: usize, j: usize| values[i * self.n2 + j];
        Some(
            (1.0 - fs) * (1.0 - ft) * v(i0, j0)
                + fs * (1.0 - ft) * v(i1, j0)
                + (1.0 - fs) * ft * v(i0, j1)
                + fs * ft * v(i1, j1),
        )
    }
}

/// Nodal values of a real field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![c; n],
        }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                f(x, y)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}
