//! Coupling parameters, the coupling matrix K, regime classification and the
//! closed-form constants of the torus problem (constraint values and the
//! existence threshold).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The coupling parameters `(p, q)` of the bilayer Chern-Simons model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    pub p: f64,
    pub q: f64,
}

impl CouplingParams {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !p.is_finite() || p <= 0.0 {
            return Err(Error::InvalidParameter(format!("p must be positive (got {p})")));
        }
        if !q.is_finite() || q == 0.0 {
            return Err(Error::InvalidParameter("q must be nonzero".into()));
        }
        Ok(Self { p, q })
    }

    /// `p / q`, the ratio that weighs the layer imbalance `N_-`.
    pub fn ratio(&self) -> f64 {
        self.p / self.q
    }
}

/// The symmetric coupling matrix
///
/// ```text
/// K = 1/p [[p+q, p-q], [p-q, p+q]]
/// ```
///
/// stored through its two distinct entries and its determinant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrix {
    pub k11: f64,
    pub k12: f64,
    pub det: f64,
}

impl CouplingMatrix {
    /// `k11 + k12`, identically 2.
    pub fn trace_half_sum(&self) -> f64 {
        self.k11 + self.k12
    }
}

pub fn build_coupling(params: CouplingParams) -> Result<CouplingMatrix> {
    let CouplingParams { p, q } = CouplingParams::new(params.p, params.q)?;
    let k11 = (p + q) / p;
    let k12 = (p - q) / p;
    let det_entries = k11 * k11 - k12 * k12;
    let det = 4.0 * q / p;
    let scale = det.abs().max(f64::MIN_POSITIVE);
    debug_assert!(
        (det_entries - det).abs() <= 1e-12 * scale.max(1.0),
        "det K mismatch: {det_entries} vs {det}"
    );
    Ok(CouplingMatrix { k11, k12, det })
}

/// Which part of the parameter space a coupling matrix falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// `-4 <= det K < 0`: full plane, torus and bounded domains.
    IndefiniteA,
    /// `det K < -4`: torus and bounded domains only.
    IndefiniteB,
    /// `det K > 0`: coercive case, rejected.
    PositiveDefinite,
    /// `det K = 0`: rejected.
    Degenerate,
}

impl Regime {
    pub fn is_indefinite(self) -> bool {
        matches!(self, Regime::IndefiniteA | Regime::IndefiniteB)
    }
}

pub fn classify_regime(k: &CouplingMatrix) -> Regime {
    let regime = if k.det == 0.0 {
        Regime::Degenerate
    } else if k.det > 0.0 {
        Regime::PositiveDefinite
    } else if k.det >= -4.0 {
        Regime::IndefiniteA
    } else {
        Regime::IndefiniteB
    };
    // entry ranges that go with each indefinite case (rounding slack on the closed ends)
    match regime {
        Regime::IndefiniteA => debug_assert!(
            k.k12 > 1.0 && k.k12 <= 2.0 + 1e-14 && k.k11 >= -1e-14 && k.k11 < 1.0,
            "regime A entry ranges violated: {k:?}"
        ),
        Regime::IndefiniteB => {
            debug_assert!(k.k12 > 2.0 && k.k11 < 0.0, "regime B entry ranges violated: {k:?}")
        }
        _ => {}
    }
    regime
}

/// Validates that a coupling is indefinite and returns its matrix and regime.
pub fn require_indefinite(params: CouplingParams) -> Result<(CouplingMatrix, Regime)> {
    let k = build_coupling(params)?;
    let regime = classify_regime(&k);
    if regime.is_indefinite() {
        Ok((k, regime))
    } else {
        Err(Error::OutOfScopeRegime { det: k.det, regime })
    }
}

/// Range of `q` for which `(p, q)` lies in regime A: `-p <= q < 0`.
///
/// For the 5/2 filling factor (`p = 2π/5`) this gives `q >= -2π/5 ≈ -1.2566`,
/// which is wider than the `-1 <= q < 0` quoted in the physics literature for
/// that case; the exact inequality is what is implemented.
pub fn regime_a_q_range(p: f64) -> (f64, f64) {
    (-p, 0.0)
}

/// A point in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.x;
        let dy = y - self.y;
        dx * dx + dy * dy
    }
}

/// Vortex locations of the upper (`p_j`) and lower (`q_j`) layers.
///
/// Repeated points encode vortices of higher multiplicity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VortexConfiguration {
    pub upper: Vec<Point>,
    pub lower: Vec<Point>,
}

impl VortexConfiguration {
    pub fn new(upper: Vec<Point>, lower: Vec<Point>) -> Self {
        Self { upper, lower }
    }

    pub fn n1(&self) -> usize {
        self.upper.len()
    }

    pub fn n2(&self) -> usize {
        self.lower.len()
    }

    pub fn n_plus(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn n_minus(&self) -> i64 {
        self.n1() as i64 - self.n2() as i64
    }

    /// All vortex points of both layers, upper first.
    pub fn merged(&self) -> Vec<Point> {
        self.upper.iter().chain(self.lower.iter()).copied().collect()
    }

    /// The configuration with the two layers exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            upper: self.lower.clone(),
            lower: self.upper.clone(),
        }
    }

    /// Largest vortex modulus (`R_0`); zero when there are no vortices.
    pub fn max_modulus(&self) -> f64 {
        self.upper
            .iter()
            .chain(self.lower.iter())
            .map(Point::norm)
            .fold(0.0, f64::max)
    }
}

/// Smallest torus area admitting a solution:
/// `(π/2)(|p/q| |N_-| + N_+)`.
pub fn threshold_area(params: CouplingParams, vortices: &VortexConfiguration) -> f64 {
    0.5 * PI
        * (params.ratio().abs() * vortices.n_minus().unsigned_abs() as f64
            + vortices.n_plus() as f64)
}

/// Prescribed values of `∫e^u` (alpha) and `∫e^v` (beta) on a torus of the given area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusConstraints {
    pub alpha: f64,
    pub beta: f64,
}

impl TorusConstraints {
    pub fn feasible(&self) -> bool {
        self.alpha > 0.0 && self.beta > 0.0
    }
}

pub fn alpha_beta(
    area: f64,
    params: CouplingParams,
    vortices: &VortexConfiguration,
) -> Result<TorusConstraints> {
    if !(area > 0.0) {
        return Err(Error::InvalidParameter(format!("area must be positive (got {area})")));
    }
    let r = params.ratio();
    let nm = vortices.n_minus() as f64;
    let np = vortices.n_plus() as f64;
    Ok(TorusConstraints {
        alpha: 0.5 * area - 0.25 * PI * (r * nm + np),
        beta: 0.5 * area - 0.25 * PI * (-r * nm + np),
    })
}

/// Predicted values of the quantized integrals for a topological solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargePrediction {
    /// `∫(e^u + e^v - 1) = -(π/2) N_+`
    pub q: f64,
    /// `∫(e^u - e^v) = -(π p / 2q) N_-`
    pub q_tilde: f64,
    /// `2 q Q̃`
    pub phi_cs: f64,
}

pub fn predicted_charges(params: CouplingParams, vortices: &VortexConfiguration) -> ChargePrediction {
    let q = -0.5 * PI * vortices.n_plus() as f64;
    let q_tilde = -PI * params.ratio() * vortices.n_minus() as f64 / 2.0;
    ChargePrediction {
        q,
        q_tilde,
        phi_cs: 2.0 * params.q * q_tilde,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n1: usize, n2: usize) -> VortexConfiguration {
        VortexConfiguration::new(vec![Point::new(0.0, 0.0); n1], vec![Point::new(0.0, 0.0); n2])
    }

    #[test]
    fn coupling_examples() {
        let k = build_coupling(CouplingParams::new(1.0, -1.0).unwrap()).unwrap();
        assert_eq!((k.k11, k.k12, k.det), (0.0, 2.0, -4.0));
        let k = build_coupling(CouplingParams::new(1.0, -0.5).unwrap()).unwrap();
        assert_eq!((k.k11, k.k12, k.det), (0.5, 1.5, -2.0));
        let k = build_coupling(CouplingParams::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!((k.k11, k.k12, k.det), (2.0, 0.0, 4.0));
        assert_eq!(k.trace_half_sum(), 2.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(CouplingParams::new(0.0, -1.0).is_err());
        assert!(CouplingParams::new(-1.0, -1.0).is_err());
        let err = CouplingParams::new(1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("q must be nonzero"));
    }

    #[test]
    fn regimes() {
        let cls = |p, q| classify_regime(&build_coupling(CouplingParams { p, q }).unwrap());
        assert_eq!(cls(1.0, -1.0), Regime::IndefiniteA);
        assert_eq!(cls(1.0, -2.0), Regime::IndefiniteB);
        let k = build_coupling(CouplingParams { p: 1.0, q: -2.0 }).unwrap();
        assert_eq!((k.k11, k.k12, k.det), (-1.0, 3.0, -8.0));
        assert_eq!(cls(1.0, 1.0), Regime::PositiveDefinite);
        let degenerate = CouplingMatrix { k11: 1.0, k12: 1.0, det: 0.0 };
        assert_eq!(classify_regime(&degenerate), Regime::Degenerate);
        assert!(matches!(
            require_indefinite(CouplingParams { p: 1.0, q: 0.5 }),
            Err(Error::OutOfScopeRegime { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let pq = CouplingParams::new(1.0, -1.0).unwrap();
        assert!((threshold_area(pq, &cfg(1, 0)) - PI).abs() < 1e-15);
        assert!((threshold_area(pq, &cfg(1, 1)) - PI).abs() < 1e-15);
        let nu = CouplingParams::new(2.0 * PI / 5.0, -1.0).unwrap();
        let t = threshold_area(nu, &cfg(2, 0));
        let expected = 0.5 * PI * ((2.0 * PI / 5.0) * 2.0 + 2.0);
        assert!((t - expected).abs() < 1e-14);
        assert!((t - 7.0888).abs() < 1e-3);
    }

    #[test]
    fn alpha_beta_examples() {
        let pq = CouplingParams::new(1.0, -1.0).unwrap();
        let area = 4.0 * PI * PI;
        let c = alpha_beta(area, pq, &cfg(1, 0)).unwrap();
        assert!((c.alpha - 2.0 * PI * PI).abs() < 1e-12);
        assert!((c.beta - (2.0 * PI * PI - PI / 2.0)).abs() < 1e-12);
        assert!((c.alpha - 19.739).abs() < 1e-3 && (c.beta - 18.168).abs() < 1e-3);
        let c = alpha_beta(area, pq, &cfg(1, 1)).unwrap();
        assert_eq!(c.alpha, c.beta);
        assert!((c.alpha - (2.0 * PI * PI - PI / 2.0)).abs() < 1e-12);
        let c = alpha_beta(PI, pq, &cfg(1, 0)).unwrap();
        assert_eq!(c.beta, 0.0);
        assert!(!c.feasible());
        assert!(alpha_beta(0.0, pq, &cfg(1, 0)).is_err());
    }

    #[test]
    fn nu_five_halves_q_range() {
        let (lo, hi) = regime_a_q_range(2.0 * PI / 5.0);
        assert!((lo + 1.2566).abs() < 1e-4);
        assert_eq!(hi, 0.0);
        // q = -1.2 is regime A even though it is outside [-1, 0)
        let k = build_coupling(CouplingParams::new(2.0 * PI / 5.0, -1.2).unwrap()).unwrap();
        assert_eq!(classify_regime(&k), Regime::IndefiniteA);
    }

    #[test]
    fn predicted_charge_signs() {
        let pq = CouplingParams::new(1.0, -0.5).unwrap();
        let c = predicted_charges(pq, &cfg(1, 0));
        assert!((c.q_tilde - PI).abs() < 1e-15);
        assert!((c.q + PI / 2.0).abs() < 1e-15);
        assert!(c.phi_cs < 0.0);
        let c = predicted_charges(pq, &cfg(1, 1));
        assert_eq!(c.q_tilde, 0.0);
        assert_eq!(c.phi_cs, 0.0);
        let c = predicted_charges(pq, &cfg(0, 2));
        assert!(c.q_tilde < 0.0 && c.phi_cs > 0.0);
    }
}
