//! Hyperboloid model of hyperbolic space with curvature `-1/K`.
//!
//! Points live in `R^{n+1}` with Minkowski self-inner product `-K` and a
//! positive first coordinate. Tangent vectors at `x` satisfy `<x, v>_L = 0`.
//! Every routine here is a pure function on `f64` slices, so the module is
//! safe to call from any number of threads.

use thiserror::Error;

/// Tangent norms are clipped to this radius before `cosh`/`sinh`.
pub const MAX_TANGENT_NORM: f64 = 32.0;

/// Tolerance used when validating manifold membership and tangency.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("ambient dimension must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("curvature K must be positive and finite, got {0}")]
    Curvature(f64),
    #[error("tangent norm {0} exceeds the overflow guard {MAX_TANGENT_NORM}")]
    Magnitude(f64),
    #[error("point is off the manifold: <x,x>_L = {got}, expected {expected}")]
    OffManifold { got: f64, expected: f64 },
    #[error("vector is not tangent at its base point: <x,v>_L = {0}")]
    NotTangent(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// The manifold has constant curvature `-1/K`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(k: f64) -> Result<Self> {
        if k > 0.0 && k.is_finite() {
            Ok(Self(k))
        } else {
            Err(GeometryError::Curvature(k))
        }
    }

    #[inline]
    pub fn k(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt_k(self) -> f64 {
        self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

/// A point on the hyperboloid, stored as ambient coordinates `x_0..x_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPoint {
    coords: Vec<f64>,
}

impl HyperPoint {
    /// Validates membership (relative tolerance on `<x,x>_L = -K`) and `x_0 > 0`.
    pub fn new(coords: Vec<f64>, k: Curvature) -> Result<Self> {
        if coords.len() < 2 {
            return Err(GeometryError::TooSmall(coords.len()));
        }
        let got = minkowski_inner(&coords, &coords)?;
        let scale = 1.0 + coords.iter().map(|c| c * c).sum::<f64>();
        if coords[0] <= 0.0 || (got + k.k()).abs() > MEMBERSHIP_TOL * scale {
            return Err(GeometryError::OffManifold { got, expected: -k.k() });
        }
        Ok(Self { coords })
    }

    /// Wraps coordinates without validation. Callers guarantee membership.
    pub fn from_coords_unchecked(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    /// `[sqrt(K), 0, ..., 0]` in ambient dimension `n + 1`.
    pub fn origin(n: usize, k: Curvature) -> Self {
        let mut coords = vec![0.0; n + 1];
        coords[0] = k.sqrt_k();
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Manifold dimension `n` (ambient is `n + 1`).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    /// `<x,x>_L + K`, the membership residual.
    pub fn membership_error(&self, k: Curvature) -> f64 {
        minkowski_inner_unchecked(&self.coords, &self.coords) + k.k()
    }
}

/// A vector in the tangent space of `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: HyperPoint,
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: HyperPoint, coords: Vec<f64>) -> Result<Self> {
        if base.coords.len() != coords.len() {
            return Err(GeometryError::Dimension(base.coords.len(), coords.len()));
        }
        let ip = minkowski_inner_unchecked(&base.coords, &coords);
        let base_norm = base.coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        let v_norm = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        if ip.abs() > MEMBERSHIP_TOL * base_norm * v_norm.max(1.0) {
            return Err(GeometryError::NotTangent(ip));
        }
        Ok(Self { base, coords })
    }

    pub fn zero(base: HyperPoint) -> Self {
        let coords = vec![0.0; base.coords.len()];
        Self { base, coords }
    }

    pub(crate) fn from_parts_unchecked(base: HyperPoint, coords: Vec<f64>) -> Self {
        Self { base, coords }
    }

    pub fn base(&self) -> &HyperPoint {
        &self.base
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Minkowski norm `sqrt(<v,v>_L)`, floored at zero.
    pub fn norm(&self) -> f64 {
        minkowski_inner_unchecked(&self.coords, &self.coords).max(0.0).sqrt()
    }
}

/// `-a_0 b_0 + sum_{i>=1} a_i b_i`.
pub fn minkowski_inner(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GeometryError::Dimension(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(GeometryError::TooSmall(a.len()));
    }
    Ok(minkowski_inner_unchecked(a, b))
}

#[inline]
pub(crate) fn minkowski_inner_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let spatial: f64 = a[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum();
    spatial - a[0] * b[0]
}

/// `arcosh(1 + eps)` evaluated without cancellation for small `eps >= 0`.
#[inline]
pub(crate) fn arcosh_one_plus(eps: f64) -> f64 {
    let eps = eps.max(0.0);
    (eps + (eps * (2.0 + eps)).sqrt()).ln_1p()
}

/// Exponential map at `x`. A zero tangent vector maps to `x`.
///
/// Norms above [`MAX_TANGENT_NORM`] are rejected; use [`exp_map_clipped`]
/// where clipping is the desired behaviour.
pub fn exp_map(v: &TangentVector, k: Curvature) -> Result<HyperPoint> {
    let norm = v.norm();
    if !norm.is_finite() || norm > MAX_TANGENT_NORM {
        return Err(GeometryError::Magnitude(norm));
    }
    Ok(exp_map_clipped(v, k))
}

/// Exponential map with the tangent norm clipped to [`MAX_TANGENT_NORM`].
pub fn exp_map_clipped(v: &TangentVector, k: Curvature) -> HyperPoint {
    let x = v.base.coords();
    let norm = v.norm();
    if norm == 0.0 {
        return v.base.clone();
    }
    let sk = k.sqrt_k();
    let clipped = norm.min(MAX_TANGENT_NORM);
    let theta = clipped / sk;
    let (c, s) = (theta.cosh(), theta.sinh());
    let coords = x
        .iter()
        .zip(v.coords())
        .map(|(xi, vi)| c * xi + sk * s * vi / norm)
        .collect();
    HyperPoint { coords }
}

/// Geodesic distance `sqrt(K) * arcosh(-<x,y>_L / K)`.
///
/// The argument is evaluated as `1 + ||x - y||_L^2 / (2K)`, which equals
/// `-<x,y>_L / K` on the manifold and stays accurate near coincidence.
pub fn distance(x: &HyperPoint, y: &HyperPoint, k: Curvature) -> f64 {
    k.sqrt_k() * arcosh_one_plus(sq_gap(x.coords(), y.coords()) / (2.0 * k.k()))
}

/// Squared geodesic distance.
pub fn sq_distance(x: &HyperPoint, y: &HyperPoint, k: Curvature) -> f64 {
    let d = distance(x, y, k);
    d * d
}

#[inline]
fn sq_gap(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..x.len() {
        let d = x[i] - y[i];
        acc += d * d;
    }
    let d0 = x[0] - y[0];
    (acc - d0 * d0).max(0.0)
}

/// Logarithmic map: the tangent vector at `x` pointing to `y` with length
/// `d(x, y)`. Coincident points map to the zero vector.
pub fn log_map(x: &HyperPoint, y: &HyperPoint, k: Curvature) -> TangentVector {
    let inv_k = 1.0 / k.k();
    let ip = minkowski_inner_unchecked(x.coords(), y.coords());
    let dir: Vec<f64> = y
        .coords()
        .iter()
        .zip(x.coords())
        .map(|(yi, xi)| yi + inv_k * ip * xi)
        .collect();
    let dir_norm = minkowski_inner_unchecked(&dir, &dir).max(0.0).sqrt();
    let d = distance(x, y, k);
    if d == 0.0 || dir_norm == 0.0 {
        return TangentVector::zero(x.clone());
    }
    let coords = dir.iter().map(|c| d * c / dir_norm).collect();
    TangentVector::from_parts_unchecked(x.clone(), coords)
}

/// Parallel transport of `v` (tangent at `x`) along the geodesic to `y`.
///
/// Evaluated with the log-map form
/// `v - <log_x(y), v>_L / d^2 * (log_x(y) + log_y(x))`; transport to the
/// same point is the identity.
pub fn parallel_transport(y: &HyperPoint, v: &TangentVector, k: Curvature) -> TangentVector {
    let x = v.base();
    let d = distance(x, y, k);
    if d == 0.0 {
        return TangentVector::from_parts_unchecked(y.clone(), v.coords.clone());
    }
    let log_xy = log_map(x, y, k);
    let log_yx = log_map(y, x, k);
    let coef = minkowski_inner_unchecked(log_xy.coords(), v.coords()) / (d * d);
    let coords = v
        .coords()
        .iter()
        .zip(log_xy.coords().iter().zip(log_yx.coords()))
        .map(|(vi, (a, b))| vi - coef * (a + b))
        .collect();
    TangentVector::from_parts_unchecked(y.clone(), coords)
}

/// `[0 || b]`, a tangent vector at the origin of `H^{len(b), K}`.
pub fn tangent_at_origin(b: &[f64], k: Curvature) -> TangentVector {
    let mut coords = Vec::with_capacity(b.len() + 1);
    coords.push(0.0);
    coords.extend_from_slice(b);
    TangentVector::from_parts_unchecked(HyperPoint::origin(b.len(), k), coords)
}

/// `exp_0(v)` for `v` tangent at the origin.
pub fn exp0(v: &TangentVector, k: Curvature) -> HyperPoint {
    exp_map_clipped(v, k)
}

/// `log_0(x)`.
pub fn log0(x: &HyperPoint, k: Curvature) -> TangentVector {
    log_map(&HyperPoint::origin(x.dim(), k), x, k)
}

/// `exp_0(f(log_0(x)))` with `f` applied to every tangent coordinate.
///
/// `f` sees the spatial coordinates only; the first tangent coordinate at
/// the origin is identically zero and is kept that way.
pub fn hyp_activation(x: &HyperPoint, f: impl Fn(f64) -> f64, k: Curvature) -> HyperPoint {
    let t = log0(x, k);
    let mut coords = t.into_coords();
    coords[0] = 0.0;
    for c in &mut coords[1..] {
        *c = f(*c);
    }
    exp0(
        &TangentVector::from_parts_unchecked(HyperPoint::origin(x.dim(), k), coords),
        k,
    )
}

/// Keeps the spatial coordinates and recomputes `x_0 = sqrt(K + sum x_i^2)`.
pub fn project_to_manifold(raw: &[f64], k: Curvature) -> HyperPoint {
    let mut coords = raw.to_vec();
    let spatial: f64 = raw[1..].iter().map(|c| c * c).sum();
    coords[0] = (k.k() + spatial).sqrt();
    HyperPoint { coords }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k1() -> Curvature {
        Curvature::new(1.0).unwrap()
    }

    #[test]
    fn minkowski_examples() {
        let o = HyperPoint::origin(1, k1());
        assert_eq!(minkowski_inner(o.coords(), o.coords()).unwrap(), -1.0);
        assert_eq!(minkowski_inner(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(minkowski_inner(&[2.0, 1.0], &[2.0, 1.0]).unwrap(), -3.0);
        assert!(matches!(
            minkowski_inner(&[1.0, 2.0], &[1.0]),
            Err(GeometryError::Dimension(2, 1))
        ));
    }

    #[test]
    fn exp_map_closed_form() {
        let o = HyperPoint::origin(1, k1());
        let v = TangentVector::new(o.clone(), vec![0.0, 1.0]).unwrap();
        let y = exp_map(&v, k1()).unwrap();
        assert_abs_diff_eq!(y.coords()[0], 1.0f64.cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(y.coords()[1], 1.0f64.sinh(), epsilon = 1e-12);
        assert_abs_diff_eq!(y.coords()[0], 1.543081, epsilon = 1e-6);
        assert_abs_diff_eq!(y.coords()[1], 1.175201, epsilon = 1e-6);

        let zero = TangentVector::zero(o.clone());
        assert_eq!(exp_map(&zero, k1()).unwrap(), o);
    }

    #[test]
    fn exp_map_rejects_huge_norm() {
        let o = HyperPoint::origin(1, k1());
        let v = TangentVector::new(o, vec![0.0, 40.0]).unwrap();
        assert!(matches!(exp_map(&v, k1()), Err(GeometryError::Magnitude(_))));
        let clipped = exp_map_clipped(&v, k1());
        assert!(clipped.membership_error(k1()).abs() / clipped.coords()[0].powi(2) < 1e-9);
    }

    #[test]
    fn log_map_examples() {
        let o = HyperPoint::origin(1, k1());
        let y = HyperPoint::from_coords_unchecked(vec![1.543081, 1.175201]);
        let v = log_map(&o, &y, k1());
        assert_abs_diff_eq!(v.coords()[0], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(v.coords()[1], 1.0, epsilon = 1e-5);
        let z = log_map(&o, &o, k1());
        assert!(z.coords().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn distance_examples() {
        let o = HyperPoint::origin(1, k1());
        let y = HyperPoint::from_coords_unchecked(vec![1.0f64.cosh(), 1.0f64.sinh()]);
        assert_abs_diff_eq!(distance(&o, &y, k1()), 1.0, epsilon = 1e-7);
        assert_eq!(distance(&y, &y, k1()), 0.0);
    }

    #[test]
    fn transport_identity_when_coincident() {
        let o = HyperPoint::origin(2, k1());
        let v = tangent_at_origin(&[0.3, -0.2], k1());
        let pt = parallel_transport(&o, &v, k1());
        assert_eq!(pt.coords(), v.coords());
    }

    #[test]
    fn tangent_at_origin_examples() {
        let t = tangent_at_origin(&[1.0, 2.0], k1());
        assert_eq!(t.coords(), &[0.0, 1.0, 2.0]);
        assert_eq!(minkowski_inner(t.base().coords(), t.coords()).unwrap(), 0.0);
        let z = tangent_at_origin(&[0.0, 0.0], k1());
        assert!(z.coords().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn activation_examples() {
        let o = HyperPoint::origin(3, k1());
        assert_eq!(hyp_activation(&o, f64::tanh, k1()), o);
        let x = exp0(&tangent_at_origin(&[0.4, -1.2, 0.7], k1()), k1());
        let same = hyp_activation(&x, |c| c, k1());
        for (a, b) in same.coords().iter().zip(x.coords()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn projection_examples() {
        let p = project_to_manifold(&[0.0, 0.0], k1());
        assert_eq!(p.coords(), &[1.0, 0.0]);
        let q = project_to_manifold(&[99.0, 3.0], k1());
        assert_abs_diff_eq!(q.coords()[0], 10f64.sqrt(), epsilon = 1e-15);
        assert_eq!(q.coords()[1], 3.0);
        let on = exp0(&tangent_at_origin(&[0.5, 0.25], k1()), k1());
        let again = project_to_manifold(on.coords(), k1());
        for (a, b) in again.coords().iter().zip(on.coords()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constructors_validate() {
        assert!(Curvature::new(0.0).is_err());
        assert!(HyperPoint::new(vec![1.0, 1.0], k1()).is_err());
        assert!(HyperPoint::new(vec![-1.0, 0.0], k1()).is_err());
        assert!(HyperPoint::new(vec![1.0, 0.0], k1()).is_ok());
        let o = HyperPoint::origin(1, k1());
        assert!(TangentVector::new(o.clone(), vec![1.0, 0.0]).is_err());
        assert!(TangentVector::new(o, vec![0.0, 3.0]).is_ok());
    }
}
