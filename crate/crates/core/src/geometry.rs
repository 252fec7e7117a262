//! Pinhole projection, SE(3) pose algebra and similarity alignment.
//!
//! Pixel coordinates place pixel centers on integer positions, so an image of
//! width `W` spans `[-0.5, W - 0.5]` horizontally. Poses are camera-to-world
//! unless stated otherwise; a relative pose `P^{a->b}` maps points expressed in
//! camera `a` into camera `b`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Shared pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive and finite, got ({fx}, {fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Validation("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics with the principal point at the image center.
    pub fn centered(fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fx, fy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(x.z > 0.0) {
            return Err(Error::NonPositiveDepth(x.z));
        }
        Ok(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    pub fn unproject(&self, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.ray(p) * depth)
    }

    /// Viewing ray through `p` with unit z component.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics for the same camera resampled by `(sx, sy)`.
    pub fn rescaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }
}

pub fn project(k: &Intrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    k.project(x)
}

pub fn unproject(k: &Intrinsics, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    k.unproject(p, depth)
}

/// Skew-symmetric matrix with `hat(a) * b == a.cross(b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = hat(omega);
    let (a, b) = if theta2 < 1e-10 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / theta2)
    };
    Matrix3::identity() + w * a + w * w * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis_sin = vee(&(r - r.transpose())) * 0.5;
    let sin = axis_sin.norm();
    let theta = sin.atan2(cos);
    if theta < 1e-5 {
        // first-order: axis_sin = theta * axis * (1 - theta^2/6)
        return axis_sin * (1.0 + theta * theta / 6.0);
    }
    if sin > 1e-3 {
        return axis_sin * (theta / sin);
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the symmetric part.
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let diag = [b[(0, 0)], b[(1, 1)], b[(2, 2)]];
    let k = (0..3)
        .max_by(|&i, &j| diag[i].total_cmp(&diag[j]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = b.column(k).into();
    axis /= axis.norm();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = hat(omega);
    let (b, c) = if theta2 < 1e-4 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        let half = (0.5 * theta).sin();
        (
            2.0 * half * half / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * b + w * w * c
}

fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = hat(omega);
    let c = if theta2 < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        let half = (0.5 * theta).sin();
        (1.0 - theta * theta.sin() / (4.0 * half * half)) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Rigid transform. Tangent vectors are ordered `(omega, v)`: axis-angle first,
/// translational part second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from parts. The rotation is trusted to be orthonormal.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn exp(tangent: &Vector6<f64>) -> Self {
        let omega = tangent.fixed_rows::<3>(0).into_owned();
        let v = tangent.fixed_rows::<3>(3).into_owned();
        Self {
            rotation: so3_exp(&omega),
            translation: so3_left_jacobian(&omega) * v,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let omega = so3_log(&self.rotation);
        let v = so3_left_jacobian_inv(&omega) * self.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Applies a left perturbation: `exp(delta) * self`.
    pub fn retract(&self, delta: &Vector6<f64>) -> PoseSE3 {
        PoseSE3::exp(delta).compose(self)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let cos = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin = (vee(&(self.rotation - self.rotation.transpose())) * 0.5).norm();
        sin.atan2(cos)
    }
}

pub fn compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

pub fn invert(a: &PoseSE3) -> PoseSE3 {
    a.inverse()
}

pub fn transform(a: &PoseSE3, x: &Vector3<f64>) -> Vector3<f64> {
    a.transform(x)
}

/// Relative pose mapping camera `from` coordinates into camera `to`, given
/// camera-to-world poses.
pub fn relative(from: &PoseSE3, to: &PoseSE3) -> PoseSE3 {
    to.inverse().compose(from)
}

/// The six generators of se(3) as 4x4 matrices, ordered `(omega, v)`.
pub fn se3_generators() -> [Matrix4<f64>; 6] {
    let mut g = [Matrix4::zeros(); 6];
    for (k, gen) in g.iter_mut().enumerate().take(3) {
        let e = Vector3::ith(k, 1.0);
        gen.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&e));
    }
    for k in 0..3 {
        g[3 + k][(k, 3)] = 1.0;
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// Maps a camera-to-world pose through the similarity. The result is again
    /// rigid: rotation is composed, the camera center is transformed.
    pub fn apply_pose(&self, pose: &PoseSE3) -> PoseSE3 {
        PoseSE3::from_parts(
            self.rotation * pose.rotation(),
            self.apply(pose.translation()),
        )
    }
}

/// Least-squares similarity `s R x + t` taking `estimated` onto `reference`.
pub fn umeyama_align(
    estimated: &[Vector3<f64>],
    reference: &[Vector3<f64>],
) -> Result<SimilarityTransform> {
    if estimated.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated points vs {} reference points",
            estimated.len(),
            reference.len()
        )));
    }
    let n = estimated.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "alignment needs at least 3 points, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_x = estimated.iter().fold(Vector3::zeros(), |a, x| a + x) * inv_n;
    let mu_y = reference.iter().fold(Vector3::zeros(), |a, y| a + y) * inv_n;

    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in estimated.iter().zip(reference) {
        let dx = x - mu_x;
        cov += (y - mu_y) * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv_n;
    var_x *= inv_n;

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateConfiguration("SVD failed".into())),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(var_x > 0.0) || sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "cross-covariance is rank-deficient".into(),
        ));
    }

    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * s).trace() / var_x;
    let translation = mu_y - rotation * mu_x * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64) -> PoseSE3 {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..max_angle);
        let omega = axis * angle;
        let v = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        PoseSE3::exp(&Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    #[test]
    fn project_examples() {
        assert_eq!(
            k().project(&Vector3::new(0.0, 0.0, 2.0)).unwrap(),
            Vector2::new(50.0, 50.0)
        );
        assert_eq!(
            k().project(&Vector3::new(1.0, 0.0, 2.0)).unwrap(),
            Vector2::new(100.0, 50.0)
        );
        assert!(matches!(
            k().project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn unproject_examples() {
        assert_eq!(
            k().unproject(&Vector2::new(50.0, 50.0), 3.0).unwrap(),
            Vector3::new(0.0, 0.0, 3.0)
        );
        assert_eq!(
            k().unproject(&Vector2::new(100.0, 50.0), 2.0).unwrap(),
            Vector3::new(1.0, 0.0, 2.0)
        );
        assert!(k().unproject(&Vector2::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Vector2::new(rng.gen_range(-50.0..150.0), rng.gen_range(-50.0..150.0));
            let d = rng.gen_range(0.05..50.0);
            let x = k().unproject(&p, d).unwrap();
            assert_eq!(x.z, d);
            let q = k().project(&x).unwrap();
            assert!((q - p).norm() < 1e-10, "{p} -> {q}");
        }
    }

    #[test]
    fn pose_identities() {
        let id = PoseSE3::identity();
        assert_eq!(id.compose(&id), id);
        assert_eq!(id.transform(&Vector3::new(1.0, 2.0, 3.0)), Vector3::new(1.0, 2.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_pose(&mut rng, 3.0);
            let e = a.compose(&a.inverse());
            assert!((e.matrix() - Matrix4::identity()).abs().max() < 1e-9);
            let back = a.inverse().inverse();
            assert!((back.matrix() - a.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn exp_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_pose(&mut rng, 3.1);
            let r = a.rotation();
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..2000 {
            // sweep the full range, including tiny and near-pi angles
            let max = match i % 4 {
                0 => 1e-6,
                1 => 1e-2,
                2 => std::f64::consts::PI - 1e-3,
                _ => 1.0,
            };
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let omega = axis * rng.gen_range(0.0..max);
            let xi = Vector6::new(
                omega.x,
                omega.y,
                omega.z,
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let back = PoseSE3::exp(&xi).log();
            assert!((back - xi).abs().max() < 1e-9, "{xi} vs {back}");
        }
        let near_pi = Vector6::new(0.0, std::f64::consts::PI - 1e-3, 0.0, 0.3, 0.1, -0.2);
        assert!((PoseSE3::exp(&near_pi).log() - near_pi).abs().max() < 1e-9);
    }

    #[test]
    fn generators_match_exp_derivative() {
        let gens = se3_generators();
        let h = 1e-7;
        for (k, g) in gens.iter().enumerate() {
            let mut xi = Vector6::zeros();
            xi[k] = h;
            let num = (PoseSE3::exp(&xi).matrix() - PoseSE3::exp(&(-xi)).matrix()) / (2.0 * h);
            assert!((num - g).abs().max() < 1e-8);
        }
    }

    #[test]
    fn umeyama_identity() {
        let pts: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.3, 1.0 - i as f64))
            .collect();
        let s = umeyama_align(&pts, &pts).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-9);
        assert!((s.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(s.translation.norm() < 1e-9);
    }

    #[test]
    fn umeyama_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 3.0);
            let est: Vec<_> = (0..20)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                    )
                })
                .collect();
            let reference: Vec<_> = est
                .iter()
                .map(|x| pose.rotation() * x * 2.5 + pose.translation())
                .collect();
            let s = umeyama_align(&est, &reference).unwrap();
            assert!((s.scale - 2.5).abs() < 1e-8);
            assert!((s.rotation - pose.rotation()).abs().max() < 1e-8);
            assert!((s.translation - pose.translation()).abs().max() < 1e-8);
            let rms = (est
                .iter()
                .zip(&reference)
                .map(|(x, y)| (s.apply(x) - y).norm_squared())
                .sum::<f64>()
                / est.len() as f64)
                .sqrt();
            assert!(rms < 1e-8);
        }
    }

    #[test]
    fn umeyama_collinear_is_degenerate() {
        let pts: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            umeyama_align(&pts, &pts),
            Err(Error::DegenerateConfiguration(_))
        ));
    }
}
