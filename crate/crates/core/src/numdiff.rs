//! Central finite differences for checking analytic gradients.

/// Central-difference gradient of `f` at `x`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` with Euclidean norms over the whole
/// vector.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied())
        .max(norm(&mut b.iter().copied()))
        .max(floor);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_gradient(|x| x[0] * x[0] + 3.0 * x[0] * x[1], &[2.0, -1.0], 1e-6);
        assert!(relative_error(&g, &[1.0, 6.0], 1e-12) < 1e-9);
    }

    #[test]
    fn floor_guards_zero() {
        assert_eq!(relative_error(&[0.0], &[0.0], 1e-8), 0.0);
        assert!(relative_error(&[1e-12], &[0.0], 1e-8) < 1e-3);
    }
}
