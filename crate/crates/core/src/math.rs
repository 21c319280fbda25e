//! Scalar activations and small vector helpers shared across modules.

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for strictly positive inputs.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-8);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Normalizes `v`, returning the unit vector and the original length.
#[inline]
pub fn normalize(v: &Vec3) -> (Vec3, f64) {
    let n = v.norm();
    if n > 0.0 {
        (v / n, n)
    } else {
        (Vec3::zeros(), 0.0)
    }
}

/// Gradient of `v / |v|` pulled back to `v`.
#[inline]
pub fn normalize_backward(unit: &Vec3, len: f64, grad_unit: &Vec3) -> Vec3 {
    if len <= 0.0 {
        return Vec3::zeros();
    }
    (grad_unit - unit * unit.dot(grad_unit)) / len
}

/// Mirror reflection of `v` about `n` (both pointing away from the surface).
#[inline]
pub fn reflect(v: &Vec3, n: &Vec3) -> Vec3 {
    n * (2.0 * n.dot(v)) - v
}

pub fn is_finite3(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_invert() {
        for &p in &[0.01, 0.3, 0.5, 0.9] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        for &y in &[1e-3, 0.5, 2.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn normalize_backward_matches_difference() {
        let v = Vec3::new(0.3, -1.2, 0.7);
        let g = Vec3::new(0.5, 0.1, -0.4);
        let (u, l) = normalize(&v);
        let an = normalize_backward(&u, l, &g);
        let h = 1e-6;
        for k in 0..3 {
            let mut vp = v;
            vp[k] += h;
            let mut vm = v;
            vm[k] -= h;
            let fd = (normalize(&vp).0.dot(&g) - normalize(&vm).0.dot(&g)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-8);
        }
    }
}
