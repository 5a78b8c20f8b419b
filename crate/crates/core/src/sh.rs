//! Real spherical-harmonic basis (3DGS sign convention) up to degree 3, with
//! analytic derivatives with respect to the direction.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 3;

/// The constant degree-0 basis value.
pub const Y0: f64 = 0.282_094_791_773_878_14;
const C0: f64 = Y0;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for `degree`.
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose basis count is `b`, if `b` is a perfect square `<= 16`.
pub fn degree_for_count(b: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&l| basis_count(l) == b)
}

/// Basis values and their gradients with respect to `(x, y, z)`, treating
/// the direction components as independent.
pub fn basis_with_grad(degree: usize, d: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let [x, y, z] = d;
    let mut v = vec![C0];
    let mut g = vec![[0.0; 3]];
    if degree >= 1 {
        v.extend([-C1 * y, C1 * z, -C1 * x]);
        g.extend([[0.0, -C1, 0.0], [0.0, 0.0, C1], [-C1, 0.0, 0.0]]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v.extend([
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]);
        g.extend([
            [C2[0] * y, C2[0] * x, 0.0],
            [0.0, C2[1] * z, C2[1] * y],
            [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z],
            [C2[3] * z, 0.0, C2[3] * x],
            [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0],
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v.extend([
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]);
        g.extend([
            [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
            [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
            [-2.0 * C3[2] * x * y, C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * C3[2] * y * z],
            [-6.0 * C3[3] * x * z, -6.0 * C3[3] * y * z, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
            [C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * C3[4] * x * y, 8.0 * C3[4] * x * z],
            [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)],
            [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0],
        ]);
    }
    (v, g)
}

pub fn basis(degree: usize, d: [f64; 3]) -> Vec<f64> {
    basis_with_grad(degree, d).0
}

/// Unclamped color `0.5 + sum_b Y_b(d) k_{c,b}` per channel; `coeffs` is
/// channel-major with `B` coefficients per channel.
pub fn raw_color(coeffs: &[f64], basis: &[f64]) -> [f64; 3] {
    let b = basis.len();
    let mut out = [0.5; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o += coeffs[c * b..(c + 1) * b].iter().zip(basis).map(|(k, y)| k * y).sum::<f64>();
    }
    out
}

/// View-dependent color of one Gaussian, clamped to `[0, 1]`.
pub fn sh_to_color(coeffs: &[f64], degree: usize, view_dir: [f64; 3]) -> Result<[f64; 3]> {
    let norm = view_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::NonUnitDirection(norm));
    }
    if degree > MAX_DEGREE || coeffs.len() != 3 * basis_count(degree) {
        return Err(Error::shape(format!(
            "{} SH coefficients for degree {degree}",
            coeffs.len()
        )));
    }
    let rgb = raw_color(coeffs, &basis(degree, view_dir));
    Ok(rgb.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coefficients_give_mid_gray() {
        let c = sh_to_color(&[0.0; 12], 1, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c, [0.5; 3]);
    }

    #[test]
    fn degree_zero_is_isotropic() {
        let mut k = [0.0; 12];
        k[0] = 0.8;
        k[4] = -0.3;
        k[8] = 5.0;
        let s = 1.0 / 3f64.sqrt();
        for d in [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [s, s, -s]] {
            let c = sh_to_color(&k, 1, d).unwrap();
            assert!((c[0] - (0.5 + C0 * 0.8)).abs() < 1e-15);
            assert!((c[1] - (0.5 - C0 * 0.3)).abs() < 1e-15);
            assert_eq!(c[2], 1.0);
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(matches!(
            sh_to_color(&[0.0; 12], 1, [0.0, 0.0, 1.1]),
            Err(Error::NonUnitDirection(_))
        ));
    }

    #[test]
    fn basis_gradient_matches_central_differences() {
        let d = [0.3, -0.5, 0.81];
        let h = 1e-6;
        let (_, g) = basis_with_grad(3, d);
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let (vp, vm) = (basis(3, p), basis(3, m));
            for b in 0..16 {
                let fd = (vp[b] - vm[b]) / (2.0 * h);
                assert!((fd - g[b][axis]).abs() < 1e-8, "b={b} axis={axis}");
            }
        }
    }

    #[test]
    fn degree_counts() {
        assert_eq!(basis_count(1), 4);
        assert_eq!(degree_for_count(9), Some(2));
        assert_eq!(degree_for_count(5), None);
    }
}
