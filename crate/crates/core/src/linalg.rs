//! Small dense complex helpers shared by every stage.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense complex matrix used by all stages.
pub type ComplexMatrix = DMatrix<Complex64>;

/// Squared Frobenius norm.
pub fn frob2(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Mean of `|z|^2` over all entries (0 for an empty matrix).
pub fn mean_power(m: &ComplexMatrix) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        frob2(m) / m.len() as f64
    }
}

/// Entrywise (Hadamard) product. Panics on shape mismatch.
pub fn hadamard(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    assert_eq!(a.shape(), b.shape(), "hadamard: shape mismatch");
    a.zip_map(b, |x, y| x * y)
}

pub fn all_finite(m: &ComplexMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Draws one circularly-symmetric complex Gaussian sample with `E|z|^2 = var`.
///
/// Real and imaginary parts are independent `N(0, var/2)`, real part first.
pub fn sample_cn<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Fills an `rows x cols` matrix with i.i.d. `CN(0, var)` entries in row-major order.
pub fn sample_cn_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    var: f64,
) -> ComplexMatrix {
    let mut m = ComplexMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = sample_cn(rng, var);
        }
    }
    m
}

/// Numerical rank: number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &ComplexMatrix, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Logistic function evaluated without overflow for large `|x|`.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cn_samples_have_requested_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_cn_matrix(&mut rng, 200, 200, 2.5);
        let p = mean_power(&m);
        assert!((p / 2.5 - 1.0).abs() < 0.02, "power {p}");
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1e6), 1.0);
        assert_eq!(sigmoid(-1e6), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
    }
}
