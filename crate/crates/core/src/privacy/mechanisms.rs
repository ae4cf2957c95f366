use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One Laplace draw with scale `b` by inverse CDF.
pub fn laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `ε = 2√2 / λ` for Laplace noise of per-coordinate standard deviation
/// `λ`; `None` when label noise is off.
pub fn label_epsilon(lambda: f64) -> Option<f64> {
    (lambda > 0.0).then(|| 2.0 * 2f64.sqrt() / lambda)
}

/// Adds Laplace noise (standard deviation `lambda` per coordinate) to the
/// one-hot encoding of each label and takes the argmax. With one class the
/// label is a regression target and gets the noise directly.
pub fn perturb_labels<R: Rng + ?Sized>(
    y: &[f64],
    class_count: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<f64>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("label noise must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok((y.to_vec(), None));
    }
    let b = lambda / 2f64.sqrt();
    let out = if class_count <= 1 {
        y.iter().map(|&v| v + laplace(rng, b)).collect()
    } else {
        y.iter()
            .map(|&v| {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for c in 0..class_count {
                    let hot = if c == v as usize { 1.0 } else { 0.0 };
                    let noisy = hot + laplace(rng, b);
                    if noisy > best.0 {
                        best = (noisy, c);
                    }
                }
                best.1 as f64
            })
            .collect()
    };
    Ok((out, label_epsilon(lambda)))
}

/// Scales each row to L2 norm at most `clip`.
pub fn clip_rows(rows: &mut Array2<f64>, clip: f64) {
    for mut row in rows.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > clip {
            row *= clip / norm;
            // Rounding can leave the norm one ulp above `clip`.
            while row.dot(&row).sqrt() > clip {
                row *= 1.0 - f64::EPSILON;
            }
        }
    }
}

/// Clipped sum of per-sample gradients plus `N(0, σ²C²)` per coordinate.
pub fn noisy_clipped_sum<R: Rng + ?Sized>(
    per_sample: ArrayView2<f64>,
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("clipping threshold must be > 0, got {clip}")));
    }
    let mut rows = per_sample.to_owned();
    clip_rows(&mut rows, clip);
    let mut sum = rows.sum_axis(ndarray::Axis(0));
    if sigma > 0.0 {
        for v in sum.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sigma * clip * e;
        }
    }
    Ok(sum)
}

/// `(1/B)(Σ_j Clip(g_j, C) + N(0, σ²C²))` over the `B` rows.
pub fn clip_and_noise<R: Rng + ?Sized>(
    per_sample: ArrayView2<f64>,
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let b = per_sample.nrows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut g = noisy_clipped_sum(per_sample, clip, sigma, rng)?;
    g /= b as f64;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = array![[0.3, 0.4], [0.0, -0.5]];
        let m = clip_and_noise(g.view(), 1.0, 0.0, &mut rng).unwrap();
        assert!((m[0] - 0.15).abs() < 1e-15 && (m[1] + 0.05).abs() < 1e-15);
        let big = array![[2.0, 1.0, 2.0]];
        let c = clip_and_noise(big.view(), 1.0, 0.0, &mut rng).unwrap();
        for (a, b) in c.iter().zip([2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(clip_and_noise(big.view(), 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn label_noise_off_and_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, eps) = perturb_labels(&[0.0, 1.0, 2.0], 3, 0.0, &mut rng).unwrap();
        assert_eq!(y, vec![0.0, 1.0, 2.0]);
        assert_eq!(eps, None);
        assert!((label_epsilon(0.5).unwrap() - 4.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(perturb_labels(&[0.0], 2, -1.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let b = 0.7;
        let xs: Vec<f64> = (0..n).map(|_| laplace(&mut rng, b)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var / (2.0 * b * b) - 1.0).abs() < 0.02);
    }
}
