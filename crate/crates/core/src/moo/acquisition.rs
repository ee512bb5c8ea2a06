//! Monte-Carlo noisy expected hypervolume improvement.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::pareto::hypervolume_clipped;
use super::{GpSurrogate, MooError, ObjectivePoint, ReferencePoint};
use crate::seed;

/// Common random numbers: `samples x width` standard normals for each of the two objectives.
#[derive(Debug, Clone)]
pub struct StandardNormals {
    samples: usize,
    width: usize,
    accuracy: Vec<f64>,
    latency: Vec<f64>,
}

impl StandardNormals {
    pub fn draw(samples: usize, width: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "nehvi/normals");
        let mut next = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let accuracy = next(samples * width);
        let latency = next(samples * width);
        StandardNormals { samples, width, accuracy, latency }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    fn row(data: &[f64], width: usize, s: usize, n: usize) -> &[f64] {
        &data[s * width..s * width + n]
    }
}

/// Lower-triangular `L` with `L L^T = m` for symmetric positive semi-definite `m`; columns
/// with a vanishing pivot are zeroed.
pub fn psd_cholesky(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= tol {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let s = m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / ljj;
        }
    }
    l
}

fn correlated(mean: &[f64], l: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    for i in 0..mean.len() {
        let mut v = mean[i];
        for k in 0..=i {
            v += l[(i, k)] * z[k];
        }
        out[i] = v;
    }
}

/// NEHVI for one candidate given the joint posterior over `m` baseline points followed by
/// the candidate (index `m`), for both objectives.
pub fn nehvi_from_posterior(
    accuracy_mean: &[f64],
    accuracy_cov: &DMatrix<f64>,
    latency_mean: &[f64],
    latency_cov: &DMatrix<f64>,
    reference: ReferencePoint,
    normals: &StandardNormals,
) -> f64 {
    let n = accuracy_mean.len();
    assert!(n >= 1 && n <= normals.width, "posterior wider than the drawn normals");
    let la = psd_cholesky(accuracy_cov);
    let ll = psd_cholesky(latency_cov);
    let (mut fa, mut fl) = (vec![0.0; n], vec![0.0; n]);
    let mut points = Vec::with_capacity(n);
    let mut total = 0.0;
    for s in 0..normals.samples {
        correlated(accuracy_mean, &la, StandardNormals::row(&normals.accuracy, normals.width, s, n), &mut fa);
        correlated(latency_mean, &ll, StandardNormals::row(&normals.latency, normals.width, s, n), &mut fl);
        points.clear();
        points.extend((0..n - 1).map(|i| ObjectivePoint::new(fa[i], fl[i])));
        let base = hypervolume_clipped(&points, reference);
        points.push(ObjectivePoint::new(fa[n - 1], fl[n - 1]));
        total += (hypervolume_clipped(&points, reference) - base).max(0.0);
    }
    total / normals.samples as f64
}

/// Scores each candidate by the expected hypervolume gain over the baseline points, with the
/// baseline objectives themselves re-drawn from the posterior in every sample.
pub fn nehvi_acquisition(
    gp_accuracy: &GpSurrogate,
    gp_latency: &GpSurrogate,
    candidates: &[Vec<f64>],
    baseline: &[Vec<f64>],
    reference: ReferencePoint,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, MooError> {
    if gp_accuracy.is_empty() || gp_latency.is_empty() {
        return Err(MooError::TooFewObservations { needed: 2, got: 0 });
    }
    let normals = StandardNormals::draw(mc_samples, baseline.len() + 1, seed);
    let mut xs: Vec<Vec<f64>> = baseline.to_vec();
    xs.push(Vec::new());
    candidates
        .iter()
        .map(|c| {
            *xs.last_mut().expect("slot") = c.clone();
            let (ma, ca) = gp_accuracy.posterior_joint(&xs)?;
            let (ml, cl) = gp_latency.posterior_joint(&xs)?;
            Ok(nehvi_from_posterior(&ma, &ca, &ml, &cl, reference, &normals))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: ReferencePoint = ReferencePoint { accuracy_floor: 0.0, latency_ceiling: 12.0 };

    fn point_mass(front: &[(f64, f64)], cand: (f64, f64)) -> f64 {
        let n = front.len() + 1;
        let acc: Vec<f64> = front.iter().map(|p| p.0).chain([cand.0]).collect();
        let lat: Vec<f64> = front.iter().map(|p| p.1).chain([cand.1]).collect();
        let zero = DMatrix::zeros(n, n);
        nehvi_from_posterior(&acc, &zero, &lat, &zero, REF, &StandardNormals::draw(16, n, 1))
    }

    #[test]
    fn dominated_point_mass_scores_zero() {
        assert_eq!(point_mass(&[(0.9, 10.0), (0.8, 6.0)], (0.7, 11.0)), 0.0);
    }

    #[test]
    fn dominating_point_mass_scores_exact_gain() {
        let front = [(0.9, 10.0), (0.8, 6.0)];
        let gain = point_mass(&front, (0.95, 5.0));
        let before = hypervolume_clipped(&[ObjectivePoint::new(0.9, 10.0), ObjectivePoint::new(0.8, 6.0)], REF);
        let after = hypervolume_clipped(&[ObjectivePoint::new(0.95, 5.0)], REF);
        assert!((gain - (after - before)).abs() < 1e-12);
    }

    #[test]
    fn psd_cholesky_reconstructs_and_handles_zeros() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let l = psd_cholesky(&m);
        assert!((&l * l.transpose() - &m).abs().max() < 1e-12);
        assert_eq!(l[(2, 2)], 0.0);
    }

    #[test]
    fn scores_are_nonnegative_and_seeded() {
        let n = 3;
        let acc = [0.5, 0.6, 0.55];
        let lat = [5.0, 7.0, 6.0];
        let mut cov = DMatrix::identity(n, n) * 0.01;
        cov[(0, 2)] = 0.005;
        cov[(2, 0)] = 0.005;
        let a = nehvi_from_posterior(&acc, &cov, &lat, &cov, REF, &StandardNormals::draw(200, n, 9));
        let b = nehvi_from_posterior(&acc, &cov, &lat, &cov, REF, &StandardNormals::draw(200, n, 9));
        assert!(a >= 0.0);
        assert_eq!(a, b);
    }
}
