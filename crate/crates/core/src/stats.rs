//! Monte Carlo summary statistics used by the checks and reports.

use nalgebra::{DMatrix, DVector};

/// One-sample Kolmogorov–Smirnov statistic. Sorts `samples` in place.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of the KS statistic at level 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Raw (uncentered) moments of vector draws with their standard errors.
#[derive(Clone, Debug)]
pub struct SecondMoments {
    pub n: usize,
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    /// `E[X Xᵀ]`, which is the covariance when the mean is known to be 0.
    pub second: DMatrix<f64>,
    pub second_se: DMatrix<f64>,
}

pub fn empirical_second_moments(draws: &[DVector<f64>]) -> SecondMoments {
    let n = draws.len();
    let k = draws.first().map_or(0, |d| d.len());
    let nf = n as f64;
    let mut mean = DVector::zeros(k);
    let mut mean_sq = DVector::zeros(k);
    let mut second = DMatrix::zeros(k, k);
    let mut second_sq = DMatrix::zeros(k, k);
    for d in draws {
        for i in 0..k {
            mean[i] += d[i];
            mean_sq[i] += d[i] * d[i];
            for j in 0..k {
                let p = d[i] * d[j];
                second[(i, j)] += p;
                second_sq[(i, j)] += p * p;
            }
        }
    }
    mean /= nf;
    mean_sq /= nf;
    second /= nf;
    second_sq /= nf;
    let var_factor = nf / (nf - 1.0).max(1.0);
    let mean_se = DVector::from_iterator(
        k,
        (0..k).map(|i| ((mean_sq[i] - mean[i] * mean[i]).max(0.0) * var_factor / nf).sqrt()),
    );
    let second_se = DMatrix::from_fn(k, k, |i, j| {
        ((second_sq[(i, j)] - second[(i, j)].powi(2)).max(0.0) * var_factor / nf).sqrt()
    });
    SecondMoments {
        n,
        mean,
        mean_se,
        second,
        second_se,
    }
}

/// Largest `|estimate - target| / se` over all entries; entries whose
/// standard error is 0 must match exactly (up to `abs_floor`).
pub fn max_z_score(second: &SecondMoments, target: &DMatrix<f64>, abs_floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..target.nrows() {
        for j in 0..target.ncols() {
            let dev = (second.second[(i, j)] - target[(i, j)]).abs();
            let se = second.second_se[(i, j)];
            let z = if dev <= abs_floor {
                0.0
            } else if se > 0.0 {
                dev / se
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
    }
    worst
}

pub fn mean_and_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}
