// SPDX-License-Identifier: MIT OR Apache-2.0

//! Summary statistics used when reporting loss gaps and effects.

use rand::Rng;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 || xs.len() != ys.len() {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("correlation of series with lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Ok(None);
    }
    let (vx, vy) = (variance(xs), variance(ys));
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(None);
    }
    Ok(Some((covariance(xs, ys) / (vx * vy).sqrt()).clamp(-1.0, 1.0)))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    pearson(&ranks(xs), &ranks(ys))
}

/// First and second moments of paired samples `(w_i, z_i)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairMoments {
    pub mean_w: f64,
    pub mean_z: f64,
    pub sd_w: f64,
    pub sd_z: f64,
    pub cov_wz: f64,
    pub n: usize,
}

impl PairMoments {
    pub fn from_samples(w: &[f64], z: &[f64]) -> Result<Self> {
        if w.len() != z.len() || w.is_empty() {
            return Err(Error::invalid("paired samples must be nonempty and equally long"));
        }
        Ok(Self {
            mean_w: mean(w),
            mean_z: mean(z),
            sd_w: variance(w).sqrt(),
            sd_z: variance(z).sqrt(),
            cov_wz: covariance(w, z),
            n: w.len(),
        })
    }

    /// Delta-method standard error of `mean_w / mean_z`.
    /// `None` when the denominator mean is not positive.
    pub fn ratio_se(&self) -> Option<f64> {
        if self.mean_z <= 0.0 || self.n == 0 {
            return None;
        }
        let (mw, mz) = (self.mean_w, self.mean_z);
        // written without dividing by mean_w so that mean_w = 0 stays finite
        let var = (self.sd_w.powi(2) / mz.powi(2) + mw.powi(2) * self.sd_z.powi(2) / mz.powi(4)
            - 2.0 * mw * self.cov_wz / mz.powi(3))
            / self.n as f64;
        Some(var.max(0.0).sqrt())
    }
}

/// Standard deviation of `statistic` over `resamples` bootstrap draws of `data`.
pub fn bootstrap_se<T: Clone, R: Rng>(
    data: &[T],
    resamples: usize,
    rng: &mut R,
    mut statistic: impl FnMut(&[T]) -> f64,
) -> Result<f64> {
    if data.is_empty() || resamples < 2 {
        return Err(Error::invalid("bootstrap needs data and at least two resamples"));
    }
    let mut draw = Vec::with_capacity(data.len());
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        draw.clear();
        draw.extend((0..data.len()).map(|_| data[rng.random_range(0..data.len())].clone()));
        stats.push(statistic(&draw));
    }
    Ok(variance(&stats).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_by_hand() {
        // ranks [1,2,3] vs [3,1,2]: d = [-2, 1, 1], 1 - 6*6/(3*8) = -0.5
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().unwrap() + 0.5).abs() < 1e-12);
        let xs = [0.3, 1.0, -2.0, 5.0];
        assert!((spearman(&xs, &xs).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn moments_and_median() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert!((variance(&[1.0, 2.0, 3.0, 4.0]) - 5.0 / 3.0).abs() < 1e-12);
        assert!((standard_error(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ratio_errors() {
        let m = PairMoments { mean_w: 0.3, mean_z: 0.5, sd_w: 0.0, sd_z: 0.0, cov_wz: 0.0, n: 40 };
        assert_eq!(m.ratio_se(), Some(0.0));
        let w = [0.1, 0.4, 0.2, 0.9];
        let m = PairMoments::from_samples(&w, &w).unwrap();
        assert!(m.ratio_se().unwrap() < 1e-12);
        let m = PairMoments { mean_z: 0.0, ..m };
        assert_eq!(m.ratio_se(), None);
    }
}
