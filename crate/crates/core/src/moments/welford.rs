use nalgebra::{DMatrix, DVector};

/// Online mean and co-moment of a vector stream (population normalization).
#[derive(Debug, Clone)]
pub struct WelfordCov {
    count: u64,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl WelfordCov {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: DVector::zeros(dim), comoment: DMatrix::zeros(dim, dim) }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let nf = self.count as f64;
        let dim = self.mean.len();
        let delta: Vec<f64> = (0..dim).map(|i| x[i] - self.mean[i]).collect();
        for i in 0..dim {
            self.mean[i] += delta[i] / nf;
        }
        for j in 0..dim {
            let after = x[j] - self.mean[j];
            if after == 0.0 {
                continue;
            }
            for i in 0..dim {
                self.comoment[(i, j)] += delta[i] * after;
            }
        }
    }

    /// Combine with another accumulator (pairwise update of Chan et al.).
    pub fn merge(&mut self, other: &WelfordCov) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let total = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += &other.comoment;
        self.comoment += &delta * delta.transpose() * (na * nb / total);
        self.mean += &delta * (nb / total);
        self.count += other.count;
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance with divisor N.
    pub fn covariance(&self) -> DMatrix<f64> {
        if self.count == 0 {
            return self.comoment.clone();
        }
        &self.comoment / self.count as f64
    }
}

/// Merge accumulators pairwise in a fixed tree order.
pub fn tree_merge(mut parts: Vec<WelfordCov>) -> Option<WelfordCov> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Scalar running mean and second central moment.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Variance with divisor N.
    pub fn population_variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_matches_single_pass() {
        let rows: Vec<Vec<f64>> =
            (0..50).map(|t| vec![(t % 3) as f64, ((t * 7) % 5) as f64 * 0.5, (t as f64).sin()]).collect();
        let mut whole = WelfordCov::new(3);
        rows.iter().for_each(|r| whole.push(r));
        let parts: Vec<WelfordCov> = rows
            .chunks(7)
            .map(|c| {
                let mut w = WelfordCov::new(3);
                c.iter().for_each(|r| w.push(r));
                w
            })
            .collect();
        let merged = tree_merge(parts).unwrap();
        assert_eq!(merged.count(), 50);
        assert!((merged.covariance() - whole.covariance()).abs().max() < 1e-12);
        assert!((merged.mean() - whole.mean()).abs().max() < 1e-12);

        let mut direct = DMatrix::zeros(3, 3);
        let mean = whole.mean().clone();
        for r in &rows {
            let d = DVector::from_column_slice(r) - &mean;
            direct += &d * d.transpose();
        }
        direct /= 50.0;
        assert!((direct - whole.covariance()).abs().max() < 1e-12);
    }

    #[test]
    fn scalar_variance() {
        let mut w = Welford::default();
        for x in [1.0, 2.0, 3.0, 4.0] {
            w.push(x);
        }
        assert!((w.mean() - 2.5).abs() < 1e-15);
        assert!((w.population_variance() - 1.25).abs() < 1e-15);
        assert!((w.sample_variance() - 5.0 / 3.0).abs() < 1e-15);
    }
}
