//! Random-scaling variance from running partial sums of the iterate path.

use nalgebra::{DMatrix, DVector};

/// Sufficient statistics for
/// `V = n^{-2} sum_s (S_s - s betabar)(S_s - s betabar)'`, `S_s = sum_{j<=s} beta_j`.
///
/// The path is centred at its first element before accumulation; `V` is
/// unchanged by the shift and the sums stay well scaled on long runs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrvAccumulator {
    n: u64,
    center: DVector<f64>,
    s: DVector<f64>,
    sum_ss: DMatrix<f64>,
    sum_s_s: DVector<f64>,
    sum_s2: f64,
}

impl LrvAccumulator {
    pub fn new(dim: usize) -> Self {
        LrvAccumulator {
            n: 0,
            center: DVector::zeros(dim),
            s: DVector::zeros(dim),
            sum_ss: DMatrix::zeros(dim, dim),
            sum_s_s: DVector::zeros(dim),
            sum_s2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Appends `beta_i`.
    pub fn update(&mut self, beta: &DVector<f64>) {
        assert_eq!(beta.len(), self.dim(), "LRV dimension mismatch");
        self.update_from_fn(|k| beta[k]);
    }

    /// Appends the iterate whose `k`-th coordinate is `f(k)`.
    pub fn update_from_fn(&mut self, f: impl Fn(usize) -> f64) {
        let d = self.dim();
        if self.n == 0 {
            for k in 0..d {
                self.center[k] = f(k);
            }
        }
        for k in 0..d {
            self.s[k] += f(k) - self.center[k];
        }
        self.n += 1;
        let t = self.n as f64;
        for j in 0..d {
            let sj = self.s[j];
            for i in j..d {
                self.sum_ss[(i, j)] += self.s[i] * sj;
            }
        }
        self.sum_s_s.axpy(t, &self.s, 1.0);
        self.sum_s2 += t * t;
    }

    /// Path average `betabar_n`.
    pub fn mean(&self) -> DVector<f64> {
        if self.n == 0 {
            return self.center.clone();
        }
        &self.center + &self.s / self.n as f64
    }

    /// `V_rs`; zero before any update.
    pub fn variance(&self) -> DMatrix<f64> {
        let d = self.dim();
        if self.n == 0 {
            return DMatrix::zeros(d, d);
        }
        let n = self.n as f64;
        let m = &self.s / n;
        let mut v = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in j..d {
                let val = self.sum_ss[(i, j)] - self.sum_s_s[i] * m[j] - m[i] * self.sum_s_s[j] + self.sum_s2 * m[i] * m[j];
                v[(i, j)] = val / (n * n);
                v[(j, i)] = val / (n * n);
            }
        }
        v
    }

    /// Exact accumulator of the transformed path `A beta_i`.
    pub fn transformed(&self, a: &DMatrix<f64>) -> LrvAccumulator {
        let mut full = self.sum_ss.clone();
        for j in 0..full.ncols() {
            for i in 0..j {
                full[(i, j)] = full[(j, i)];
            }
        }
        let mut sum_ss = a * full * a.transpose();
        for j in 0..sum_ss.ncols() {
            for i in 0..j {
                sum_ss[(i, j)] = 0.0;
            }
        }
        LrvAccumulator {
            n: self.n,
            center: a * &self.center,
            s: a * &self.s,
            sum_ss,
            sum_s_s: a * &self.sum_s_s,
            sum_s2: self.sum_s2,
        }
    }
}

/// `n^{-2} sum_s (S_s - s betabar)(S_s - s betabar)'` by a direct pass over a path.
pub fn direct_variance(path: &[DVector<f64>]) -> DMatrix<f64> {
    let d = path[0].len();
    let n = path.len() as f64;
    let bar = path.iter().fold(DVector::zeros(d), |a, b| a + b) / n;
    let mut s = DVector::zeros(d);
    let mut v = DMatrix::zeros(d, d);
    for (idx, b) in path.iter().enumerate() {
        s += b;
        let dev = &s - &bar * (idx + 1) as f64;
        v += &dev * dev.transpose();
    }
    v / (n * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn accumulate(path: &[DVector<f64>]) -> LrvAccumulator {
        let mut acc = LrvAccumulator::new(path[0].len());
        for b in path {
            acc.update(b);
        }
        acc
    }

    #[test]
    fn constant_path_has_zero_variance() {
        let c = DVector::from_vec(vec![1.5, -2.0]);
        let acc = accumulate(&vec![c.clone(); 25]);
        assert_eq!(acc.variance(), DMatrix::zeros(2, 2));
        assert_relative_eq!(acc.mean(), c, epsilon = 1e-15);
    }

    #[test]
    fn two_point_path() {
        let acc = accumulate(&[DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)]);
        assert_relative_eq!(acc.variance()[(0, 0)], 0.25, epsilon = 1e-15);
        assert_eq!(acc.mean()[0], 0.0);
    }

    #[test]
    fn order_dependence_is_preserved() {
        let path: Vec<_> = [3.0, 1.0, -2.0, 0.5, 4.0].iter().map(|&v| DVector::from_element(1, v)).collect();
        // Reversal maps the bridge onto itself, so use a transposition.
        let mut perm = path.clone();
        perm.swap(0, 2);
        let (a, b) = (accumulate(&path).variance(), accumulate(&perm).variance());
        assert_relative_eq!(accumulate(&path).mean(), accumulate(&perm).mean(), epsilon = 1e-14);
        assert!((a[(0, 0)] - b[(0, 0)]).abs() > 1e-3);
    }

    #[test]
    fn transformed_accumulator_is_exact() {
        let path: Vec<_> = (0..60)
            .map(|i| {
                let t = i as f64;
                DVector::from_vec(vec![t.sin(), (0.3 * t).cos() + 0.01 * t, 1.0 / (1.0 + t)])
            })
            .collect();
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.0, 1.0, 1.0]);
        let acc = accumulate(&path).transformed(&a);
        let moved: Vec<_> = path.iter().map(|b| &a * b).collect();
        let direct = accumulate(&moved);
        assert_relative_eq!(acc.variance(), direct.variance(), epsilon = 1e-12);
        assert_relative_eq!(acc.mean(), direct.mean(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn finalization_matches_direct_pass(
            rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 1..80),
            shift in -1e3..1e3f64,
        ) {
            let path: Vec<_> = rows.iter().map(|r| DVector::from_vec(r.iter().map(|v| v + shift).collect())).collect();
            let online = accumulate(&path).variance();
            let direct = direct_variance(&path);
            let scale = direct.amax().max(1.0);
            prop_assert!((&online - &direct).amax() <= 1e-10 * scale);
            // symmetric positive semidefinite
            prop_assert_eq!(&online, &online.transpose());
            let (lo, hi) = linalg::extreme_eigenvalues(&online);
            prop_assert!(lo >= -1e-12 * hi.abs().max(1.0));
        }
    }
}
