//! Offline 2SLS and two-step efficient GMM.
//!
//! Both are computed from normal equations accumulated in one pass over the
//! data, plus a second pass for the residual moment covariance.
//! [`OfflinePass`] and [`ResidualPass`] expose the two passes for data that
//! is streamed rather than held in memory.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{Dims, Observation};

/// Point estimate with its asymptotic variance at the `sqrt(n)` scale, so
/// that standard errors are `sqrt(avar_kk / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineEstimate {
    pub beta: DVector<f64>,
    pub avar: DMatrix<f64>,
    pub n: usize,
}

impl OfflineEstimate {
    pub fn std_error(&self, k: usize) -> f64 {
        (self.avar[(k, k)] / self.n as f64).sqrt()
    }
}

/// First pass: sums of `z x'`, `z z'` and `z y`.
#[derive(Debug, Clone)]
pub struct OfflinePass {
    dims: Dims,
    n: usize,
    zx: DMatrix<f64>,
    zz: DMatrix<f64>,
    zy: DVector<f64>,
}

impl OfflinePass {
    pub fn new(dims: Dims) -> Self {
        OfflinePass {
            dims,
            n: 0,
            zx: DMatrix::zeros(dims.d_g, dims.d_beta),
            zz: DMatrix::zeros(dims.d_g, dims.d_g),
            zy: DVector::zeros(dims.d_g),
        }
    }

    pub fn add(&mut self, o: &Observation) -> Result<()> {
        o.check(self.dims)?;
        self.zx.ger(1.0, &o.z, &o.x, 1.0);
        self.zz.syger(1.0, &o.z, &o.z, 1.0);
        self.zy.axpy(o.y, &o.z, 1.0);
        self.n += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    fn means(&self) -> Result<Sums> {
        if self.n == 0 {
            return Err(Error::InvalidInput("empty data set".into()));
        }
        let inv_n = 1.0 / self.n as f64;
        let mut zz = &self.zz * inv_n;
        fill_upper(&mut zz);
        Ok(Sums { dims: self.dims, n: self.n, zx: &self.zx * inv_n, zz, zy: &self.zy * inv_n })
    }

    /// 2SLS point estimate from the first pass alone.
    pub fn two_sls_point(&self) -> Result<DVector<f64>> {
        let sums = self.means()?;
        let w = sums.gram_inverse()?;
        Ok(sums.weighted(&w)?.0)
    }

    /// Solves the first step; the returned accumulator takes the second pass.
    pub fn first_step(&self) -> Result<ResidualPass> {
        let sums = self.means()?;
        let w = sums.gram_inverse()?;
        let (beta, a_inv) = sums.weighted(&w)?;
        let d_g = self.dims.d_g;
        Ok(ResidualPass { sums, w, beta, a_inv, omega: DMatrix::zeros(d_g, d_g), n: 0 })
    }
}

/// Second pass: `sum e_i^2 z_i z_i'` at the 2SLS residuals.
#[derive(Debug, Clone)]
pub struct ResidualPass {
    sums: Sums,
    w: DMatrix<f64>,
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    omega: DMatrix<f64>,
    n: usize,
}

impl ResidualPass {
    pub fn first_step_beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn add(&mut self, o: &Observation) -> Result<()> {
        o.check(self.sums.dims)?;
        let e = o.y - o.x.dot(&self.beta);
        self.omega.syger(e * e, &o.z, &o.z, 1.0);
        self.n += 1;
        Ok(())
    }

    /// 2SLS with its sandwich variance, and two-step GMM.
    pub fn finish(&self) -> Result<(OfflineEstimate, OfflineEstimate)> {
        if self.n != self.sums.n {
            return Err(Error::InvalidInput(format!(
                "second pass saw {} observations, first pass {}",
                self.n, self.sums.n
            )));
        }
        let mut omega = &self.omega / self.n as f64;
        fill_upper(&mut omega);
        let avar1 = sandwich(&self.sums.zx, &self.w, &omega, &self.a_inv);
        let w2 = invert_gram(&omega, "residual moment covariance is singular")?;
        let (b2, mut avar2) = self.sums.weighted(&w2)?;
        linalg::symmetrize(&mut avar2);
        Ok((
            OfflineEstimate { beta: self.beta.clone(), avar: avar1, n: self.n },
            OfflineEstimate { beta: b2, avar: avar2, n: self.n },
        ))
    }
}

/// Sample means `mean(z x')`, `mean(z z')`, `mean(z y)`.
#[derive(Debug, Clone)]
struct Sums {
    dims: Dims,
    n: usize,
    zx: DMatrix<f64>,
    zz: DMatrix<f64>,
    zy: DVector<f64>,
}

impl Sums {
    /// `argmin (Phi b - zy)' W (Phi b - zy)` and `(Phi' W Phi)^{-1}`.
    fn weighted(&self, w: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let pw = self.zx.transpose() * w;
        let mut a = &pw * &self.zx;
        linalg::symmetrize(&mut a);
        let (_, rank) = linalg::sym_pinv(&a);
        let a_inv = linalg::spd_inverse(&a)
            .filter(|_| rank == self.dims.d_beta)
            .ok_or_else(|| Error::SingularDesign("Phi' W Phi is singular".into()))?;
        let beta = &a_inv * (pw * &self.zy);
        Ok((beta, a_inv))
    }

    fn gram_inverse(&self) -> Result<DMatrix<f64>> {
        invert_gram(&self.zz, "instrument Gram matrix is singular")
    }
}

fn fill_upper(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            a[(i, j)] = a[(j, i)];
        }
    }
}

fn invert_gram(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (lo, hi) = linalg::extreme_eigenvalues(a);
    if !(lo > linalg::PINV_REL_TOL * hi) {
        return Err(Error::SingularDesign(what.into()));
    }
    linalg::spd_inverse(a).ok_or_else(|| Error::SingularDesign(what.into()))
}

fn sandwich(phi: &DMatrix<f64>, w: &DMatrix<f64>, omega: &DMatrix<f64>, a_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let b = a_inv * phi.transpose() * w;
    let mut v = &b * omega * b.transpose();
    linalg::symmetrize(&mut v);
    v
}

fn first_pass(data: &[Observation]) -> Result<OfflinePass> {
    let first = data.first().ok_or_else(|| Error::InvalidInput("empty data set".into()))?;
    let dims = first.dims();
    Dims::new(dims.d_beta, dims.d_g)?;
    let mut pass = OfflinePass::new(dims);
    for o in data {
        pass.add(o)?;
    }
    Ok(pass)
}

/// 2SLS point estimate only.
pub fn two_sls_point(data: &[Observation]) -> Result<DVector<f64>> {
    first_pass(data)?.two_sls_point()
}

/// 2SLS with the heteroskedasticity-robust sandwich variance
/// `A Phi' W Omega W Phi A`, `A = (Phi' W Phi)^{-1}`.
pub fn offline_2sls(data: &[Observation]) -> Result<OfflineEstimate> {
    let mut second = first_pass(data)?.first_step()?;
    for o in data {
        second.add(o)?;
    }
    let mut omega = &second.omega / second.n as f64;
    fill_upper(&mut omega);
    let avar = sandwich(&second.sums.zx, &second.w, &omega, &second.a_inv);
    Ok(OfflineEstimate { beta: second.beta, avar, n: second.n })
}

/// Two-step efficient GMM: 2SLS first step, `Omega` from its residuals, then
/// the `Omega^{-1}`-weighted estimator with `avar = (Phi' Omega^{-1} Phi)^{-1}`.
pub fn offline_gmm_two_step(data: &[Observation]) -> Result<OfflineEstimate> {
    Ok(offline_pair(data)?.1)
}

/// 2SLS and two-step GMM on the same data, sharing the normal equations and
/// the first-step `Omega`.
pub fn offline_pair(data: &[Observation]) -> Result<(OfflineEstimate, OfflineEstimate)> {
    let mut second = first_pass(data)?.first_step()?;
    for o in data {
        second.add(o)?;
    }
    second.finish()
}
