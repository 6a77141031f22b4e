//! Online Durbin-Wu-Hausman endogeneity test.
//!
//! An S2SLS path `beta_i` and a stochastic OLS path `alpha_i` are run side by
//! side on the same stream. Under exogeneity both converge to the same limit;
//! the test compares their averages on a chosen index set using the
//! random-scaling variance of the stacked path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::critical::{critical_value, StatisticForm};
use super::lrv::LrvAccumulator;
use super::wald::random_scaling_quadratic;
use super::TestResult;
use crate::error::{Error, Result};
use crate::learning_rate::LearningRateSchedule;
use crate::linalg;
use crate::moments::{Form, MomentData, Observation};
use crate::s2sls::{self, Beta0, OnlineState, DIVERGENCE_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OlsMode {
    /// `alpha <- alpha - gamma P x (x'alpha - y)` with `P` the running inverse
    /// regressor Gram matrix.
    #[default]
    Preconditioned,
    /// `alpha <- alpha - gamma x (x'alpha - y)`.
    Plain,
}

impl std::str::FromStr for OlsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "preconditioned" => Ok(OlsMode::Preconditioned),
            "plain" => Ok(OlsMode::Plain),
            _ => Err(Error::Config(format!("unknown OLS mode '{s}' (preconditioned or plain)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DwhState {
    iv: OnlineState,
    alpha: DVector<f64>,
    alpha_bar: DVector<f64>,
    p: DMatrix<f64>,
    mode: OlsMode,
    sub: Vec<usize>,
    lrv: LrvAccumulator,
    px: DVector<f64>,
}

impl DwhState {
    /// IV state as in [`s2sls::init_state`]; `alpha_0` is the OLS fit on the
    /// initialization sample (or zero / the given vector, following `beta0`).
    pub fn init(
        init_sample: &[Observation],
        eta0: f64,
        schedule: LearningRateSchedule,
        beta0: Beta0,
        mode: OlsMode,
        sub_indices: &[usize],
    ) -> Result<Self> {
        let alpha0 = match &beta0 {
            Beta0::Offline2sls => None,
            Beta0::Zero => Some(DVector::zeros(init_sample.first().map_or(0, |o| o.x.len()))),
            Beta0::Given(b) => Some(b.clone()),
        };
        let iv = s2sls::init_state(init_sample, eta0, schedule, beta0)?;
        let d_beta = iv.dims().d_beta;
        let n0 = init_sample.len() as f64;
        let mut gram = DMatrix::zeros(d_beta, d_beta);
        let mut xy = DVector::zeros(d_beta);
        for o in init_sample {
            gram.ger(1.0 / n0, &o.x, &o.x, 1.0);
            xy.axpy(o.y / n0, &o.x, 1.0);
        }
        let (lo, hi) = linalg::extreme_eigenvalues(&gram);
        if !(lo > linalg::PINV_REL_TOL * hi) {
            return Err(Error::SingularDesign("regressor Gram matrix of the initialization sample is singular".into()));
        }
        let p0 = linalg::spd_inverse(&gram).ok_or_else(|| Error::SingularDesign("regressor Gram matrix".into()))?;
        let alpha0 = alpha0.unwrap_or_else(|| &p0 * &xy);
        Self::from_parts(iv, alpha0, p0, mode, sub_indices)
    }

    /// Joins an initialized IV state with `alpha_0` and `P_0`.
    pub fn from_parts(
        iv: OnlineState,
        alpha0: DVector<f64>,
        p0: DMatrix<f64>,
        mode: OlsMode,
        sub_indices: &[usize],
    ) -> Result<Self> {
        let d_beta = iv.dims().d_beta;
        if iv.step_count() != 0 {
            return Err(Error::Config("DWH state must start from an unstepped IV state".into()));
        }
        if alpha0.len() != d_beta || p0.nrows() != d_beta || p0.ncols() != d_beta {
            return Err(Error::InvalidInput("alpha_0 / P_0 dimensions differ from d_beta".into()));
        }
        let sub = normalize_indices(sub_indices, d_beta)?;
        let p = match mode {
            OlsMode::Preconditioned => p0,
            OlsMode::Plain => DMatrix::identity(d_beta, d_beta),
        };
        Ok(DwhState {
            iv,
            alpha_bar: alpha0.clone(),
            alpha: alpha0,
            p,
            mode,
            lrv: LrvAccumulator::new(2 * sub.len()),
            sub,
            px: DVector::zeros(d_beta),
        })
    }

    pub fn iv(&self) -> &OnlineState {
        &self.iv
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &DVector<f64> {
        &self.alpha_bar
    }

    pub fn sub_indices(&self) -> &[usize] {
        &self.sub
    }

    pub fn mode(&self) -> OlsMode {
        self.mode
    }

    /// Accumulator of the stacked path `(beta_sub, alpha_sub)`.
    pub fn lrv(&self) -> &LrvAccumulator {
        &self.lrv
    }

    pub fn step_count(&self) -> u64 {
        self.iv.step_count()
    }
}

fn normalize_indices(idx: &[usize], d_beta: usize) -> Result<Vec<usize>> {
    if idx.is_empty() {
        return Err(Error::Config("DWH index set is empty".into()));
    }
    let mut v = idx.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.len() != idx.len() {
        return Err(Error::Config("DWH index set has duplicates".into()));
    }
    if let Some(&bad) = v.iter().find(|&&k| k >= d_beta) {
        return Err(Error::Config(format!("DWH index {bad} out of range for d_beta = {d_beta}")));
    }
    Ok(idx.to_vec())
}

/// Advances both paths by one observation.
pub fn dwh_step(state: &mut DwhState, md: &MomentData) -> Result<()> {
    let Form::Single { x, y, .. } = &md.form else {
        return Err(Error::InvalidInput("the DWH test takes single observations, not clusters".into()));
    };
    let step = state.iv.step_count() + 1;
    let k = (state.iv.n0() + state.iv.step_count()) as f64;
    let gamma = state.iv.schedule().rate(step);

    // OLS candidate first so that a divergence leaves both paths untouched.
    let r = x.dot(&state.alpha) - y;
    state.px.gemv(1.0, &state.p, x, 0.0);
    let norm = state.alpha.iter().zip(state.px.iter()).map(|(a, p)| (a - gamma * r * p).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::DivergenceDetected { step, norm });
    }
    s2sls::step_s2sls(&mut state.iv, md)?;
    state.alpha.axpy(-gamma * r, &state.px, 1.0);
    if state.mode == OlsMode::Preconditioned {
        let xpx = x.dot(&state.px);
        let m = k + xpx;
        let scale = (k + 1.0) / k;
        let n = state.p.nrows();
        for j in 0..n {
            let pj = state.px[j] / m;
            for i in 0..=j {
                let v = scale * (0.5 * (state.p[(i, j)] + state.p[(j, i)]) - state.px[i] * pj);
                state.p[(i, j)] = v;
                state.p[(j, i)] = v;
            }
        }
    }
    let t = step as f64;
    state.alpha_bar.axpy(1.0 / t, &state.alpha, (t - 1.0) / t);
    let q = state.sub.len();
    let (beta, alpha, sub) = (state.iv.beta(), &state.alpha, &state.sub);
    state.lrv.update_from_fn(|j| if j < q { beta[sub[j]] } else { alpha[sub[j - q]] });
    Ok(())
}

/// `(n/q) d' (Xi V Xi')^{-1} d` for `d = betabar_sub - alphabar_sub`.
pub fn dwh_statistic(diff: &DVector<f64>, v_diff: &DMatrix<f64>, n: u64) -> Result<f64> {
    random_scaling_quadratic(diff, v_diff, n)
}

/// Endogeneity test on the index set fixed at construction.
pub fn dwh_test(state: &DwhState) -> Result<TestResult> {
    let q = state.sub.len();
    let n = state.lrv.count();
    if n == 0 {
        return Err(Error::Config("DWH test needs at least one step".into()));
    }
    let mut xi = DMatrix::zeros(q, 2 * q);
    for j in 0..q {
        xi[(j, j)] = 1.0;
        xi[(j, q + j)] = -1.0;
    }
    let v = &xi * state.lrv.variance() * xi.transpose();
    let diff = DVector::from_fn(q, |j, _| state.iv.beta_bar()[state.sub[j]] - state.alpha_bar[state.sub[j]]);
    let stat = dwh_statistic(&diff, &v, n)?;
    Ok(TestResult::new(stat, q, critical_value(q, StatisticForm::FType)?, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning_rate::schedule;
    use crate::moments::moment_data;
    use crate::s2sls::run_s2sls;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn obs(y: f64, x: &[f64], z: &[f64]) -> Observation {
        Observation::from_slices(y, x, z).unwrap()
    }

    fn md(o: &Observation) -> MomentData {
        moment_data(o, o.dims()).unwrap()
    }

    #[test]
    fn scalar_statistic() {
        let s = dwh_statistic(&DVector::from_element(1, 0.2), &DMatrix::from_element(1, 1, 0.04), 100).unwrap();
        assert_relative_eq!(s, 100.0, epsilon = 1e-10);
    }

    #[test]
    fn hand_computed_joint_step() {
        // n0 = 1, Phi = W = 1, beta_0 = 0, alpha_0 = 0, P_0 = 1, gamma_1 = 0.5.
        let iv = OnlineState::from_parts(
            1,
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            schedule(0.5, 0.501).unwrap(),
        )
        .unwrap();
        let mut s = DwhState::from_parts(iv, DVector::zeros(1), DMatrix::from_element(1, 1, 1.0), OlsMode::Preconditioned, &[0])
            .unwrap();
        dwh_step(&mut s, &md(&obs(1.0, &[2.0], &[1.0]))).unwrap();
        // IV: beta_1 = 0 - 0.5 * 1 * 1 * (2*0 - 1) = 0.5
        assert_relative_eq!(s.iv().beta()[0], 0.5, epsilon = 1e-15);
        // OLS: alpha_1 = 0 - 0.5 * 1 * 2 * (0 - 1) = 1
        assert_relative_eq!(s.alpha()[0], 1.0, epsilon = 1e-15);
        // P_1 = 2 * (1 - 4/(1+4)) = 0.4 = (mean of {1, 4})^{-1}
        assert_relative_eq!(s.p[(0, 0)], 0.4, epsilon = 1e-15);
        assert_eq!(s.lrv().count(), 1);
        assert_eq!(s.lrv().mean().as_slice(), &[0.5, 1.0]);
    }

    #[test]
    fn exogenous_identity_design_paths_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draw = || {
            let x: Vec<f64> = vec![1.0, rng.sample(StandardNormal)];
            let y = 1.0 + 0.5 * x[1] + rng.sample::<f64, _>(StandardNormal);
            obs(y, &x, &x)
        };
        let init: Vec<_> = (0..20).map(|_| draw()).collect();
        let mut s = DwhState::init(&init, 0.0, schedule(0.5, 0.6).unwrap(), Beta0::Offline2sls, OlsMode::Preconditioned, &[1])
            .unwrap();
        for _ in 0..500 {
            dwh_step(&mut s, &md(&draw())).unwrap();
        }
        assert!((s.iv().beta_bar() - s.alpha_bar()).amax() < 1e-10);
    }

    #[test]
    fn iv_path_equals_standalone_s2sls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = || {
            let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let v: f64 = rng.sample(StandardNormal);
            let x = vec![z[0] + z[1] + v, z[2]];
            let y = x[0] + x[1] + v + rng.sample::<f64, _>(StandardNormal);
            obs(y, &x, &z)
        };
        let init: Vec<_> = (0..15).map(|_| draw()).collect();
        let stream: Vec<_> = (0..300).map(|_| md(&draw())).collect();
        let sched = schedule(0.4, 0.6).unwrap();
        for mode in [OlsMode::Preconditioned, OlsMode::Plain] {
            let mut s = DwhState::init(&init, 0.0, sched, Beta0::Offline2sls, mode, &[0, 1]).unwrap();
            for m in &stream {
                dwh_step(&mut s, m).unwrap();
            }
            let alone = run_s2sls(&stream, s2sls::init_state(&init, 0.0, sched, Beta0::Offline2sls).unwrap()).unwrap();
            assert_eq!(s.iv().beta(), alone.beta());
            assert_eq!(s.iv().beta_bar(), alone.beta_bar());
            assert_eq!(s.iv().weight(), alone.weight());
            let t = dwh_test(&s).unwrap();
            assert_eq!(t.q, 2);
            assert_eq!(t.reject_at_5pct, t.statistic > t.critical_value_95);
        }
    }

    #[test]
    fn equal_averages_give_zero_statistic() {
        let s = dwh_statistic(&DVector::zeros(2), &DMatrix::identity(2, 2), 50).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn index_validation() {
        let iv = OnlineState::from_parts(
            1,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            schedule(0.5, 0.6).unwrap(),
        )
        .unwrap();
        let p = DMatrix::identity(2, 2);
        for bad in [&[][..], &[2][..], &[0, 0][..]] {
            assert!(DwhState::from_parts(iv.clone(), DVector::zeros(2), p.clone(), OlsMode::Plain, bad).is_err());
        }
    }
}
