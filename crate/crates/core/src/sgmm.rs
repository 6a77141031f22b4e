//! Efficient stochastic GMM.
//!
//! The first `n1` observations run the S2SLS recursion. Its average
//! `betabar_{n1}` is then frozen as an anchor and every later step replaces
//! the instrument `z_i` in the weight update by the anchored moment
//! `g_i(betabar_{n1}) = G_i betabar_{n1} + H_i`, so that `W` tracks the inverse
//! of the moment covariance. The beta and Phi updates are unchanged.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::JAccumulator;
use crate::moments::MomentData;
use crate::s2sls::{self, woodbury_core, OnlineState, Phase};

/// Warm-up length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum N1 {
    /// `floor(10 sqrt(n))`
    #[default]
    Auto,
    Fixed(u64),
}

impl std::str::FromStr for N1 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(N1::Auto);
        }
        s.parse().map(N1::Fixed).map_err(|_| Error::Config(format!("n1 must be 'auto' or an integer, got '{s}'")))
    }
}

pub fn default_n1(n: u64) -> u64 {
    (10.0 * (n as f64).sqrt()).floor() as u64
}

impl N1 {
    /// Resolves against the stream length `n`; requires `1 <= n1 < n`.
    pub fn resolve(self, n: u64) -> Result<u64> {
        let n1 = match self {
            N1::Auto => default_n1(n),
            N1::Fixed(v) => v,
        };
        if n1 == 0 {
            return Err(Error::Config("n1 must be at least 1".into()));
        }
        if n1 >= n {
            return Err(Error::Config(format!("n1 = {n1} must be smaller than the stream length n = {n}")));
        }
        Ok(n1)
    }
}

/// Freezes `anchor = betabar` and switches the weight update.
pub fn transition_to_efficient(state: &mut OnlineState) -> Result<()> {
    state.enter_efficient()
}

/// Rank-one weight update driven by the anchored moment: returns
/// `m = k + g'Wg` and `W' = (k+1)/k (W - Wg g'W / m)`.
pub fn smw_weight_update_eff(w: &DMatrix<f64>, g_anchor: &DVector<f64>, k: u64) -> Result<(f64, DMatrix<f64>)> {
    s2sls::weight_update(w, g_anchor, k)
}

/// Woodbury update of `(Phi' W Phi)^{-1}` across one efficient step using the
/// 3x3 core `D = diag(-z'Wz, z'Wz, -m)` and
/// `U = [Phi'Wz, Phi'Wz + (z'Wz/k) x, Phi'Wg + (z'Wg/k) x]`.
/// `phi` and `w` are the pre-update values. `None` when the core is
/// ill-conditioned.
#[allow(clippy::too_many_arguments)]
pub fn smw_inner_inverse_update_eff(
    inner: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    w: &DMatrix<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    g_anchor: &DVector<f64>,
    m: f64,
    k: u64,
) -> Option<DMatrix<f64>> {
    let k = k as f64;
    let wz = w * z;
    let wg = w * g_anchor;
    let zwz = z.dot(&wz);
    let zwg = z.dot(&wg);
    let pz = phi.transpose() * &wz;
    let pg = phi.transpose() * &wg;
    let u: [DVector<f64>; 3] = [pz.clone(), &pz + x * (zwz / k), &pg + x * (zwg / k)];
    let mut hu = u.clone();
    let mut h = inner.clone();
    woodbury_core(&mut h, &u, &mut hu, [-zwz, zwz, -m], k).then_some(h)
}

/// One efficient-phase step.
pub fn step_sgmm(state: &mut OnlineState, md: &MomentData) -> Result<()> {
    if state.phase() != Phase::Efficient {
        return Err(Error::InvalidPhase { expected: Phase::Efficient, found: state.phase() });
    }
    state.advance(md)
}

/// Final state of [`run_sgmm`] together with the over-identification
/// accumulator.
#[derive(Debug, Clone)]
pub struct SgmmRun {
    pub state: OnlineState,
    pub n1: u64,
    pub jtest: JAccumulator,
}

/// Warm-up on the first `n1` elements, transition, then efficient steps on
/// the rest. `n` is the stream length used to resolve `n1`; the stream must
/// hold more than `n1` elements. Errors carry the 1-based element index.
pub fn run_sgmm<I>(stream: I, n: u64, n1: N1, mut state: OnlineState) -> Result<SgmmRun>
where
    I: IntoIterator,
    I::Item: Borrow<MomentData>,
{
    if state.phase() != Phase::Warmup || state.step_count() != 0 {
        return Err(Error::Config("run_sgmm expects a freshly initialized state".into()));
    }
    let n1 = n1.resolve(n)?;
    let mut jacc = JAccumulator::new(state.dims());
    let mut seen = 0u64;
    for (idx, md) in stream.into_iter().enumerate() {
        let idx = idx as u64 + 1;
        let md = md.borrow();
        if idx <= n1 {
            s2sls::step_s2sls(&mut state, md).map_err(|e| e.at_step(idx))?;
            jacc.observe_warmup(md);
            if idx == n1 {
                transition_to_efficient(&mut state).map_err(|e| e.at_step(idx))?;
                jacc.start(state.anchor().expect("anchor set"))?;
            }
        } else {
            step_sgmm(&mut state, md).map_err(|e| e.at_step(idx))?;
            jacc.update(md, state.beta_bar());
        }
        seen = idx;
    }
    if seen <= n1 {
        return Err(Error::Config(format!("stream ended after {seen} elements, before the efficient phase (n1 = {n1})")));
    }
    Ok(SgmmRun { state, n1, jtest: jacc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning_rate::schedule;
    use crate::linalg::rel_op_error;
    use crate::moments::{moment_data, Observation};
    use crate::s2sls::{run_s2sls, step_s2sls};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_state(gamma0: f64) -> OnlineState {
        OnlineState::from_parts(
            1,
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            schedule(gamma0, 0.501).unwrap(),
        )
        .unwrap()
    }

    fn md1(y: f64, x: f64, z: f64) -> MomentData {
        let o = Observation::from_slices(y, &[x], &[z]).unwrap();
        moment_data(&o, o.dims()).unwrap()
    }

    fn random_stream(rng: &mut ChaCha8Rng, n: usize, d_beta: usize, d_g: usize) -> Vec<Observation> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d_g).map(|_| rng.sample(StandardNormal)).collect();
                let x: Vec<f64> = (0..d_beta).map(|j| z[j] + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * (1.0 + 0.5 * z[0].abs());
                let y = x.iter().sum::<f64>() + e;
                Observation::from_slices(y, &x, &z).unwrap()
            })
            .collect()
    }

    #[test]
    fn n1_resolution() {
        assert_eq!(N1::Auto.resolve(10_000).unwrap(), 1000);
        assert_eq!(default_n1(100_000), 3162);
        assert_eq!(N1::Fixed(9).resolve(10).unwrap(), 9);
        assert!(matches!(N1::Fixed(10).resolve(10), Err(Error::Config(_))));
        assert!(matches!(N1::Fixed(0).resolve(10), Err(Error::Config(_))));
    }

    #[test]
    fn transition_after_scalar_step() {
        let mut s = scalar_state(0.5);
        step_s2sls(&mut s, &md1(1.0, 1.0, 1.0)).unwrap();
        transition_to_efficient(&mut s).unwrap();
        assert_eq!(s.anchor().unwrap()[0], 0.5);
        assert_eq!(s.phase(), Phase::Efficient);
        assert!(matches!(transition_to_efficient(&mut s), Err(Error::InvalidPhase { .. })));
        assert!(matches!(step_s2sls(&mut s, &md1(1.0, 1.0, 1.0)), Err(Error::InvalidPhase { .. })));
    }

    #[test]
    fn warmup_state_rejects_sgmm_step() {
        let mut s = scalar_state(0.5);
        assert!(matches!(step_sgmm(&mut s, &md1(1.0, 1.0, 1.0)), Err(Error::InvalidPhase { .. })));
    }

    #[test]
    fn weight_update_examples() {
        let (m, w) = smw_weight_update_eff(&DMatrix::from_element(1, 1, 2.0), &DVector::from_element(1, 1.0), 3).unwrap();
        assert_relative_eq!(m, 5.0, epsilon = 1e-15);
        assert_relative_eq!(w[(0, 0)], 1.6, epsilon = 1e-14);

        let w0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]);
        let (m, w) = smw_weight_update_eff(&w0, &DVector::zeros(2), 6).unwrap();
        assert_eq!(m, 6.0);
        assert_relative_eq!(w, &w0 * (7.0 / 6.0), epsilon = 1e-15);
    }

    #[test]
    fn weight_update_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = (&a * a.transpose() + DMatrix::identity(5, 5)).try_inverse().unwrap();
        let g = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let k = 9u64;
        let (_, w1) = smw_weight_update_eff(&w, &g, k).unwrap();
        let direct = ((w.clone().try_inverse().unwrap() * k as f64 + &g * g.transpose()) / (k + 1) as f64)
            .try_inverse()
            .unwrap();
        assert!(rel_op_error(&w1, &direct) < 1e-10);
    }

    #[test]
    fn zero_observation_scales_inner_inverse() {
        // The 3x3 core is singular for all-zero inputs, so the fast path
        // declines and the step falls back to a direct recompute.
        let inner = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.7]);
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 0.0, 1.0, 0.3, 0.3]);
        let w = DMatrix::identity(3, 3);
        let z = DVector::zeros(3);
        assert!(smw_inner_inverse_update_eff(&inner, &phi, &w, &DVector::zeros(2), &z, &z, 4.0, 4).is_none());

        let mut s = OnlineState::from_parts(4, DVector::from_vec(vec![0.1, 0.2]), phi, w, schedule(0.5, 0.6).unwrap())
            .unwrap();
        let o = Observation::from_slices(0.0, &[1.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        step_s2sls(&mut s, &moment_data(&o, o.dims()).unwrap()).unwrap();
        transition_to_efficient(&mut s).unwrap();
        let before = s.inner_inverse().clone();
        let k = (s.n0() + s.step_count()) as f64;
        let zero = Observation::zeros(s.dims());
        step_sgmm(&mut s, &moment_data(&zero, zero.dims()).unwrap()).unwrap();
        assert_relative_eq!(s.inner_inverse(), &(before * ((k + 1.0) / k)), epsilon = 1e-12);
        assert_eq!(s.diagnostics().smw_fallbacks, 1);
    }

    #[test]
    fn inner_update_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (d_beta, d_g) = (5, 10);
        let phi = DMatrix::from_fn(d_g, d_beta, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DMatrix::from_fn(d_g, d_g, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = (&a * a.transpose() / d_g as f64 + DMatrix::identity(d_g, d_g)).try_inverse().unwrap();
        let inner = (phi.transpose() * &w * &phi).try_inverse().unwrap();
        let x = DVector::from_fn(d_beta, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DVector::from_fn(d_g, |_, _| rng.sample::<f64, _>(StandardNormal));
        let anchor = DVector::from_fn(d_beta, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = 0.7;
        let g = &z * (x.dot(&anchor) - y);
        let k = 12u64;
        let (m, w1) = smw_weight_update_eff(&w, &g, k).unwrap();
        let out = smw_inner_inverse_update_eff(&inner, &phi, &w, &x, &z, &g, m, k).unwrap();
        let kf = k as f64;
        let phi1 = (&phi * kf + &z * x.transpose()) / (kf + 1.0);
        let direct = (phi1.transpose() * w1 * phi1).try_inverse().unwrap();
        assert!(rel_op_error(&out, &direct) < 1e-8);
    }

    #[test]
    fn scalar_efficient_step_by_hand() {
        // Continue the scalar worked case: beta = 0.5, Phi = W = 1, anchor 0.5, i = 1.
        let mut s = scalar_state(0.5);
        step_s2sls(&mut s, &md1(1.0, 1.0, 1.0)).unwrap();
        transition_to_efficient(&mut s).unwrap();
        // Observation (y=2, x=1, z=1), k = 2, gamma_2 = 0.5 * 2^-0.501.
        step_sgmm(&mut s, &md1(2.0, 1.0, 1.0)).unwrap();
        let gamma2 = 0.5 * 2f64.powf(-0.501);
        let beta2 = 0.5 - gamma2 * (0.5 - 2.0);
        assert_relative_eq!(s.beta()[0], beta2, epsilon = 1e-15);
        assert_relative_eq!(s.phi()[(0, 0)], 1.0, epsilon = 1e-15);
        // g(anchor) = 0.5 - 2 = -1.5, m = 2 + 2.25, W = 1.5 * (1 - 1/4.25).
        let w2 = 1.5 * (1.0 - 2.25 / 4.25);
        assert_relative_eq!(s.weight()[(0, 0)], w2, epsilon = 1e-15);
        assert_relative_eq!(s.beta_bar()[0], (0.5 + beta2) / 2.0, epsilon = 1e-15);
        assert_relative_eq!(s.inner_inverse()[(0, 0)], 1.0 / w2, epsilon = 1e-13);
    }

    #[test]
    fn zero_residual_step_still_updates_weight() {
        let mut s = scalar_state(0.5);
        step_s2sls(&mut s, &md1(1.0, 1.0, 1.0)).unwrap();
        transition_to_efficient(&mut s).unwrap();
        let beta = s.beta()[0];
        // x * beta - y = 0 at beta = 0.5, anchor residual also 0.
        step_sgmm(&mut s, &md1(1.0, 2.0, 1.0)).unwrap();
        assert_eq!(s.beta()[0], beta);
        // g_anchor = 0: W = (3/2) W
        assert_relative_eq!(s.weight()[(0, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_equivalence_with_s2sls() {
        // Scalar design with y = x * anchor - 1, so g_i(anchor) = z_i.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut base = scalar_state(0.3);
        step_s2sls(&mut base, &md1(1.0, 1.0, 1.0)).unwrap();
        let anchor = base.beta_bar()[0];
        let mut eff = base.clone();
        transition_to_efficient(&mut eff).unwrap();
        let mut warm = base;
        for _ in 0..200 {
            let v: f64 = rng.sample(StandardNormal);
            let x = 1.0 + 0.3 * v;
            let m = md1(x * anchor - 1.0, x, x);
            step_s2sls(&mut warm, &m).unwrap();
            step_sgmm(&mut eff, &m).unwrap();
            assert_relative_eq!(warm.weight()[(0, 0)], eff.weight()[(0, 0)], epsilon = 1e-12, max_relative = 1e-12);
            assert_relative_eq!(warm.beta()[0], eff.beta()[0], epsilon = 1e-12, max_relative = 1e-12);
            assert_relative_eq!(warm.inner_inverse()[(0, 0)], eff.inner_inverse()[(0, 0)], max_relative = 1e-10);
        }
    }

    #[test]
    fn efficient_weight_is_exact_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d_beta, d_g, n0, n) = (2, 4, 20, 300);
        let init = random_stream(&mut rng, n0, d_beta, d_g);
        let stream = random_stream(&mut rng, n, d_beta, d_g);
        let state = s2sls::init_state(&init, 0.0, schedule(0.5, 0.6).unwrap(), s2sls::Beta0::Offline2sls).unwrap();
        let w0_inv = state.weight().clone().try_inverse().unwrap();
        let mds: Vec<_> = stream.iter().map(|o| moment_data(o, o.dims()).unwrap()).collect();
        let n1 = 50;
        let run = run_sgmm(&mds, n as u64, N1::Fixed(n1), state).unwrap();
        let anchor = run.state.anchor().unwrap().clone();
        let mut acc = w0_inv * n0 as f64;
        for (j, m) in mds.iter().enumerate() {
            let v = if (j as u64) < n1 { m.instrument_gram() } else {
                let g = m.eval(&anchor);
                &g * g.transpose()
            };
            acc += v;
        }
        let direct = (acc / (n0 + n) as f64).try_inverse().unwrap();
        assert!(rel_op_error(run.state.weight(), &direct) < 1e-8);
        let inner_direct = run.state.inner_matrix().try_inverse().unwrap();
        assert!(rel_op_error(run.state.inner_inverse(), &inner_direct) < 1e-8);
    }

    #[test]
    fn empty_efficient_phase_is_rejected_but_warmup_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let init = random_stream(&mut rng, 10, 1, 2);
        let stream: Vec<_> = random_stream(&mut rng, 30, 1, 2).iter().map(|o| moment_data(o, o.dims()).unwrap()).collect();
        let state = s2sls::init_state(&init, 0.0, schedule(0.5, 0.6).unwrap(), s2sls::Beta0::Zero).unwrap();
        // Stream shorter than n claims: efficient phase never starts.
        assert!(matches!(run_sgmm(&stream[..20], 30, N1::Fixed(20), state.clone()), Err(Error::Config(_))));
        // n1 = n - 1: exactly one efficient step; the warm-up part equals S2SLS.
        let run = run_sgmm(&stream, 30, N1::Fixed(29), state.clone()).unwrap();
        let warm = run_s2sls(&stream[..29], state.clone()).unwrap();
        assert_eq!(run.state.anchor().unwrap(), warm.beta_bar());
        let mut manual = warm;
        transition_to_efficient(&mut manual).unwrap();
        step_sgmm(&mut manual, &stream[29]).unwrap();
        assert_eq!(manual.beta_bar(), run.state.beta_bar());
        assert_eq!(manual.weight(), run.state.weight());
        assert_eq!(run.jtest.count(), 30);
    }
}
