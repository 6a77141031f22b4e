//! Stochastic two-stage least squares.
//!
//! Starting from `(beta_0, Phi_0, W_0)` computed on an initialization sample
//! of size `n0`, every observation `i` applies
//!
//! ```text
//! beta_i    = beta_{i-1} - gamma_i (Phi' W Phi)^+ Phi' W g_i(beta_{i-1})   (Phi, W at i-1)
//! Phi_i     = (k Phi_{i-1} + G_i) / (k + 1)                                  k = n0 + i - 1
//! m_i       = k + z_i' W_{i-1} z_i
//! W_i       = (k + 1)/k * W_{i-1} (I - z_i z_i' W_{i-1} / m_i)
//! betabar_i = (i - 1)/i * betabar_{i-1} + beta_i / i
//! ```
//!
//! `W_i` is the inverse of the running instrument Gram matrix, maintained by
//! rank-one Sherman-Morrison updates. The inverse `(Phi' W Phi)^{-1}` is kept
//! in a cache and updated through a 2x2 Woodbury core; when the core is
//! ill-conditioned, or the matrix is rank deficient, it is recomputed
//! directly as an eigen pseudo-inverse.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::learning_rate::LearningRateSchedule;
use crate::linalg::{self, SmallCore};
use crate::moments::{Dims, Form, MomentData, Observation};

/// Iterates larger than this in Euclidean norm abort the run.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    Efficient,
}

/// How `beta_0` is obtained from the initialization sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Beta0 {
    #[default]
    Offline2sls,
    Zero,
    Given(DVector<f64>),
}

impl std::str::FromStr for Beta0 {
    type Err = Error;

    /// `2sls`, `zero`, or comma-separated values.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2sls" | "offline" => Ok(Beta0::Offline2sls),
            "zero" => Ok(Beta0::Zero),
            _ => s
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(|v| Beta0::Given(DVector::from_vec(v)))
                .map_err(|_| Error::Config(format!("beta0 must be '2sls', 'zero' or a list of numbers, got '{s}'"))),
        }
    }
}

/// Counters for the numerical fallbacks taken during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Woodbury core rejected, inner inverse recomputed directly.
    pub smw_fallbacks: u64,
    /// Steps whose `(Phi' W Phi)` was rank deficient.
    pub pinv_steps: u64,
}

/// `Phi_0 = mean(z x')` and the regularized instrument Gram `mean(z z') + eta0 I`.
#[derive(Debug, Clone)]
pub struct InitialMoments {
    pub dims: Dims,
    pub n0: usize,
    pub eta0: f64,
    pub phi0: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

impl InitialMoments {
    pub fn new(init_sample: &[Observation], eta0: f64) -> Result<Self> {
        let first = init_sample
            .first()
            .ok_or_else(|| Error::InvalidInput("initialization sample is empty".into()))?;
        if !(eta0 >= 0.0 && eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be finite and nonnegative, got {eta0}")));
        }
        let dims = first.dims();
        Dims::new(dims.d_beta, dims.d_g)?;
        let n0 = init_sample.len();
        let inv_n = 1.0 / n0 as f64;
        let mut phi0 = DMatrix::zeros(dims.d_g, dims.d_beta);
        let mut gram = DMatrix::zeros(dims.d_g, dims.d_g);
        for o in init_sample {
            o.check(dims)?;
            phi0.ger(inv_n, &o.z, &o.x, 1.0);
            gram.ger(inv_n, &o.z, &o.z, 1.0);
        }
        for j in 0..dims.d_g {
            gram[(j, j)] += eta0;
        }
        linalg::symmetrize(&mut gram);
        Ok(InitialMoments { dims, n0, eta0, phi0, gram })
    }

    /// `W_0 = gram^{-1}`, failing loudly rather than regularizing.
    pub fn weight(&self) -> Result<DMatrix<f64>> {
        let (min_eig, max_eig) = linalg::extreme_eigenvalues(&self.gram);
        let rank_deficient = self.eta0 == 0.0 && self.n0 < self.dims.d_g;
        if rank_deficient || !(min_eig > linalg::PINV_REL_TOL * max_eig) {
            return Err(Error::SingularInitialization { min_eigenvalue: min_eig });
        }
        linalg::spd_inverse(&self.gram).ok_or(Error::SingularInitialization { min_eigenvalue: min_eig })
    }
}

/// Full recursion state.
#[derive(Debug, Clone)]
pub struct OnlineState {
    i: u64,
    n0: u64,
    beta: DVector<f64>,
    beta_bar: DVector<f64>,
    phi: DMatrix<f64>,
    w: DMatrix<f64>,
    inner: DMatrix<f64>,
    inner_full_rank: bool,
    phase: Phase,
    anchor: Option<DVector<f64>>,
    schedule: LearningRateSchedule,
    diagnostics: Diagnostics,
    scratch: Scratch,
}

#[derive(Debug, Clone)]
struct Scratch {
    wz: DVector<f64>,
    wv: DVector<f64>,
    resid: DVector<f64>,
    pz: DVector<f64>,
    pv: DVector<f64>,
    dir: DVector<f64>,
    hu: [DVector<f64>; 3],
    u: [DVector<f64>; 3],
    anchor_resid: DVector<f64>,
}

impl Scratch {
    fn new(dims: Dims) -> Self {
        let b = || DVector::zeros(dims.d_beta);
        Scratch {
            wz: DVector::zeros(dims.d_g),
            wv: DVector::zeros(dims.d_g),
            resid: DVector::zeros(dims.d_g),
            pz: b(),
            pv: b(),
            dir: b(),
            hu: [b(), b(), b()],
            u: [b(), b(), b()],
            anchor_resid: DVector::zeros(dims.d_g),
        }
    }

    fn bytes(&self) -> usize {
        let n: usize = [&self.wz, &self.wv, &self.resid, &self.pz, &self.pv, &self.dir, &self.anchor_resid]
            .iter()
            .map(|v| v.len())
            .sum::<usize>()
            + self.hu.iter().chain(self.u.iter()).map(|v| v.len()).sum::<usize>();
        n * std::mem::size_of::<f64>()
    }
}

/// Computes `(beta_0, Phi_0, W_0)` on the initialization sample.
pub fn init_state(
    init_sample: &[Observation],
    eta0: f64,
    schedule: LearningRateSchedule,
    beta0: Beta0,
) -> Result<OnlineState> {
    let init = InitialMoments::new(init_sample, eta0)?;
    let w0 = init.weight()?;
    let beta0 = match beta0 {
        Beta0::Offline2sls => baselines::two_sls_point(init_sample)?,
        Beta0::Zero => DVector::zeros(init.dims.d_beta),
        Beta0::Given(b) => b,
    };
    OnlineState::from_parts(init.n0 as u64, beta0, init.phi0, w0, schedule)
}

impl OnlineState {
    /// Builds a state from explicit initial values. `w0` must be symmetric
    /// positive definite.
    pub fn from_parts(
        n0: u64,
        beta0: DVector<f64>,
        phi0: DMatrix<f64>,
        mut w0: DMatrix<f64>,
        schedule: LearningRateSchedule,
    ) -> Result<Self> {
        if n0 == 0 {
            return Err(Error::Config("initialization sample size n0 must be at least 1".into()));
        }
        let dims = Dims::new(phi0.ncols(), phi0.nrows())?;
        if beta0.len() != dims.d_beta || w0.nrows() != dims.d_g || w0.ncols() != dims.d_g {
            return Err(Error::InvalidInput("inconsistent initial state dimensions".into()));
        }
        if beta0.iter().chain(phi0.iter()).chain(w0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("initial state contains non-finite values".into()));
        }
        let asym = (&w0 - w0.transpose()).amax();
        if asym > 1e-10 * w0.amax().max(1.0) {
            return Err(Error::InvalidInput(format!("W_0 is not symmetric (max asymmetry {asym:e})")));
        }
        linalg::symmetrize(&mut w0);
        let mut state = OnlineState {
            i: 0,
            n0,
            beta_bar: beta0.clone(),
            beta: beta0,
            phi: phi0,
            w: w0,
            inner: DMatrix::zeros(dims.d_beta, dims.d_beta),
            inner_full_rank: false,
            phase: Phase::Warmup,
            anchor: None,
            schedule,
            diagnostics: Diagnostics::default(),
            scratch: Scratch::new(dims),
        };
        state.recompute_inner();
        Ok(state)
    }

    pub fn dims(&self) -> Dims {
        Dims { d_beta: self.beta.len(), d_g: self.w.nrows() }
    }

    /// Observations consumed after initialization.
    pub fn step_count(&self) -> u64 {
        self.i
    }

    pub fn n0(&self) -> u64 {
        self.n0
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn beta_bar(&self) -> &DVector<f64> {
        &self.beta_bar
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Cached `(Phi' W Phi)^{-1}`, or its pseudo-inverse while rank deficient.
    pub fn inner_inverse(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn inner_is_full_rank(&self) -> bool {
        self.inner_full_rank
    }

    /// `Phi' W Phi`, formed directly.
    pub fn inner_matrix(&self) -> DMatrix<f64> {
        let wp = &self.w * &self.phi;
        let mut m = self.phi.transpose() * wp;
        linalg::symmetrize(&mut m);
        m
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// `betabar_{n1}` once the efficient phase has started.
    pub fn anchor(&self) -> Option<&DVector<f64>> {
        self.anchor.as_ref()
    }

    pub fn schedule(&self) -> LearningRateSchedule {
        self.schedule
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    /// Heap bytes held by the state; depends only on the dimensions.
    pub fn heap_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        let mats = self.phi.len() + self.w.len() + self.inner.len();
        let vecs = self.beta.len() + self.beta_bar.len() + self.anchor.as_ref().map_or(0, |a| a.len());
        (mats + vecs) * f + self.scratch.bytes()
    }

    /// Switches to the efficient phase, freezing `anchor = betabar`.
    pub(crate) fn enter_efficient(&mut self) -> Result<()> {
        if self.phase == Phase::Efficient {
            return Err(Error::InvalidPhase { expected: Phase::Warmup, found: Phase::Efficient });
        }
        if self.i == 0 {
            return Err(Error::Config("the warm-up phase must consume at least one observation".into()));
        }
        self.anchor = Some(self.beta_bar.clone());
        self.phase = Phase::Efficient;
        Ok(())
    }

    fn recompute_inner(&mut self) {
        let (p, rank) = linalg::sym_pinv(&self.inner_matrix());
        self.inner = p;
        self.inner_full_rank = rank == self.beta.len();
    }

    /// One step of the recursion; `phase` selects the weight update.
    pub(crate) fn advance(&mut self, md: &MomentData) -> Result<()> {
        let dims = self.dims();
        if md.dims() != dims {
            return Err(Error::Schema { expected: dims, found: md.dims() });
        }
        let step = self.i + 1;
        let k = (self.n0 + self.i) as f64;
        let gamma = self.schedule.rate(step);
        if !self.inner_full_rank {
            self.diagnostics.pinv_steps += 1;
        }

        let OnlineState { beta, beta_bar, phi, w, inner, scratch: s, .. } = self;

        // beta update with the pre-update Phi, W.
        let (r_own, single) = match &md.form {
            Form::Single { x, z, y } => {
                s.wz.gemv(1.0, w, z, 0.0);
                s.pz.gemv_tr(1.0, phi, &s.wz, 0.0);
                (x.dot(beta) - y, true)
            }
            Form::Cluster { .. } => {
                md.eval_into(beta, &mut s.resid);
                s.wv.gemv(1.0, w, &s.resid, 0.0);
                s.pv.gemv_tr(1.0, phi, &s.wv, 0.0);
                (0.0, false)
            }
        };
        if single {
            s.dir.gemv(r_own, inner, &s.pz, 0.0);
        } else {
            s.dir.gemv(1.0, inner, &s.pv, 0.0);
        }
        let norm2 = beta.iter().zip(s.dir.iter()).map(|(b, d)| (b - gamma * d).powi(2)).sum::<f64>();
        let norm = norm2.sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::DivergenceDetected { step, norm });
        }

        // Residual moment driving the weight update.
        enum Driver {
            Instruments,
            Anchored { r: f64 },
        }
        let driver = match (self.phase, &md.form) {
            (Phase::Warmup, _) => Driver::Instruments,
            (Phase::Efficient, Form::Single { x, y, .. }) => {
                let a = self.anchor.as_ref().expect("efficient phase has an anchor");
                Driver::Anchored { r: x.dot(a) - y }
            }
            (Phase::Efficient, Form::Cluster { .. }) => {
                let a = self.anchor.as_ref().expect("efficient phase has an anchor");
                md.eval_into(a, &mut s.anchor_resid);
                Driver::Anchored { r: f64::NAN }
            }
        };

        // Woodbury core for the inner inverse, formed from pre-update values.
        let mut core_ok = false;
        if self.inner_full_rank {
            if let Form::Single { x, z, .. } = &md.form {
                let zwz = z.dot(&s.wz);
                match driver {
                    Driver::Instruments => {
                        let m = k + zwz;
                        s.u[0].copy_from(x);
                        s.u[0] -= &s.pz;
                        s.u[1].copy_from(x);
                        core_ok = woodbury_core(inner, &s.u, &mut s.hu, [-m, k], k);
                    }
                    Driver::Anchored { r } => {
                        let m = k + r * r * zwz;
                        s.u[0].copy_from(&s.pz);
                        s.u[1].copy_from(&s.pz);
                        s.u[1].axpy(zwz / k, x, 1.0);
                        s.u[2].copy_from(&s.pz);
                        s.u[2] *= r;
                        s.u[2].axpy(r * zwz / k, x, 1.0);
                        core_ok = woodbury_core(inner, &s.u, &mut s.hu, [-zwz, zwz, -m], k);
                    }
                }
                if !core_ok {
                    self.diagnostics.smw_fallbacks += 1;
                }
            }
        }

        // Commit beta.
        beta.axpy(-gamma, &s.dir, 1.0);

        // Phi.
        let kp1 = k + 1.0;
        match &md.form {
            Form::Single { x, z, .. } => phi.ger(1.0 / kp1, z, x, k / kp1),
            Form::Cluster { .. } => {
                *phi *= k / kp1;
                *phi += md.g() * (1.0 / kp1);
            }
        }

        // W.
        let m = match (&driver, &md.form) {
            (Driver::Instruments, Form::Single { z, .. }) => {
                let zwz = z.dot(&s.wz);
                rank_one_update(w, &s.wz, zwz, k)
            }
            (Driver::Instruments, Form::Cluster { z_factor }) => block_update(w, z_factor, k),
            (Driver::Anchored { r }, Form::Single { z, .. }) => {
                let zwz = z.dot(&s.wz);
                s.wv.copy_from(&s.wz);
                s.wv *= *r;
                rank_one_update(w, &s.wv, r * r * zwz, k)
            }
            (Driver::Anchored { .. }, Form::Cluster { .. }) => {
                s.wv.gemv(1.0, w, &s.anchor_resid, 0.0);
                let vwv = s.anchor_resid.dot(&s.wv);
                rank_one_update(w, &s.wv, vwv, k)
            }
        }
        .map_err(|detail| Error::NumericalBreakdown { step, detail })?;
        debug_assert!(m > 0.0);

        // betabar.
        let t = step as f64;
        beta_bar.axpy(1.0 / t, beta, (t - 1.0) / t);

        self.i = step;
        if !core_ok {
            self.recompute_inner();
        }
        Ok(())
    }
}

/// Applies the Woodbury correction `H <- (k+1)/k (H - HU (D + U'HU)^{-1} U'H)`
/// for `R = diag.len()` columns of `u`. Returns `false`, leaving `h`
/// untouched, when the core is singular or ill-conditioned.
pub(crate) fn woodbury_core<const R: usize>(
    h: &mut DMatrix<f64>,
    u: &[DVector<f64>; 3],
    hu: &mut [DVector<f64>; 3],
    diag: [f64; R],
    k: f64,
) -> bool {
    for a in 0..R {
        hu[a].gemv(1.0, h, &u[a], 0.0);
    }
    let mut core = SmallCore::<R> { a: [[0.0; R]; R] };
    for a in 0..R {
        for b in a..R {
            let v = 0.5 * (u[a].dot(&hu[b]) + u[b].dot(&hu[a]));
            core.a[a][b] = v;
            core.a[b][a] = v;
        }
        core.a[a][a] += diag[a];
    }
    let Some(inv) = core.inverse() else {
        return false;
    };
    linalg::woodbury_apply(h, &hu[..R], &inv, (k + 1.0) / k);
    true
}

/// `W <- (k+1)/k (W - wv wv' / m)` with `m = k + v'Wv`, written symmetrically.
/// `wv` must hold `W v` for the pre-update `W`.
fn rank_one_update(w: &mut DMatrix<f64>, wv: &DVector<f64>, vwv: f64, k: f64) -> Result<f64, String> {
    let m = k + vwv;
    if !(m > 0.0) || !m.is_finite() {
        return Err(format!("m = {m:e} is not positive"));
    }
    let n = w.nrows();
    let scale = (k + 1.0) / k;
    let inv_m = 1.0 / m;
    for j in 0..n {
        let wj = wv[j] * inv_m;
        for i in 0..=j {
            let v = scale * (0.5 * (w[(i, j)] + w[(j, i)]) - wv[i] * wj);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Rank-`T` Woodbury update for a cluster: `W <- (k+1)/k (W - WF (kI + F'WF)^{-1} F'W)`.
fn block_update(w: &mut DMatrix<f64>, f: &DMatrix<f64>, k: f64) -> Result<f64, String> {
    let wf = &*w * f;
    let mut core = f.transpose() * &wf;
    for j in 0..core.nrows() {
        core[(j, j)] += k;
    }
    let chol = core.clone().cholesky().ok_or_else(|| "cluster Woodbury core is not positive definite".to_string())?;
    let solved = chol.solve(&wf.transpose());
    let corr = &wf * solved;
    *w -= corr;
    *w *= (k + 1.0) / k;
    linalg::symmetrize(w);
    Ok(core.trace() / core.nrows() as f64)
}

/// One rank-one weight update: returns `m = k + z'Wz` and the updated `W`.
pub fn smw_weight_update_2sls(w: &DMatrix<f64>, z: &DVector<f64>, k: u64) -> Result<(f64, DMatrix<f64>)> {
    weight_update(w, z, k)
}

pub(crate) fn weight_update(w: &DMatrix<f64>, v: &DVector<f64>, k: u64) -> Result<(f64, DMatrix<f64>)> {
    if k == 0 {
        return Err(Error::Config("k = n0 + i - 1 must be at least 1".into()));
    }
    if w.nrows() != v.len() || w.ncols() != v.len() {
        return Err(Error::InvalidInput("weight and vector dimensions differ".into()));
    }
    let mut out = w.clone();
    linalg::symmetrize(&mut out);
    let wv = &out * v;
    let vwv = v.dot(&wv);
    let m = rank_one_update(&mut out, &wv, vwv, k as f64)
        .map_err(|detail| Error::NumericalBreakdown { step: k, detail })?;
    Ok((m, out))
}

/// Woodbury update of `(Phi' W Phi)^{-1}` across one S2SLS step using the
/// 2x2 core with `D = diag(-m, k)` and `U = [x - Phi' W z, x]`. `phi` and `w`
/// are the pre-update values. `None` when the core is ill-conditioned.
pub fn smw_inner_inverse_update_2sls(
    inner: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    w: &DMatrix<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    m: f64,
    k: u64,
) -> Option<DMatrix<f64>> {
    let pz = phi.transpose() * (w * z);
    let d_beta = x.len();
    let mut u: [DVector<f64>; 3] = std::array::from_fn(|_| DVector::zeros(d_beta));
    u[0] = x - &pz;
    u[1] = x.clone();
    let mut hu = u.clone();
    let mut h = inner.clone();
    let k = k as f64;
    woodbury_core(&mut h, &u, &mut hu, [-m, k], k).then_some(h)
}

/// One warm-up (S2SLS) step.
pub fn step_s2sls(state: &mut OnlineState, md: &MomentData) -> Result<()> {
    if state.phase != Phase::Warmup {
        return Err(Error::InvalidPhase { expected: Phase::Warmup, found: state.phase });
    }
    state.advance(md)
}

/// Folds [`step_s2sls`] over a stream. Errors carry the 1-based index of the
/// offending element.
pub fn run_s2sls<I>(stream: I, mut state: OnlineState) -> Result<OnlineState>
where
    I: IntoIterator,
    I::Item: Borrow<MomentData>,
{
    for (idx, md) in stream.into_iter().enumerate() {
        step_s2sls(&mut state, md.borrow()).map_err(|e| e.at_step(idx as u64 + 1))?;
    }
    Ok(state)
}
