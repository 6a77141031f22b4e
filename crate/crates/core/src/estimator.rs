//! One streaming estimator with its inference accumulators.
//!
//! [`OnlineEstimator`] owns the recursion state and whatever is needed for the
//! requested inference: the random-scaling accumulator, the over-identification
//! accumulator and the side-by-side OLS path of the endogeneity test. For
//! S2SLS with the endogeneity test the IV path of that test is the estimator
//! itself, so nothing runs twice.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    dwh_step, dwh_test, plug_in_statistic, random_scaling_intervals, wald_random_scaling, ConfidenceInterval,
    DwhState, JAccumulator, LrvAccumulator, OlsMode, TestResult, Z_975,
};
use crate::learning_rate::{self, rule_of_thumb_gamma0, DEFAULT_ALPHA, DEFAULT_DECAY};
use crate::moments::{Dims, MomentData, Observation};
use crate::s2sls::{self, Beta0, Diagnostics, OnlineState, Phase};
use crate::sgmm::{self, N1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[default]
    S2sls,
    Sgmm,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::S2sls => "s2sls",
            EstimatorKind::Sgmm => "sgmm",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s2sls" => Ok(EstimatorKind::S2sls),
            "sgmm" => Ok(EstimatorKind::Sgmm),
            other => Err(Error::Config(format!("unknown estimator '{other}' (expected s2sls or sgmm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Gamma0 {
    #[default]
    RuleOfThumb,
    Fixed(f64),
}

impl FromStr for Gamma0 {
    type Err = Error;

    /// `rule-of-thumb` (or `rot`), or a positive number.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "rule-of-thumb" | "rot" | "auto" => Ok(Gamma0::RuleOfThumb),
            other => match other.parse::<f64>() {
                Ok(g) if g > 0.0 && g.is_finite() => Ok(Gamma0::Fixed(g)),
                _ => Err(Error::Config(format!("gamma0 must be 'rule-of-thumb' or a positive number, got '{s}'"))),
            },
        }
    }
}

/// Requested inference. `dwh` holds the 0-based coordinates compared by the
/// endogeneity test.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Inference {
    pub plug_in: bool,
    pub random_scaling: bool,
    pub dwh: Option<Vec<usize>>,
    pub jtest: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub n1: N1,
    pub eta0: f64,
    pub alpha_quantile: f64,
    pub decay: f64,
    pub gamma0: Gamma0,
    pub beta0: Beta0,
    pub inference: Inference,
    pub ols_mode: OlsMode,
    /// Null value of the Wald tests; zero when absent.
    pub hypothesis: Option<Vec<f64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::S2sls,
            n1: N1::Auto,
            eta0: 0.0,
            alpha_quantile: DEFAULT_ALPHA,
            decay: DEFAULT_DECAY,
            gamma0: Gamma0::RuleOfThumb,
            beta0: Beta0::Offline2sls,
            inference: Inference { random_scaling: true, ..Inference::default() },
            ols_mode: OlsMode::Preconditioned,
            hypothesis: None,
        }
    }
}

/// Wall-clock time spent inside the recursion, by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub warmup: Duration,
    pub efficient: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.warmup + self.efficient
    }
}

#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    kind: EstimatorKind,
    inference: Inference,
    hypothesis: Option<Vec<f64>>,
    /// `None` when the IV path lives inside `dwh`.
    state: Option<OnlineState>,
    dwh: Option<DwhState>,
    lrv: Option<LrvAccumulator>,
    jacc: Option<JAccumulator>,
    n1: Option<u64>,
    gamma0: f64,
    times: PhaseTimes,
}

impl OnlineEstimator {
    /// Initializes on `init_sample`. `stream_len` is the number of steps that
    /// will follow; SGMM needs it to resolve an automatic `n1`.
    pub fn new(cfg: &EstimatorConfig, init_sample: &[Observation], stream_len: Option<u64>) -> Result<Self> {
        let first = init_sample
            .first()
            .ok_or_else(|| Error::InvalidInput("initialization sample is empty".into()))?;
        let dims = Dims::new(first.x.len(), first.z.len())?;
        let inf = &cfg.inference;
        if cfg.kind == EstimatorKind::S2sls && (inf.plug_in || inf.jtest) {
            return Err(Error::Config(
                "plug-in and over-identification inference need the efficient estimator (sgmm)".into(),
            ));
        }
        if inf.jtest && !dims.is_overidentified() {
            return Err(Error::NotOveridentified { d_g: dims.d_g, d_beta: dims.d_beta });
        }
        if let Some(h) = &cfg.hypothesis {
            if h.len() != dims.d_beta {
                return Err(Error::Config(format!("hypothesis has {} values, expected {}", h.len(), dims.d_beta)));
            }
        }
        let n1 = match cfg.kind {
            EstimatorKind::S2sls => None,
            EstimatorKind::Sgmm => Some(match (cfg.n1, stream_len) {
                (n1, Some(n)) => n1.resolve(n)?,
                (N1::Fixed(v), None) if v >= 1 => v,
                _ => return Err(Error::Config("an automatic n1 needs the stream length".into())),
            }),
        };
        let gamma0 = match cfg.gamma0 {
            Gamma0::Fixed(g) => g,
            Gamma0::RuleOfThumb => rule_of_thumb_gamma0(init_sample, cfg.alpha_quantile, cfg.eta0)?,
        };
        let schedule = learning_rate::schedule(gamma0, cfg.decay)?;
        let dwh = match &inf.dwh {
            Some(idx) => {
                Some(DwhState::init(init_sample, cfg.eta0, schedule, cfg.beta0.clone(), cfg.ols_mode, idx)?)
            }
            None => None,
        };
        let state = if cfg.kind == EstimatorKind::S2sls && dwh.is_some() {
            None
        } else {
            Some(s2sls::init_state(init_sample, cfg.eta0, schedule, cfg.beta0.clone())?)
        };
        Ok(OnlineEstimator {
            kind: cfg.kind,
            inference: inf.clone(),
            hypothesis: cfg.hypothesis.clone(),
            state,
            dwh,
            lrv: inf.random_scaling.then(|| LrvAccumulator::new(dims.d_beta)),
            jacc: (cfg.kind == EstimatorKind::Sgmm).then(|| JAccumulator::new(dims)),
            n1,
            gamma0,
            times: PhaseTimes::default(),
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn state(&self) -> &OnlineState {
        match (&self.state, &self.dwh) {
            (Some(s), _) => s,
            (None, Some(d)) => d.iv(),
            (None, None) => unreachable!("estimator without a state"),
        }
    }

    pub fn dims(&self) -> Dims {
        self.state().dims()
    }

    pub fn steps(&self) -> u64 {
        self.state().step_count()
    }

    pub fn n1(&self) -> Option<u64> {
        self.n1
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn times(&self) -> PhaseTimes {
        self.times
    }

    pub fn lrv(&self) -> Option<&LrvAccumulator> {
        self.lrv.as_ref()
    }

    pub fn dwh_state(&self) -> Option<&DwhState> {
        self.dwh.as_ref()
    }

    /// One step; errors carry the 1-based step index.
    pub fn step(&mut self, md: &MomentData) -> Result<()> {
        let i = self.steps() + 1;
        self.step_inner(md, i).map_err(|e| e.at_step(i))
    }

    fn step_inner(&mut self, md: &MomentData, i: u64) -> Result<()> {
        if let Some(d) = &mut self.dwh {
            dwh_step(d, md)?;
        }
        if let Some(state) = &mut self.state {
            match (self.kind, self.n1) {
                (EstimatorKind::Sgmm, Some(n1)) if i > n1 => {
                    sgmm::step_sgmm(state, md)?;
                    if let Some(j) = &mut self.jacc {
                        j.update(md, state.beta_bar());
                    }
                }
                (EstimatorKind::Sgmm, Some(n1)) => {
                    s2sls::step_s2sls(state, md)?;
                    let j = self.jacc.as_mut().expect("sgmm keeps a J accumulator");
                    j.observe_warmup(md);
                    if i == n1 {
                        sgmm::transition_to_efficient(state)?;
                        j.start(state.anchor().expect("anchor set on transition"))?;
                    }
                }
                _ => s2sls::step_s2sls(state, md)?,
            }
        }
        if let Some(acc) = &mut self.lrv {
            let beta = match (&self.state, &self.dwh) {
                (Some(s), _) => s.beta(),
                (None, Some(d)) => d.iv().beta(),
                (None, None) => unreachable!(),
            };
            acc.update(beta);
        }
        Ok(())
    }

    /// Steps through `batch`, adding the elapsed time to the phase it was
    /// spent in.
    pub fn step_batch<'a, I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a MomentData>,
    {
        let mut t0 = Instant::now();
        let mut phase = self.state().phase();
        for md in batch {
            let r = self.step(md);
            let now_phase = self.state().phase();
            if now_phase != phase || r.is_err() {
                self.add_time(phase, t0.elapsed());
                t0 = Instant::now();
                phase = now_phase;
            }
            r?;
        }
        self.add_time(phase, t0.elapsed());
        Ok(())
    }

    fn add_time(&mut self, phase: Phase, d: Duration) {
        match phase {
            Phase::Warmup => self.times.warmup += d,
            Phase::Efficient => self.times.efficient += d,
        }
    }

    /// Point estimate and inference after the steps so far. `n_eff` is the
    /// sample size for the plug-in variance (the step count when `None`).
    pub fn finish(&self, n_eff: Option<u64>) -> Result<Estimate> {
        let state = self.state();
        let steps = state.step_count();
        if steps == 0 {
            return Err(Error::Config("no observations were processed".into()));
        }
        if let Some(n1) = self.n1 {
            if state.phase() != Phase::Efficient {
                return Err(Error::Config(format!(
                    "stream ended after {steps} steps, before the efficient phase (n1 = {n1})"
                )));
            }
        }
        let n_eff = n_eff.unwrap_or(steps).clamp(1, steps);
        let beta_bar = state.beta_bar().clone();
        let d = beta_bar.len();
        let h = DVector::from_vec(self.hypothesis.clone().unwrap_or_else(|| vec![0.0; d]));
        let plug_in = if self.inference.plug_in {
            let avar = state.inner_inverse().clone();
            let intervals = beta_bar
                .iter()
                .enumerate()
                .map(|(k, &b)| ConfidenceInterval::centered(b, Z_975 * (avar[(k, k)].max(0.0) / n_eff as f64).sqrt()))
                .collect();
            let stat = plug_in_statistic(&beta_bar, &state.inner_matrix(), n_eff, &h)?;
            Some(VarianceInference { avar, intervals, wald: TestResult::chi_square(stat.max(0.0), d) })
        } else {
            None
        };
        let random_scaling = match &self.lrv {
            Some(acc) => Some(VarianceInference {
                avar: acc.variance(),
                intervals: random_scaling_intervals(&beta_bar, acc)?,
                wald: wald_random_scaling(&beta_bar, acc, &h)?,
            }),
            None => None,
        };
        let dwh = self.dwh.as_ref().map(dwh_test).transpose()?;
        let jtest = match (&self.jacc, self.inference.jtest) {
            (Some(j), true) => Some(j.test(state.weight(), state.dims())?),
            _ => None,
        };
        let jtest_at_average = match (&self.jacc, self.inference.jtest) {
            (Some(j), true) => j.test_at(&beta_bar, state.weight(), state.dims()).transpose()?,
            _ => None,
        };
        Ok(Estimate {
            kind: self.kind,
            beta_bar,
            steps,
            n_eff,
            n0: state.n0(),
            n1: self.n1,
            gamma0: self.gamma0,
            plug_in,
            random_scaling,
            dwh,
            jtest,
            jtest_at_average,
            diagnostics: state.diagnostics(),
            times: self.times,
        })
    }

    /// Heap bytes held by the recursion and accumulators.
    pub fn heap_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        let lrv = self.lrv.as_ref().map_or(0, |a| {
            let d = a.dim();
            (d * d + 3 * d) * f
        });
        let dims = self.dims();
        let j = self.jacc.as_ref().map_or(0, |_| (dims.d_g * dims.d_beta + 2 * dims.d_g) * f);
        let dwh = self.dwh.as_ref().map_or(0, |d| {
            let q = 2 * d.sub_indices().len();
            d.iv().heap_bytes() + (dims.d_beta * dims.d_beta + 3 * dims.d_beta + q * q + 3 * q) * f
        });
        self.state.as_ref().map_or(0, |s| s.heap_bytes()) + lrv + j + dwh
    }
}

/// Variance estimate (at the `sqrt(n)` scale), per-coordinate 95% intervals
/// and the Wald test of the configured null.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceInference {
    pub avar: DMatrix<f64>,
    pub intervals: Vec<ConfidenceInterval>,
    pub wald: TestResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub kind: EstimatorKind,
    pub beta_bar: DVector<f64>,
    pub steps: u64,
    pub n_eff: u64,
    pub n0: u64,
    pub n1: Option<u64>,
    pub gamma0: f64,
    pub plug_in: Option<VarianceInference>,
    pub random_scaling: Option<VarianceInference>,
    pub dwh: Option<TestResult>,
    pub jtest: Option<TestResult>,
    /// Same quadratic form with the full-sample moment evaluated at the final
    /// average instead of the running mean along the path.
    pub jtest_at_average: Option<TestResult>,
    pub diagnostics: Diagnostics,
    pub times: PhaseTimes,
}

/// Runs `cfg` over a fully known stream: initialization on `init_sample`,
/// then one step per element.
pub fn estimate<'a, I>(cfg: &EstimatorConfig, init_sample: &[Observation], stream: I) -> Result<Estimate>
where
    I: IntoIterator<Item = &'a MomentData>,
    I::IntoIter: ExactSizeIterator,
{
    let it = stream.into_iter();
    let mut est = OnlineEstimator::new(cfg, init_sample, Some(it.len() as u64))?;
    est.step_batch(it)?;
    est.finish(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpConfig};
    use crate::inference::{critical_value, StatisticForm};
    use crate::learning_rate::schedule;
    use crate::moments::moment_data;
    use crate::s2sls::run_s2sls;
    use crate::sgmm::run_sgmm;
    use approx::assert_relative_eq;

    #[test]
    fn option_strings_parse() {
        assert_eq!("rot".parse::<Gamma0>().unwrap(), Gamma0::RuleOfThumb);
        assert_eq!("rule_of_thumb".parse::<Gamma0>().unwrap(), Gamma0::RuleOfThumb);
        assert_eq!("0.25".parse::<Gamma0>().unwrap(), Gamma0::Fixed(0.25));
        assert!("-1".parse::<Gamma0>().is_err());
        assert_eq!("AUTO".parse::<N1>().unwrap(), N1::Auto);
        assert_eq!("300".parse::<N1>().unwrap(), N1::Fixed(300));
        assert!("3.5".parse::<N1>().is_err());
        assert_eq!("plain".parse::<OlsMode>().unwrap(), OlsMode::Plain);
        assert_eq!("zero".parse::<Beta0>().unwrap(), Beta0::Zero);
        assert_eq!("1, 2".parse::<Beta0>().unwrap(), Beta0::Given(DVector::from_vec(vec![1.0, 2.0])));
        assert!("1,x".parse::<Beta0>().is_err());
    }

    fn data(n: u64, seed: u64) -> (Vec<Observation>, Vec<MomentData>) {
        let cfg = DgpConfig { seed, ..DgpConfig::with_dims(n + 300, 3, 6) };
        let obs: Vec<_> = generate(&cfg).unwrap().collect();
        let md = obs[300..].iter().map(|o| moment_data(o, cfg.dims()).unwrap()).collect();
        (obs[..300].to_vec(), md)
    }

    fn sgmm_cfg() -> EstimatorConfig {
        EstimatorConfig {
            kind: EstimatorKind::Sgmm,
            inference: Inference { plug_in: true, random_scaling: true, dwh: Some(vec![0]), jtest: true },
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn s2sls_driver_matches_bare_recursion() {
        let (init, md) = data(2000, 1);
        let cfg = EstimatorConfig {
            inference: Inference { random_scaling: true, dwh: Some(vec![0, 2]), ..Inference::default() },
            ..EstimatorConfig::default()
        };
        let est = estimate(&cfg, &init, &md).unwrap();
        let g0 = rule_of_thumb_gamma0(&init, DEFAULT_ALPHA, 0.0).unwrap();
        let bare = s2sls::init_state(&init, 0.0, schedule(g0, DEFAULT_DECAY).unwrap(), Beta0::Offline2sls).unwrap();
        let bare = run_s2sls(md.iter(), bare).unwrap();
        assert_eq!(&est.beta_bar, bare.beta_bar());
        assert_eq!(est.steps, 2000);
        assert!(est.dwh.is_some() && est.jtest.is_none() && est.plug_in.is_none());
    }

    #[test]
    fn sgmm_driver_matches_bare_recursion() {
        let (init, md) = data(3000, 2);
        let est = estimate(&sgmm_cfg(), &init, &md).unwrap();
        let g0 = rule_of_thumb_gamma0(&init, DEFAULT_ALPHA, 0.0).unwrap();
        let bare = s2sls::init_state(&init, 0.0, schedule(g0, DEFAULT_DECAY).unwrap(), Beta0::Offline2sls).unwrap();
        let run = run_sgmm(md.iter(), 3000, N1::Auto, bare).unwrap();
        assert_eq!(&est.beta_bar, run.state.beta_bar());
        assert_eq!(est.n1, Some(sgmm::default_n1(3000)));
        let j = run.jtest.test(run.state.weight(), run.state.dims()).unwrap();
        assert_eq!(est.jtest.unwrap().statistic, j.statistic);
    }

    #[test]
    fn reported_intervals_are_reconstructible() {
        let (init, md) = data(3000, 3);
        let est = estimate(&sgmm_cfg(), &init, &md).unwrap();
        let n = est.n_eff as f64;
        let pi = est.plug_in.as_ref().unwrap();
        let rs = est.random_scaling.as_ref().unwrap();
        let cv = critical_value(1, StatisticForm::TType).unwrap();
        for k in 0..3 {
            let b = est.beta_bar[k];
            assert_relative_eq!(pi.intervals[k].upper - b, Z_975 * (pi.avar[(k, k)] / n).sqrt(), epsilon = 1e-12);
            assert_relative_eq!(rs.intervals[k].upper - b, cv * (rs.avar[(k, k)] / n).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn lrv_tracks_the_estimator_path() {
        let (init, md) = data(500, 4);
        let cfg = EstimatorConfig { inference: Inference { random_scaling: true, ..Inference::default() }, ..EstimatorConfig::default() };
        let mut est = OnlineEstimator::new(&cfg, &init, None).unwrap();
        let mut path = Vec::new();
        for m in &md {
            est.step(m).unwrap();
            path.push(est.state().beta().clone());
        }
        let direct = crate::inference::lrv::direct_variance(&path);
        assert_relative_eq!(est.lrv().unwrap().variance(), direct, max_relative = 1e-10);
    }

    #[test]
    fn configuration_errors() {
        let (init, md) = data(100, 5);
        let plug_s2sls = EstimatorConfig {
            inference: Inference { plug_in: true, ..Inference::default() },
            ..EstimatorConfig::default()
        };
        assert!(matches!(OnlineEstimator::new(&plug_s2sls, &init, None), Err(Error::Config(_))));
        assert!(matches!(OnlineEstimator::new(&sgmm_cfg(), &init, None), Err(Error::Config(_))));
        let short = EstimatorConfig { n1: N1::Fixed(1000), ..sgmm_cfg() };
        let mut est = OnlineEstimator::new(&short, &init, None).unwrap();
        est.step_batch(&md).unwrap();
        assert!(matches!(est.finish(None), Err(Error::Config(_))));
        let bad_h = EstimatorConfig { hypothesis: Some(vec![1.0]), ..EstimatorConfig::default() };
        assert!(matches!(OnlineEstimator::new(&bad_h, &init, None), Err(Error::Config(_))));
    }

    #[test]
    fn phase_times_are_split() {
        let (init, md) = data(2000, 6);
        let mut est = OnlineEstimator::new(&sgmm_cfg(), &init, Some(2000)).unwrap();
        est.step_batch(&md).unwrap();
        let t = est.times();
        assert!(t.warmup > Duration::ZERO && t.efficient > Duration::ZERO);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SGMM".parse::<EstimatorKind>().unwrap(), EstimatorKind::Sgmm);
        assert_eq!(EstimatorKind::S2sls.to_string(), "s2sls");
        assert!("ols".parse::<EstimatorKind>().is_err());
    }
}
