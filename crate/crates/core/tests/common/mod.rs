//! Shared oracles: a straight-line transcription of the recursions with
//! explicit inverses, random problem generators and a direct LRV double loop.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sgmm_core::learning_rate::schedule;
use sgmm_core::moments::{moment_data, Dims, MomentData, Observation};
use sgmm_core::s2sls::OnlineState;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(r))
}

pub fn randv(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(r))
}

/// Well-conditioned SPD matrix `B B'/d + I`.
pub fn random_spd(r: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let b = randn(r, d, d);
    let s = &b * b.transpose() / d as f64 + DMatrix::identity(d, d);
    (&s + s.transpose()) * 0.5
}

/// Linear IV records `x = Pi' z + u`, `y = x' beta + e + 0.5 u_1`.
pub struct IvProblem {
    pub dims: Dims,
    pub pi: DMatrix<f64>,
    pub beta: DVector<f64>,
}

impl IvProblem {
    pub fn random(r: &mut ChaCha8Rng, d_beta: usize, d_g: usize) -> Self {
        let mut pi = randn(r, d_g, d_beta) * 0.3;
        for k in 0..d_beta {
            pi[(k, k)] += 1.5;
        }
        IvProblem { dims: Dims { d_beta, d_g }, pi, beta: randv(r, d_beta) }
    }

    pub fn draw(&self, r: &mut ChaCha8Rng) -> Observation {
        let z = randv(r, self.dims.d_g);
        let u = randv(r, self.dims.d_beta);
        let x = self.pi.transpose() * &z + &u;
        let y = x.dot(&self.beta) + normal(r) + 0.5 * u[0];
        Observation { y, x, z }
    }

    pub fn draws(&self, r: &mut ChaCha8Rng, n: usize) -> Vec<Observation> {
        (0..n).map(|_| self.draw(r)).collect()
    }
}

pub fn md(o: &Observation) -> MomentData {
    moment_data(o, o.dims()).unwrap()
}

/// Reference state updated by direct inversion; `m` is the running second
/// moment whose inverse is `W`.
#[derive(Clone, Debug)]
pub struct Reference {
    pub i: u64,
    pub n0: u64,
    pub beta: DVector<f64>,
    pub beta_bar: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub anchor: Option<DVector<f64>>,
    pub gamma0: f64,
    pub a: f64,
}

pub fn inv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("oracle matrix is invertible")
}

impl Reference {
    pub fn new(n0: u64, beta0: DVector<f64>, phi0: DMatrix<f64>, w0: &DMatrix<f64>, gamma0: f64, a: f64) -> Self {
        Reference { i: 0, n0, beta_bar: beta0.clone(), beta: beta0, phi: phi0, m: inv(w0), anchor: None, gamma0, a }
    }

    pub fn w(&self) -> DMatrix<f64> {
        inv(&self.m)
    }

    pub fn inner_inverse(&self) -> DMatrix<f64> {
        let w = self.w();
        inv(&(self.phi.transpose() * &w * &self.phi))
    }

    pub fn state(&self) -> OnlineState {
        assert!(self.i == 0 && self.anchor.is_none());
        OnlineState::from_parts(self.n0, self.beta.clone(), self.phi.clone(), self.w(), schedule(self.gamma0, self.a).unwrap())
            .unwrap()
    }

    pub fn enter_efficient(&mut self) {
        self.anchor = Some(self.beta_bar.clone());
    }

    /// beta with the pre-update Phi, W; then Phi; then W; then the average.
    pub fn step(&mut self, o: &Observation) {
        let i = self.i + 1;
        let k = (self.n0 + self.i) as f64;
        let gamma = if i == 1 { self.gamma0 } else { self.gamma0 * (i as f64).powf(-self.a) };
        let w = self.w();
        let a = self.phi.transpose() * &w * &self.phi;
        let g = &o.z * (o.x.dot(&self.beta) - o.y);
        let beta = &self.beta - gamma * inv(&a) * self.phi.transpose() * &w * g;
        let phi = (&self.phi * k + &o.z * o.x.transpose()) / (k + 1.0);
        let v = match &self.anchor {
            None => o.z.clone(),
            Some(b) => &o.z * (o.x.dot(b) - o.y),
        };
        self.m = (&self.m * k + &v * v.transpose()) / (k + 1.0);
        self.beta_bar = (&self.beta_bar * (i - 1) as f64 + &beta) / i as f64;
        self.beta = beta;
        self.phi = phi;
        self.i = i;
    }
}

/// `n^{-2} sum_s (sum_{j<=s} b_j - s bbar)(...)'` by a double loop.
pub fn lrv_double_loop(path: &[DVector<f64>]) -> DMatrix<f64> {
    let n = path.len();
    let d = path[0].len();
    let mut bar = DVector::zeros(d);
    for b in path {
        bar += b;
    }
    bar /= n as f64;
    let mut v = DMatrix::zeros(d, d);
    for s in 1..=n {
        let mut dev = -(&bar * s as f64);
        for b in &path[..s] {
            dev += b;
        }
        v += &dev * dev.transpose();
    }
    v / (n * n) as f64
}

pub fn max_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub fn max_rel_m(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
