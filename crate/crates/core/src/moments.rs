//! Observations and the affine moment data `g(beta) = G beta + H` built from
//! them.
//!
//! A single record contributes `G = z x'` and `H = -z y`. A cluster of `T`
//! records is treated as one mini-batch whose moment data is the member
//! average.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regressor and instrument dimensions of a stream, fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_beta: usize,
    pub d_g: usize,
}

impl Dims {
    pub fn new(d_beta: usize, d_g: usize) -> Result<Self> {
        if d_beta == 0 {
            return Err(Error::InvalidInput("d_beta must be positive".into()));
        }
        if d_g < d_beta {
            return Err(Error::InvalidInput(format!(
                "need at least as many instruments as regressors (d_g = {d_g} < d_beta = {d_beta})"
            )));
        }
        Ok(Dims { d_beta, d_g })
    }

    pub fn is_overidentified(&self) -> bool {
        self.d_g > self.d_beta
    }
}

/// One record `(y, x, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

impl Observation {
    pub fn new(y: f64, x: DVector<f64>, z: DVector<f64>) -> Result<Self> {
        let obs = Observation { y, x, z };
        Dims::new(obs.x.len(), obs.z.len())?;
        obs.check_finite()?;
        Ok(obs)
    }

    pub fn from_slices(y: f64, x: &[f64], z: &[f64]) -> Result<Self> {
        Self::new(y, DVector::from_column_slice(x), DVector::from_column_slice(z))
    }

    /// Zero-filled record, handy as a reusable buffer.
    pub fn zeros(dims: Dims) -> Self {
        Observation { y: 0.0, x: DVector::zeros(dims.d_beta), z: DVector::zeros(dims.d_g) }
    }

    pub fn dims(&self) -> Dims {
        Dims { d_beta: self.x.len(), d_g: self.z.len() }
    }

    /// Validates dimensions against `dims` and finiteness of every entry.
    pub fn check(&self, dims: Dims) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::Schema { expected: dims, found: self.dims() });
        }
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        if self.y.is_finite() && self.x.iter().all(|v| v.is_finite()) && self.z.iter().all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidInput("observation contains a non-finite value".into()))
        }
    }
}

/// A non-empty group of records updated as one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    members: Vec<Observation>,
}

impl Cluster {
    pub fn new(members: Vec<Observation>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidInput("cluster must contain at least one observation".into()))?;
        let dims = first.dims();
        for m in &members {
            m.check(dims)?;
        }
        Ok(Cluster { members })
    }

    pub fn members(&self) -> &[Observation] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.members[0].dims()
    }
}

/// Unit of the stream: a single record or a cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Single(Observation),
    Cluster(Cluster),
}

impl Unit {
    pub fn moment_data(&self, dims: Dims) -> Result<MomentData> {
        match self {
            Unit::Single(o) => moment_data(o, dims),
            Unit::Cluster(c) => {
                if c.dims() != dims {
                    return Err(Error::Schema { expected: dims, found: c.dims() });
                }
                cluster_moment_data(c)
            }
        }
    }

    pub fn observations(&self) -> &[Observation] {
        match self {
            Unit::Single(o) => std::slice::from_ref(o),
            Unit::Cluster(c) => c.members(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Form {
    /// `G = z x'`, `H = -z y`.
    Single { x: DVector<f64>, z: DVector<f64>, y: f64 },
    /// Columns are `z_t / sqrt(T)`, so `F F'` is the mean instrument Gram.
    Cluster { z_factor: DMatrix<f64> },
}

/// The pair `(G, H)` that linearizes the moment function.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentData {
    g: DMatrix<f64>,
    h: DVector<f64>,
    pub(crate) form: Form,
}

/// `G = z x'`, `H = -z y`.
pub fn moment_data(obs: &Observation, dims: Dims) -> Result<MomentData> {
    let mut md = MomentData::zeros(dims);
    md.assign(obs)?;
    Ok(md)
}

/// Member-averaged moment data of a cluster.
pub fn cluster_moment_data(cluster: &Cluster) -> Result<MomentData> {
    let dims = cluster.dims();
    let t = cluster.len();
    if t == 1 {
        return moment_data(&cluster.members()[0], dims);
    }
    let inv_t = 1.0 / t as f64;
    let scale = inv_t.sqrt();
    let mut g = DMatrix::zeros(dims.d_g, dims.d_beta);
    let mut h = DVector::zeros(dims.d_g);
    let mut z_factor = DMatrix::zeros(dims.d_g, t);
    for (k, m) in cluster.members().iter().enumerate() {
        g.ger(inv_t, &m.z, &m.x, 1.0);
        h.axpy(-m.y * inv_t, &m.z, 1.0);
        z_factor.column_mut(k).copy_from(&(&m.z * scale));
    }
    Ok(MomentData { g, h, form: Form::Cluster { z_factor } })
}

impl MomentData {
    pub fn zeros(dims: Dims) -> Self {
        MomentData {
            g: DMatrix::zeros(dims.d_g, dims.d_beta),
            h: DVector::zeros(dims.d_g),
            form: Form::Single { x: DVector::zeros(dims.d_beta), z: DVector::zeros(dims.d_g), y: 0.0 },
        }
    }

    /// Overwrites `self` with the moment data of `obs` without reallocating.
    pub fn assign(&mut self, obs: &Observation) -> Result<()> {
        let dims = self.dims();
        obs.check(dims)?;
        match &mut self.form {
            Form::Single { x, z, y } => {
                x.copy_from(&obs.x);
                z.copy_from(&obs.z);
                *y = obs.y;
            }
            Form::Cluster { .. } => {
                self.form = Form::Single { x: obs.x.clone(), z: obs.z.clone(), y: obs.y };
            }
        }
        self.g.ger(1.0, &obs.z, &obs.x, 0.0);
        self.h.copy_from(&obs.z);
        self.h *= -obs.y;
        Ok(())
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn dims(&self) -> Dims {
        Dims { d_beta: self.g.ncols(), d_g: self.g.nrows() }
    }

    /// Number of records behind this moment data.
    pub fn batch_size(&self) -> usize {
        match &self.form {
            Form::Single { .. } => 1,
            Form::Cluster { z_factor } => z_factor.ncols(),
        }
    }

    /// `g(beta) = G beta + H`.
    pub fn eval(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.h.len());
        self.eval_into(beta, &mut out);
        out
    }

    pub(crate) fn eval_into(&self, beta: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.form {
            Form::Single { x, z, y } => {
                let r = x.dot(beta) - y;
                out.copy_from(z);
                *out *= r;
            }
            Form::Cluster { .. } => {
                out.copy_from(&self.h);
                out.gemv(1.0, &self.g, beta, 1.0);
            }
        }
    }

    /// Instrument Gram contribution `z z'` (or its member average).
    pub fn instrument_gram(&self) -> DMatrix<f64> {
        match &self.form {
            Form::Single { z, .. } => z * z.transpose(),
            Form::Cluster { z_factor } => z_factor * z_factor.transpose(),
        }
    }
}
