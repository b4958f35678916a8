//! Variational two-layer GCN encoder.
//!
//! Each time step is encoded independently with the same weights. The mean
//! and log-std heads share the first layer and keep separate second layers:
//!
//! ```text
//! H        = ReLU(L X W0)
//! mu       = Sigmoid(L H W1_mu)
//! logsigma = Sigmoid(L H W1_sigma)      (or linear, see EncoderConfig)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const W0: &str = "encoder.w0";
pub const W1_MU: &str = "encoder.w1_mu";
pub const W1_SIGMA: &str = "encoder.w1_sigma";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderConfig {
    /// Drop the sigmoid on the log-std head.
    pub linear_logsigma: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub w0: Tensor,
    pub w1_mu: Tensor,
    pub w1_sigma: Tensor,
}

/// Uniform draw in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

impl EncoderParams {
    pub fn glorot<R: Rng>(features: usize, hidden1: usize, hidden2: usize, rng: &mut R) -> Result<Self> {
        if features == 0 || hidden1 == 0 || hidden2 == 0 {
            return Err(Error::Contract("encoder sizes must be positive".into()));
        }
        Ok(Self {
            w0: glorot(features, hidden1, rng),
            w1_mu: glorot(hidden1, hidden2, rng),
            w1_sigma: glorot(hidden1, hidden2, rng),
        })
    }

    pub fn hidden2(&self) -> usize {
        self.w1_mu.cols()
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.insert(W0, self.w0.clone());
        store.insert(W1_MU, self.w1_mu.clone());
        store.insert(W1_SIGMA, self.w1_sigma.clone());
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w0: store.expect(W0)?.clone(),
            w1_mu: store.expect(W1_MU)?.clone(),
            w1_sigma: store.expect(W1_SIGMA)?.clone(),
        })
    }
}

/// Per-node Gaussian posterior at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl LatentDistribution {
    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }

    pub fn n_nodes(&self) -> usize {
        self.mu.rows()
    }

    pub fn dims(&self) -> usize {
        self.mu.cols()
    }

    /// The posterior mean as a sample (all noise zero).
    pub fn mean_sample(&self) -> LatentSample {
        LatentSample {
            z: self.mu.clone(),
            noise: Tensor::zeros(self.mu.shape()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Tensor,
    pub noise: Tensor,
}

/// Records the encoder on `tape` for one step; returns `(mu, log_sigma)`.
pub fn encode_on_tape(
    tape: &mut Tape,
    x: Var,
    laplacian: Var,
    store: &ParamStore,
    cfg: EncoderConfig,
) -> Result<(Var, Var)> {
    let w0 = tape.param(store, W0)?;
    let w1_mu = tape.param(store, W1_MU)?;
    let w1_sigma = tape.param(store, W1_SIGMA)?;

    let lx = tape.matmul(laplacian, x)?;
    let pre = tape.matmul(lx, w0)?;
    let h = tape.relu(pre);
    let lh = tape.matmul(laplacian, h)?;

    let mu_pre = tape.matmul(lh, w1_mu)?;
    let mu = tape.sigmoid(mu_pre);
    let ls_pre = tape.matmul(lh, w1_sigma)?;
    let log_sigma = if cfg.linear_logsigma {
        ls_pre
    } else {
        tape.sigmoid(ls_pre)
    };
    Ok((mu, log_sigma))
}

fn check_features(x: &Tensor) -> Result<()> {
    let cols = x.cols();
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::Data(format!(
            "non-finite encoder input at node {}, feature {}",
            k / cols,
            k % cols
        ))),
        None => Ok(()),
    }
}

/// Posterior for one `n x F` feature matrix.
pub fn encode(
    x: &Tensor,
    laplacian: &Tensor,
    params: &EncoderParams,
    cfg: EncoderConfig,
) -> Result<LatentDistribution> {
    let mut store = ParamStore::new();
    params.register(&mut store);
    encode_with_store(x, laplacian, &store, cfg)
}

pub(crate) fn encode_with_store(
    x: &Tensor,
    laplacian: &Tensor,
    store: &ParamStore,
    cfg: EncoderConfig,
) -> Result<LatentDistribution> {
    check_features(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = tape.constant(laplacian.clone());
    let (mu, ls) = encode_on_tape(&mut tape, xv, lv, store, cfg)?;
    Ok(LatentDistribution {
        mu: tape.value(mu).clone(),
        log_sigma: tape.value(ls).clone(),
    })
}

/// `z = mu + exp(log_sigma) * noise`.
pub fn reparameterize(dist: &LatentDistribution, noise: &Tensor) -> Result<LatentSample> {
    let sigma = dist.sigma();
    let scaled = sigma.zip_map(noise, "reparameterize", |s, e| s * e)?;
    let z = dist.mu.zip_map(&scaled, "reparameterize", |m, s| m + s)?;
    Ok(LatentSample {
        z,
        noise: noise.clone(),
    })
}

/// Tape version of [`reparameterize`]; the noise enters as a constant.
pub fn reparameterize_on_tape(tape: &mut Tape, mu: Var, log_sigma: Var, noise: &Tensor) -> Result<Var> {
    let sigma = tape.exp(log_sigma);
    let eps = tape.constant(noise.clone());
    let scaled = tape.hadamard(sigma, eps)?;
    tape.add(mu, scaled)
}

/// Standard-normal draws of the given shape.
pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
