//! Diffusion decoder: lagged pairwise Gaussian densities between latent
//! states, the sequence ELBO built from them, and the causal / transition
//! graphs read off a trained cross-covariance.
//!
//! For every ordered pair `(i, j)` the decoder models `(z_i^{t-1}, z_j^t)` as
//! bivariate normal with marginal scales taken from the encoder posteriors and
//! a learned cross-covariance `Sigma_ij` shared across latent dimensions. The
//! diffusion matrix is fixed at `2I`, so the covariance of the underlying
//! linear SDE over one step is approximated by `2(I + Psi Psi^T)`.

use std::f64::consts::PI;

use crate::encoder::{LatentDistribution, LatentSample};
use crate::error::{Error, Result};
use crate::graphs::{mask_pattern, Graph};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const SIGMA: &str = "diffusion.sigma";

/// Default additive guard on the pairwise determinant.
pub const GUARD: f64 = 1e-4;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionParams {
    /// Learned cross-covariance `Sigma_ij` between `z_i^{t-1}` and `z_j^t`.
    pub sigma_cross: Tensor,
    /// 0/1 pattern restricting `sigma_cross`; `None` when masking is off.
    pub mask: Option<Tensor>,
    pub guard: f64,
}

impl DiffusionParams {
    pub fn new(n: usize) -> Self {
        Self {
            sigma_cross: Tensor::zeros(&[n, n]),
            mask: None,
            guard: GUARD,
        }
    }

    /// Enables masking by the connectivity of `graph` and zeroes the
    /// cross-covariance outside it.
    pub fn with_mask(mut self, graph: &Graph) -> Result<Self> {
        let pattern = mask_pattern(graph);
        if pattern.shape() != self.sigma_cross.shape() {
            return Err(Error::dim("mask", pattern.shape(), self.sigma_cross.shape()));
        }
        self.mask = Some(pattern);
        self.apply_mask();
        Ok(self)
    }

    pub fn mask_enabled(&self) -> bool {
        self.mask.is_some()
    }

    pub fn n_nodes(&self) -> usize {
        self.sigma_cross.rows()
    }

    pub fn apply_mask(&mut self) {
        if let Some(m) = &self.mask {
            for (s, k) in self.sigma_cross.data_mut().iter_mut().zip(m.data()) {
                *s *= k;
            }
        }
    }

    /// Clamps every cross-covariance into `[-max_abs, max_abs]`.
    pub fn project(&mut self, max_abs: f64) {
        for s in self.sigma_cross.data_mut() {
            *s = s.clamp(-max_abs, max_abs);
        }
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.insert(SIGMA, self.sigma_cross.clone());
    }

    /// Pulls the current cross-covariance out of `store`.
    pub fn sync_from(&mut self, store: &ParamStore) -> Result<()> {
        let s = store.expect(SIGMA)?;
        if s.shape() != self.sigma_cross.shape() {
            return Err(Error::dim("sync_from", s.shape(), self.sigma_cross.shape()));
        }
        self.sigma_cross = s.clone();
        Ok(())
    }

    /// Writes the (masked) cross-covariance back into `store`.
    pub fn sync_into(&self, store: &mut ParamStore) -> Result<()> {
        let slot = store
            .get_mut(SIGMA)
            .ok_or_else(|| Error::Contract(format!("missing parameter {SIGMA}")))?;
        *slot = self.sigma_cross.clone();
        Ok(())
    }

    /// Cross-covariance with the mask applied.
    pub fn effective(&self) -> Tensor {
        match &self.mask {
            Some(m) => self
                .sigma_cross
                .zip_map(m, "mask", |s, k| s * k)
                .expect("mask shape checked at construction"),
            None => self.sigma_cross.clone(),
        }
    }
}

/// Trapezoidal one-step covariance `2(I + Psi Psi^T)` for diffusion `2I`.
pub fn trapezoid_covariance(psi: &Tensor) -> Result<Tensor> {
    let n = psi.rows();
    if psi.cols() != n {
        return Err(Error::dim("trapezoid_covariance", psi.shape(), &[]));
    }
    let ppt = psi.matmul(&psi.transpose()?)?;
    let eye = Tensor::eye(n);
    Ok(eye.zip_map(&ppt, "trapezoid_covariance", |a, b| 2.0 * (a + b))?)
}

/// Bivariate normal log density of `(z_i, z_j)` with scales `sigma_i`,
/// `sigma_j`, cross-covariance `cov` and an additive guard on the
/// determinant.
#[allow(clippy::too_many_arguments)]
pub fn edge_joint_logdensity(
    z_i: f64,
    z_j: f64,
    mu_i: f64,
    mu_j: f64,
    sigma_i: f64,
    sigma_j: f64,
    cov: f64,
    guard: f64,
) -> f64 {
    let (vi, vj) = (sigma_i * sigma_i, sigma_j * sigma_j);
    let det = vi * vj - cov * cov + guard;
    let (di, dj) = (z_i - mu_i, z_j - mu_j);
    -LOG_2PI - 0.5 * det.ln() - (vj * di * di + vi * dj * dj - 2.0 * cov * di * dj) / (2.0 * det)
}

/// Quadratic part of the pairwise density after substituting
/// `z = mu + sigma * eps`.
pub fn elbo_edge_quadratic(sigma_i: f64, sigma_j: f64, cov: f64, eps_i: f64, eps_j: f64, guard: f64) -> f64 {
    let s = sigma_i * sigma_j;
    let det = s * s - cov * cov + guard;
    (2.0 * cov * s * eps_i * eps_j - s * s * (eps_i * eps_i + eps_j * eps_j)) / (2.0 * det)
}

/// Reparameterized per-edge ELBO term: normalizer, log-determinant and the
/// quadratic part.
pub fn elbo_edge_reparam(sigma_i: f64, sigma_j: f64, cov: f64, eps_i: f64, eps_j: f64, guard: f64) -> f64 {
    let s = sigma_i * sigma_j;
    let det = s * s - cov * cov + guard;
    -LOG_2PI - 0.5 * det.ln() + elbo_edge_quadratic(sigma_i, sigma_j, cov, eps_i, eps_j, guard)
}

/// `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn kl_standard_normal(mu: f64, sigma: f64) -> f64 {
    let v = sigma * sigma;
    0.5 * (mu * mu + v - v.ln() - 1.0)
}

/// One encoded step on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Weighted description of a sequence objective: which consecutive steps
/// contribute pairwise terms and how each step's KL is weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWeights {
    /// `(prev_step, curr_step, weight)` triples.
    pub transitions: Vec<(usize, usize, f64)>,
    /// KL weight per step.
    pub kl: Vec<f64>,
}

impl SequenceWeights {
    /// Weights of a single window of `p` steps: transitions `(t-1, t)` for
    /// `t = 2..p` and KL weights `1, 2, ..., 2, 1`.
    pub fn window(p: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::Contract(format!("sequence ELBO needs p >= 2, got {p}")));
        }
        let transitions = (1..p).map(|t| (t - 1, t, 1.0)).collect();
        let kl = (0..p).map(|t| if t == 0 || t == p - 1 { 1.0 } else { 2.0 }).collect();
        Ok(Self { transitions, kl })
    }

    /// Adds the weights of a `p`-step window starting at step `offset`.
    pub fn add_window(&mut self, offset: usize, p: usize, scale: f64) -> Result<()> {
        let w = Self::window(p)?;
        let needed = offset + p;
        if self.kl.len() < needed {
            self.kl.resize(needed, 0.0);
        }
        for (t, k) in w.kl.iter().enumerate() {
            self.kl[offset + t] += scale * k;
        }
        for (a, b, _) in w.transitions {
            let (a, b) = (a + offset, b + offset);
            match self.transitions.iter_mut().find(|(x, y, _)| *x == a && *y == b) {
                Some(entry) => entry.2 += scale,
                None => self.transitions.push((a, b, scale)),
            }
        }
        Ok(())
    }

    pub fn empty() -> Self {
        Self {
            transitions: Vec::new(),
            kl: Vec::new(),
        }
    }
}

/// Records the negated sequence ELBO (plus the `log sigma_i sigma_j`
/// regularizer) on `tape`.
///
/// `noises[k]` is the standard-normal draw used to reparameterize step `k`.
pub fn sequence_loss_on_tape(
    tape: &mut Tape,
    steps: &[StepVars],
    noises: &[Tensor],
    sigma: Var,
    params: &DiffusionParams,
    weights: &SequenceWeights,
    reg_weight: f64,
) -> Result<Var> {
    if steps.len() != noises.len() || steps.len() < weights.kl.len() {
        return Err(Error::Contract(format!(
            "{} steps, {} noise draws, {} KL weights",
            steps.len(),
            noises.len(),
            weights.kl.len()
        )));
    }
    let first = tape.shape(steps[0].mu).to_vec();
    let (n, dims) = (first[0], first[1]);
    let width = n * dims;

    // Expansion constants: column d*n + j of the pairwise block refers to
    // latent dimension d of target node j.
    let expand_dims = tape.constant(Tensor::from_fn(dims, width, |d, c| if c / n == d { 1.0 } else { 0.0 }));
    let expand_nodes = tape.constant(Tensor::from_fn(n, width, |j, c| if c % n == j { 1.0 } else { 0.0 }));
    let ones_col = tape.constant(Tensor::ones(&[n, 1]));

    let sigma_eff = match &params.mask {
        Some(m) => {
            let mv = tape.constant(m.clone());
            tape.hadamard(sigma, mv)?
        }
        None => sigma,
    };
    let sigma_rep = tape.matmul(sigma_eff, expand_nodes)?;
    let sigma_sq = tape.hadamard(sigma_rep, sigma_rep)?;

    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Var, w: f64| -> Result<()> {
        let scaled = tape.scale(term, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
        Ok(())
    };

    let sigmas: Vec<Var> = steps.iter().map(|s| tape.exp(s.log_sigma)).collect();

    for &(prev, curr, w) in &weights.transitions {
        if w == 0.0 {
            continue;
        }
        let (ep, ec) = (&noises[prev], &noises[curr]);
        // sigma_i^{t-1} replicated across targets, sigma_j^t across sources
        let a = tape.matmul(sigmas[prev], expand_dims)?;
        let ct = tape.transpose(sigmas[curr])?;
        let c_row = tape.reshape(ct, &[1, width])?;
        let b = tape.matmul(ones_col, c_row)?;
        let s = tape.hadamard(a, b)?;
        let s2 = tape.hadamard(s, s)?;

        let diff = tape.sub(s2, sigma_sq)?;
        let det = tape.add_scalar(diff, params.guard);
        let log_det = tape.log(det);
        let log_det_sum = tape.sum(log_det);

        let eps_prod = Tensor::from_fn(n, width, |i, c| ep.get(i, c / n) * ec.get(c % n, c / n));
        let eps_sq = Tensor::from_fn(n, width, |i, c| {
            let (x, y) = (ep.get(i, c / n), ec.get(c % n, c / n));
            x * x + y * y
        });
        let eps_prod = tape.constant(eps_prod.map(|v| 2.0 * v));
        let eps_sq = tape.constant(eps_sq);
        let cross = tape.hadamard(sigma_rep, s)?;
        let cross = tape.hadamard(cross, eps_prod)?;
        let own = tape.hadamard(s2, eps_sq)?;
        let num = tape.sub(cross, own)?;
        let den = tape.scale(det, 2.0);
        let quad = tape.div(num, den)?;
        let quad_sum = tape.sum(quad);

        // negated: LOG_2PI * count + 0.5 * sum log det - sum quad
        let half_ld = tape.scale(log_det_sum, 0.5);
        let neg = tape.sub(half_ld, quad_sum)?;
        let term = tape.add_scalar(neg, LOG_2PI * (n * width) as f64);
        push(tape, term, w)?;

        if reg_weight != 0.0 {
            let lp = tape.sum(steps[prev].log_sigma);
            let lc = tape.sum(steps[curr].log_sigma);
            let both = tape.add(lp, lc)?;
            push(tape, both, w * reg_weight * n as f64)?;
        }
    }

    for (k, &w) in weights.kl.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let StepVars { mu, log_sigma } = steps[k];
        let mu2 = tape.hadamard(mu, mu)?;
        let two_ls = tape.scale(log_sigma, 2.0);
        let var = tape.exp(two_ls);
        let a = tape.add(mu2, var)?;
        let b = tape.sub(a, two_ls)?;
        let kl_sum = tape.sum(b);
        // 0.5 * (sum(...) - count)
        let shifted = tape.add_scalar(kl_sum, -((n * dims) as f64));
        let kl = tape.scale(shifted, 0.5);
        push(tape, kl, w)?;
    }

    total.ok_or_else(|| Error::Contract("sequence objective has no terms".into()))
}

/// Negated ELBO of one window of `p >= 2` steps, including the
/// `reg_weight * sum log(sigma_i sigma_j)` regularizer.
pub fn elbo_total(
    dists: &[LatentDistribution],
    samples: &[LatentSample],
    params: &DiffusionParams,
    reg_weight: f64,
) -> Result<f64> {
    let weights = SequenceWeights::window(dists.len())?;
    if samples.len() != dists.len() {
        return Err(Error::Contract(format!(
            "{} distributions but {} samples",
            dists.len(),
            samples.len()
        )));
    }
    let mut tape = Tape::new();
    let steps: Vec<StepVars> = dists
        .iter()
        .map(|d| StepVars {
            mu: tape.constant(d.mu.clone()),
            log_sigma: tape.constant(d.log_sigma.clone()),
        })
        .collect();
    let noises: Vec<Tensor> = samples.iter().map(|s| s.noise.clone()).collect();
    let sigma = tape.constant(params.sigma_cross.clone());
    let loss = sequence_loss_on_tape(&mut tape, &steps, &noises, sigma, params, &weights, reg_weight)?;
    Ok(tape.value(loss).item())
}

/// Directed causal scores `i -> j`: per-dimension pairwise log density of
/// `(z_i^{t-1}, z_j^t)`, averaged over latent dimensions.
pub fn causal_scores(
    sample_prev: &LatentSample,
    sample_curr: &LatentSample,
    dist_prev: &LatentDistribution,
    dist_curr: &LatentDistribution,
    params: &DiffusionParams,
) -> Result<Tensor> {
    check_pair(dist_prev, dist_curr, params)?;
    let (n, dims) = (dist_prev.n_nodes(), dist_prev.dims());
    let (sp, sc) = (dist_prev.sigma(), dist_curr.sigma());
    let cov = params.effective();
    Ok(Tensor::from_fn(n, n, |i, j| {
        (0..dims)
            .map(|d| {
                edge_joint_logdensity(
                    sample_prev.z.get(i, d),
                    sample_curr.z.get(j, d),
                    dist_prev.mu.get(i, d),
                    dist_curr.mu.get(j, d),
                    sp.get(i, d),
                    sc.get(j, d),
                    cov.get(i, j),
                    params.guard,
                )
            })
            .sum::<f64>()
            / dims as f64
    }))
}

/// Conditional log density of `z_j^t = target` given `z_i^{t-1} = given`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_logdensity(
    target: f64,
    given: f64,
    mu_i: f64,
    mu_j: f64,
    sigma_i: f64,
    sigma_j: f64,
    cov: f64,
    guard: f64,
) -> f64 {
    let vi = sigma_i * sigma_i;
    let mean = mu_j + cov / vi * (given - mu_i);
    let var = sigma_j * sigma_j - cov * cov / vi + guard;
    let d = target - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

/// Transition-density graph for one step.
///
/// Entry `(i, j)` is the conditional density of the current posterior mean
/// of node `j` given `z_i^{t-1}` from `sample_prev`, averaged in log space over
/// latent dimensions and normalized per row as `exp(logdens - rowmax)`.
/// Masked pairs are zero and do not take part in the row maximum.
pub fn transition_graph(
    sample_prev: &LatentSample,
    dist_prev: &LatentDistribution,
    dist_curr: &LatentDistribution,
    params: &DiffusionParams,
) -> Result<Tensor> {
    check_pair(dist_prev, dist_curr, params)?;
    let (n, dims) = (dist_prev.n_nodes(), dist_prev.dims());
    let (sp, sc) = (dist_prev.sigma(), dist_curr.sigma());
    let cov = params.effective();
    let logd = Tensor::from_fn(n, n, |i, j| {
        (0..dims)
            .map(|d| {
                conditional_logdensity(
                    dist_curr.mu.get(j, d),
                    sample_prev.z.get(i, d),
                    dist_prev.mu.get(i, d),
                    dist_curr.mu.get(j, d),
                    sp.get(i, d),
                    sc.get(j, d),
                    cov.get(i, j),
                    params.guard,
                )
            })
            .sum::<f64>()
            / dims as f64
    });
    let allowed = |i: usize, j: usize| params.mask.as_ref().map_or(true, |m| m.get(i, j) > 0.0);
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row_max = (0..n)
            .filter(|&j| allowed(i, j))
            .map(|j| logd.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        for j in 0..n {
            if allowed(i, j) {
                out.set(i, j, (logd.get(i, j) - row_max).exp());
            }
        }
    }
    Ok(out)
}

fn check_pair(prev: &LatentDistribution, curr: &LatentDistribution, params: &DiffusionParams) -> Result<()> {
    if prev.mu.shape() != curr.mu.shape() || prev.n_nodes() != params.n_nodes() {
        return Err(Error::dim("decoder", prev.mu.shape(), curr.mu.shape()));
    }
    Ok(())
}

/// Min-max scaling of the off-diagonal entries into `[0, 1]`; the diagonal is
/// set to zero. A constant matrix maps to `0.5`.
pub fn minmax_scale_offdiag(m: &Tensor) -> Tensor {
    let n = m.rows();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(m.get(i, j));
                hi = hi.max(m.get(i, j));
            }
        }
    }
    Tensor::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if hi > lo {
            (m.get(i, j) - lo) / (hi - lo)
        } else {
            0.5
        }
    })
}

/// Per-step causal and transition graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraphSequence {
    /// Step index (into the source series) of each entry's current step.
    pub steps: Vec<usize>,
    pub causal: Vec<Tensor>,
    pub transition: Vec<Tensor>,
}

impl DynamicGraphSequence {
    /// Graphs for every consecutive pair of posteriors, using posterior means
    /// as latent values. Entry `k` describes the step `offset + k + 1`.
    pub fn from_posteriors(dists: &[LatentDistribution], params: &DiffusionParams, offset: usize) -> Result<Self> {
        let pairs: Vec<(Tensor, Tensor)> = {
            use rayon::prelude::*;
            (1..dists.len())
                .into_par_iter()
                .map(|t| {
                    let prev = dists[t - 1].mean_sample();
                    let curr = dists[t].mean_sample();
                    let c = causal_scores(&prev, &curr, &dists[t - 1], &dists[t], params)?;
                    let tr = transition_graph(&prev, &dists[t - 1], &dists[t], params)?;
                    Ok((c, tr))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let (causal, transition) = pairs.into_iter().unzip();
        Ok(Self {
            steps: (1..dists.len()).map(|t| offset + t).collect(),
            causal,
            transition,
        })
    }

    pub fn len(&self) -> usize {
        self.causal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.causal.is_empty()
    }

    /// Mean causal score matrix over the entries whose step lies in `range`.
    pub fn mean_causal(&self, range: std::ops::Range<usize>) -> Option<Tensor> {
        let picked: Vec<&Tensor> = self
            .steps
            .iter()
            .zip(&self.causal)
            .filter(|(s, _)| range.contains(s))
            .map(|(_, c)| c)
            .collect();
        let first = picked.first()?;
        let mut acc = Tensor::zeros(first.shape());
        for c in &picked {
            acc.add_assign(c);
        }
        acc.scale_assign(1.0 / picked.len() as f64);
        Some(acc)
    }

    pub fn transition_at(&self, step: usize) -> Option<&Tensor> {
        let k = step.checked_sub(*self.steps.first()?)?;
        self.transition.get(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_approximation_special_cases() {
        assert_eq!(trapezoid_covariance(&Tensor::eye(3)).unwrap(), Tensor::eye(3).map(|x| 4.0 * x));
        assert_eq!(
            trapezoid_covariance(&Tensor::zeros(&[2, 2])).unwrap(),
            Tensor::eye(2).map(|x| 2.0 * x)
        );
    }

    #[test]
    fn scalar_covariance_against_closed_form() {
        let a: f64 = 0.1;
        let approx = trapezoid_covariance(&Tensor::scalar(a.exp())).unwrap().item();
        let exact = (2.0 / a) * ((2.0 * a).exp() - 1.0);
        assert!((approx - 4.4428).abs() < 1e-4, "{approx}");
        assert!((exact - 4.4281).abs() < 1e-4, "{exact}");
        assert!((approx - exact).abs() < 0.02);
    }

    #[test]
    fn joint_density_peak() {
        let v = edge_joint_logdensity(0.3, -0.2, 0.3, -0.2, 1.0, 1.0, 0.0, 0.0);
        assert!((v + (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn independent_joint_splits() {
        let uni = |z: f64, m: f64, s: f64| -0.5 * (2.0 * PI * s * s).ln() - (z - m).powi(2) / (2.0 * s * s);
        let v = edge_joint_logdensity(0.7, -1.1, 0.2, 0.4, 1.3, 0.6, 0.0, 0.0);
        assert!((v - uni(0.7, 0.2, 1.3) - uni(-1.1, 0.4, 0.6)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_reduces_without_covariance() {
        let q = elbo_edge_quadratic(1.7, 0.4, 0.0, 0.9, -1.2, 0.0);
        assert!((q + (0.81 + 1.44) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_standard_normal(0.0, 1.0), 0.0);
        assert!((kl_standard_normal(1.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elbo_needs_two_steps() {
        let d = LatentDistribution {
            mu: Tensor::zeros(&[2, 1]),
            log_sigma: Tensor::zeros(&[2, 1]),
        };
        let s = d.mean_sample();
        let err = elbo_total(&[d], &[s], &DiffusionParams::new(2), 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn elbo_at_prior_is_constant() {
        let (n, dims, p) = (3, 2, 4);
        let d = LatentDistribution {
            mu: Tensor::zeros(&[n, dims]),
            log_sigma: Tensor::zeros(&[n, dims]),
        };
        let dists = vec![d.clone(); p];
        let samples = vec![d.mean_sample(); p];
        let loss = elbo_total(&dists, &samples, &DiffusionParams::new(n), 1e-3).unwrap();
        let per_edge = -LOG_2PI - 0.5 * (1.0 + GUARD).ln();
        let expected = -(((p - 1) * n * n * dims) as f64) * per_edge;
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn masked_transition_entries_are_zero() {
        let n = 3;
        let g = Graph::from_edges(n, &[(0, 1), (1, 2), (1, 1)]).unwrap();
        let mut params = DiffusionParams::new(n);
        params.sigma_cross = Tensor::full(&[n, n], 0.3);
        let params = params.with_mask(&g).unwrap();
        let d = LatentDistribution {
            mu: Tensor::from_fn(n, 2, |i, k| 0.1 * (i + k) as f64),
            log_sigma: Tensor::full(&[n, 2], 0.2),
        };
        let tr = transition_graph(&d.mean_sample(), &d, &d, &params).unwrap();
        for i in 0..n {
            for j in 0..n {
                if g.weight(i, j) == 0.0 {
                    assert_eq!(tr.get(i, j), 0.0);
                }
            }
        }
        assert_eq!(tr.get(0, 1), 1.0);
        assert_eq!(params.effective().get(2, 0), 0.0);
    }

    #[test]
    fn transition_rows_peak_at_one() {
        let n = 4;
        let mut params = DiffusionParams::new(n);
        params.sigma_cross = Tensor::from_fn(n, n, |i, j| 0.1 * (i as f64 - j as f64));
        let prev = LatentDistribution {
            mu: Tensor::from_fn(n, 3, |i, k| 0.2 * i as f64 - 0.1 * k as f64),
            log_sigma: Tensor::from_fn(n, 3, |i, k| 0.1 * (i + k) as f64),
        };
        let curr = LatentDistribution {
            mu: Tensor::from_fn(n, 3, |i, k| 0.05 * (i * k) as f64),
            log_sigma: Tensor::full(&[n, 3], 0.3),
        };
        let tr = transition_graph(&prev.mean_sample(), &prev, &curr, &params).unwrap();
        for i in 0..n {
            let row = tr.row(i);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert_eq!(row.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }

    #[test]
    fn minmax_offdiag() {
        let m = Tensor::from_rows(&[vec![9.0, 1.0, 3.0], vec![2.0, -5.0, 5.0], vec![4.0, 1.0, 0.0]]).unwrap();
        let s = minmax_scale_offdiag(&m);
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 2), 1.0);
        assert!((s.get(0, 2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn window_weights() {
        let w = SequenceWeights::window(4).unwrap();
        assert_eq!(w.kl, vec![1.0, 2.0, 2.0, 1.0]);
        assert_eq!(w.transitions, vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]);
        let mut acc = SequenceWeights::empty();
        acc.add_window(0, 3, 1.0).unwrap();
        acc.add_window(1, 3, 1.0).unwrap();
        assert_eq!(acc.kl, vec![1.0, 3.0, 3.0, 1.0]);
        assert_eq!(acc.transitions, vec![(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0)]);
    }
}
