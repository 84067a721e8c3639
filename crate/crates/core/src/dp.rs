//! Privacy-aware SGD: per-sample gradient clipping, calibrated noise
//! injection and budget accounting around the MPS training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EncodedRecord;
use crate::mps::{GradientSet, MpsError, MpsModel};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("privacy budget exhausted before the first update")]
    BudgetExhausted,
    #[error("training data is empty")]
    EmptyData,
    #[error(transparent)]
    Mps(#[from] MpsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    Gaussian,
    Laplacian,
}

impl Default for Mechanism {
    fn default() -> Self {
        Mechanism::None
    }
}

/// Per-sample l2 clipping threshold; `None` disables clipping.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ClipConfig {
    pub threshold: Option<f64>,
}

impl ClipConfig {
    pub fn enabled(&self) -> bool {
        self.threshold.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default)]
    pub mechanism: Mechanism,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_accountant_constant")]
    pub accountant_constant: f64,
    /// Fixed noise level instead of calibrating from the budget. With an
    /// override the accountant can refuse updates the budget cannot pay for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_override: Option<f64>,
}

fn default_epsilon() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1e-5
}
fn default_accountant_constant() -> f64 {
    1.0
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mechanism: Mechanism::None,
            epsilon: default_epsilon(),
            delta: default_delta(),
            accountant_constant: default_accountant_constant(),
            sigma_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_batches: usize,
    pub descent_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch decay on the learning rate; 1.0 keeps it
    /// constant. Annealing damps the late-training oscillation of
    /// stochastic sweep updates.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub seed: u64,
}

fn default_lr_decay() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_batches: 10,
            descent_steps: 10,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-2,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

/// Budget ledger for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountantState {
    pub mechanism: Mechanism,
    /// Gaussian: noise multiplier (std = sigma * sensitivity).
    /// Laplacian: the per-update scale parameter b.
    pub sigma: f64,
    pub sampling_ratio: f64,
    pub steps_taken: usize,
    pub planned_steps: usize,
    pub epsilon_budget: f64,
    pub delta: f64,
    pub accountant_constant: f64,
    pub sensitivity: f64,
}

impl AccountantState {
    fn spent_at(&self, steps: usize) -> f64 {
        match self.mechanism {
            Mechanism::None => 0.0,
            Mechanism::Gaussian => {
                if self.sigma == 0.0 {
                    return if steps == 0 { 0.0 } else { f64::INFINITY };
                }
                self.accountant_constant
                    * self.sampling_ratio
                    * (steps as f64 * (1.0 / self.delta).ln()).sqrt()
                    / self.sigma
            }
            Mechanism::Laplacian => {
                if self.sigma == 0.0 {
                    return if steps == 0 { 0.0 } else { f64::INFINITY };
                }
                // Basic additive composition of per-update epsilons.
                steps as f64 * self.sensitivity / self.sigma
            }
        }
    }
}

/// Cumulative epsilon spent after the steps actually taken.
pub fn epsilon_spent(acc: &AccountantState) -> f64 {
    acc.spent_at(acc.steps_taken)
}

/// Scale a gradient set to l2 norm at most `threshold`, preserving
/// direction. Zero gradients pass through unchanged.
pub fn clip_gradient(g: &GradientSet, threshold: f64) -> GradientSet {
    let norm = g.norm();
    let mut out = g.clone();
    if norm > threshold {
        out.scale_in_place(threshold / norm);
    }
    out
}

/// Gaussian noise multiplier: the minimal sigma satisfying
/// sigma >= c * q * sqrt(T * ln(1/delta)) / epsilon.
pub fn calibrate_gaussian(
    epsilon: f64,
    delta: f64,
    sampling_ratio: f64,
    steps: usize,
    accountant_constant: f64,
) -> Result<f64, DpError> {
    if epsilon <= 0.0 || sampling_ratio <= 0.0 || steps == 0 || accountant_constant <= 0.0 {
        return Err(DpError::InvalidConfig(
            "gaussian calibration requires positive epsilon, q, T and c".into(),
        ));
    }
    if delta <= 0.0 || delta >= 1.0 {
        return Err(DpError::InvalidConfig("delta must lie in (0, 1)".into()));
    }
    Ok(accountant_constant * sampling_ratio * (steps as f64 * (1.0 / delta).ln()).sqrt() / epsilon)
}

/// Laplace scale for one update: sigma = sensitivity / epsilon.
pub fn calibrate_laplace(sensitivity: f64, epsilon: f64) -> Result<f64, DpError> {
    if sensitivity <= 0.0 || epsilon <= 0.0 {
        return Err(DpError::InvalidConfig(
            "laplace calibration requires positive sensitivity and epsilon".into(),
        ));
    }
    Ok(sensitivity / epsilon)
}

fn sample_laplace<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn inject_noise_rng<R: Rng>(
    g: &mut GradientSet,
    mechanism: Mechanism,
    sigma: f64,
    rng: &mut R,
) {
    if sigma == 0.0 || mechanism == Mechanism::None {
        return;
    }
    match mechanism {
        Mechanism::None => {}
        Mechanism::Gaussian => {
            let dist = Normal::new(0.0, sigma).unwrap();
            for core in &mut g.cores {
                for v in core.data_mut() {
                    *v += dist.sample(rng);
                }
            }
        }
        Mechanism::Laplacian => {
            for core in &mut g.cores {
                for v in core.data_mut() {
                    *v += sample_laplace(rng, sigma);
                }
            }
        }
    }
}

/// Add i.i.d. per-component noise to a gradient set. Gaussian uses
/// standard deviation `sigma`, Laplacian uses scale `sigma`. A zero
/// sigma is the identity.
pub fn inject_noise(g: &GradientSet, mechanism: Mechanism, sigma: f64, seed: u64) -> GradientSet {
    let mut out = g.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inject_noise_rng(&mut out, mechanism, sigma, &mut rng);
    out
}

/// One machine-readable line per update in the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub epoch: usize,
    pub batch_nll: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
    pub sigma: f64,
    pub spent_epsilon: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: MpsModel,
    pub accountant: AccountantState,
    pub trace: Vec<UpdateRecord>,
}

// Slack for comparing spent epsilon against the budget; the inversion
// identity at the final step is only float-exact.
const BUDGET_SLACK: f64 = 1e-9;

// Trust-region cap on the applied update, relative to the unit-norm
// center tensor. The NLL landscape has 1/psi poles: a single low
// amplitude record can blow up the batch gradient by orders of
// magnitude, and an uncapped step then collapses the model onto that
// record. Capping the step norm (after averaging and any noise, so it
// is pure post-processing for the privacy analysis) keeps every update
// a bounded move regardless of outliers.
const MAX_STEP_NORM: f64 = 0.03;

/// Mini-batch sweep SGD with optional per-sample clipping and noise
/// injection.
///
/// Per epoch the data is shuffled and cut into `num_batches` batches of
/// `batch_size`; `descent_steps` of them receive one update each. Each
/// update touches a single core: the canonical center zig-zags along the
/// chain (0, 1, ..., n-1, n-2, ..., 1, 0, ...) and only the center
/// tensor moves, which keeps the update well conditioned and confines
/// the injected noise to one core. With a noise mechanism the clipped
/// gradient sum is perturbed before averaging, the accountant advances
/// once per update, and training halts before any update that would
/// overrun the epsilon budget.
pub fn train(
    model: &MpsModel,
    data: &[EncodedRecord],
    tc: &TrainConfig,
    clip: &ClipConfig,
    noise: &NoiseConfig,
) -> Result<TrainResult, DpError> {
    if data.is_empty() {
        return Err(DpError::EmptyData);
    }
    if tc.num_batches == 0 || tc.descent_steps == 0 || tc.epochs == 0 || tc.batch_size == 0 {
        return Err(DpError::InvalidConfig(
            "num_batches, descent_steps, epochs and batch_size must be positive".into(),
        ));
    }
    if tc.descent_steps > tc.num_batches {
        return Err(DpError::InvalidConfig(
            "descent_steps must not exceed num_batches".into(),
        ));
    }
    if tc.learning_rate <= 0.0 {
        return Err(DpError::InvalidConfig("learning_rate must be positive".into()));
    }
    if tc.lr_decay <= 0.0 || tc.lr_decay > 1.0 {
        return Err(DpError::InvalidConfig("lr_decay must lie in (0, 1]".into()));
    }
    if noise.mechanism != Mechanism::None && !clip.enabled() {
        return Err(DpError::InvalidConfig(
            "noise injection requires clipping: sensitivity is unbounded otherwise".into(),
        ));
    }

    let sensitivity = clip.threshold.unwrap_or(0.0);
    let sampling_ratio = (tc.batch_size as f64 / data.len() as f64).min(1.0);
    let planned_steps = tc.epochs * tc.descent_steps;
    let sigma = match (noise.mechanism, noise.sigma_override) {
        (Mechanism::None, _) => 0.0,
        (_, Some(sigma)) if sigma > 0.0 => sigma,
        (_, Some(_)) => {
            return Err(DpError::InvalidConfig("sigma override must be positive".into()))
        }
        (Mechanism::Gaussian, None) => calibrate_gaussian(
            noise.epsilon,
            noise.delta,
            sampling_ratio,
            planned_steps,
            noise.accountant_constant,
        )?,
        (Mechanism::Laplacian, None) => {
            // Additive composition: each update gets budget / planned_steps.
            calibrate_laplace(sensitivity, noise.epsilon / planned_steps as f64)?
        }
    };
    let mut accountant = AccountantState {
        mechanism: noise.mechanism,
        sigma,
        sampling_ratio,
        steps_taken: 0,
        planned_steps,
        epsilon_budget: noise.epsilon,
        delta: noise.delta,
        accountant_constant: noise.accountant_constant,
        sensitivity,
    };
    let budget_allows = |acc: &AccountantState, steps: usize| {
        acc.mechanism == Mechanism::None
            || acc.spent_at(steps) <= acc.epsilon_budget * (1.0 + BUDGET_SLACK)
    };
    if !budget_allows(&accountant, 1) {
        return Err(DpError::BudgetExhausted);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut current = model.canonicalize(0)?;
    current.normalize_center();
    let mut trace = Vec::new();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut update = 0usize;
    let n_cores = current.cores().len();
    let sweep_period = if n_cores > 1 { 2 * n_cores - 2 } else { 1 };

    'epochs: for epoch in 0..tc.epochs {
        let epoch_rate = tc.learning_rate * tc.lr_decay.powi(epoch as i32);
        indices.shuffle(&mut rng);
        let batches: Vec<Vec<EncodedRecord>> = indices
            .chunks(tc.batch_size)
            .take(tc.num_batches)
            .map(|chunk| chunk.iter().map(|&i| data[i].clone()).collect())
            .collect();
        for batch in batches.iter().take(tc.descent_steps) {
            if !budget_allows(&accountant, accountant.steps_taken + 1) {
                break 'epochs;
            }
            let phase = update % sweep_period;
            let site = if phase < n_cores { phase } else { sweep_period - phase };
            current.shift_center(site)?;

            let (grad, pre_norms) = current.site_gradient_sum(batch, clip.threshold)?;
            let pre_mean = pre_norms.iter().sum::<f64>() / pre_norms.len() as f64;
            let post_mean = match clip.threshold {
                Some(c) => pre_norms.iter().map(|&n| n.min(c)).sum::<f64>() / pre_norms.len() as f64,
                None => pre_mean,
            };
            // Noise std is sigma * C for Gaussian; Laplace's sigma already
            // carries the sensitivity.
            let noise_scale = match noise.mechanism {
                Mechanism::Gaussian => sigma * sensitivity,
                _ => sigma,
            };
            let mut sum = GradientSet { cores: vec![grad] };
            inject_noise_rng(&mut sum, noise.mechanism, noise_scale, &mut rng);
            sum.scale_in_place(1.0 / tc.batch_size as f64);

            let step_norm = epoch_rate * sum.norm();
            let rate = if step_norm > MAX_STEP_NORM {
                epoch_rate * MAX_STEP_NORM / step_norm
            } else {
                epoch_rate
            };

            let batch_nll = batch_nll(&current, batch)?;
            current.apply_site_gradient(&sum.cores[0], rate)?;
            accountant.steps_taken += 1;
            trace.push(UpdateRecord {
                update,
                epoch,
                batch_nll,
                grad_norm_pre_clip: pre_mean,
                grad_norm_post_clip: post_mean,
                sigma: noise_scale,
                spent_epsilon: epsilon_spent(&accountant),
            });
            update += 1;
        }
    }

    Ok(TrainResult {
        model: current,
        accountant,
        trace,
    })
}

fn batch_nll(model: &MpsModel, batch: &[EncodedRecord]) -> Result<f64, DpError> {
    let ln_z = model.partition().ln();
    let mut total = 0.0;
    for x in batch {
        let psi = model.amplitude(x)?;
        if psi == 0.0 {
            return Err(DpError::Mps(MpsError::ZeroAmplitude));
        }
        total += -(2.0 * psi.abs().ln() - ln_z);
    }
    Ok(total / batch.len() as f64)
}
