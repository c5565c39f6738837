//! Feedforward language-conditioned policies and their imitation trainer.
//!
//! A policy is two dense layers: `(observation ++ instruction) -> tanh hidden
//! -> action logits`, all in f64. The conditioned flag structurally zeroes
//! the instruction slice, which is how the vision-only branch is built.
//! Training is plain minibatch gradient descent on cross-entropy with exact
//! analytic gradients; everything is single-threaded and seed-deterministic,
//! so two runs with one config produce bit-identical parameters.
//!
//! Parameter files (`*.params`) are little-endian: the magic `CAGP`, a u32
//! version, a conditioned byte, four u32 dims (obs, instr, hidden, actions),
//! the u64 training seed, then `w1, b1, w2, b2` as f64, and a trailing
//! SHA-256 of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DemoDataset;
use crate::seeding::{rng_from, stream_seed};
use crate::sim::{ActionId, ObservationEncoding, CLASS_NAMES, NUM_ACTIONS};
use rand::Rng;

/// Instruction token vocabulary: the class names plus spatial, verb,
/// connective, and region tokens.
pub const VOCAB: [&str; 18] = [
    CLASS_NAMES[0],
    CLASS_NAMES[1],
    CLASS_NAMES[2],
    CLASS_NAMES[3],
    CLASS_NAMES[4],
    CLASS_NAMES[5],
    CLASS_NAMES[6],
    CLASS_NAMES[7],
    CLASS_NAMES[8],
    CLASS_NAMES[9],
    CLASS_NAMES[10],
    CLASS_NAMES[11],
    "left",
    "middle",
    "right",
    "place",
    "then",
    "tray",
];

/// Index of the dedicated null-instruction token.
pub const NULL_TOKEN_INDEX: usize = VOCAB.len();

/// Length of an instruction encoding: one slot per token plus the null slot.
pub const INSTR_ENCODING_LEN: usize = VOCAB.len() + 1;

pub fn token_index(token: &str) -> Option<usize> {
    VOCAB.iter().position(|t| *t == token)
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown instruction token {0:?}")]
    UnknownToken(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("parameter file checksum mismatch")]
    ChecksumMismatch,
    #[error("parameter file shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed parameter file: {0}")]
    MalformedParams(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Instruction encoding
// ---------------------------------------------------------------------------

/// Mean of one-hot token embeddings, with a dedicated null slot at the end.
/// Entries of a non-empty instruction sum to 1; the empty instruction is the
/// pure null-token vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEncoding {
    pub values: Vec<f64>,
}

impl InstructionEncoding {
    pub fn encode(tokens: &[String]) -> Result<Self, PolicyError> {
        if tokens.is_empty() {
            return Ok(Self::null());
        }
        let mut values = vec![0.0; INSTR_ENCODING_LEN];
        let weight = 1.0 / tokens.len() as f64;
        for token in tokens {
            let ix = token_index(token).ok_or_else(|| PolicyError::UnknownToken(token.clone()))?;
            values[ix] += weight;
        }
        Ok(InstructionEncoding { values })
    }

    /// The dropped-language representation: one-hot on the null token.
    pub fn null() -> Self {
        let mut values = vec![0.0; INSTR_ENCODING_LEN];
        values[NULL_TOKEN_INDEX] = 1.0;
        InstructionEncoding { values }
    }
}

// ---------------------------------------------------------------------------
// Parameters and forward pass
// ---------------------------------------------------------------------------

/// Weights of one policy branch.
///
/// `w1` is `(obs_dim + instr_dim) x hidden_dim` row-major by input index;
/// `w2` is `hidden_dim x action_dim` row-major by hidden index.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub obs_dim: usize,
    pub instr_dim: usize,
    pub hidden_dim: usize,
    pub action_dim: usize,
    pub conditioned: bool,
    pub seed: u64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PolicyParams {
    /// Random initialization. Observation rows draw uniformly within
    /// `1/sqrt(fan_in)`; instruction rows start at zero so the language
    /// pathway carries exactly what training puts there.
    pub fn init(obs_dim: usize, hidden_dim: usize, conditioned: bool, seed: u64) -> Self {
        let instr_dim = INSTR_ENCODING_LEN;
        let input_dim = obs_dim + instr_dim;
        let mut rng = rng_from(stream_seed(seed, "param-init", &[]));
        let scale1 = 1.0 / (input_dim as f64).sqrt();
        let mut w1 = vec![0.0; input_dim * hidden_dim];
        for row in 0..obs_dim {
            for j in 0..hidden_dim {
                w1[row * hidden_dim + j] = rng.random_range(-scale1..scale1);
            }
        }
        let scale2 = 1.0 / (hidden_dim as f64).sqrt();
        let mut w2 = vec![0.0; hidden_dim * NUM_ACTIONS];
        for v in w2.iter_mut() {
            *v = rng.random_range(-scale2..scale2);
        }
        PolicyParams {
            obs_dim,
            instr_dim,
            hidden_dim,
            action_dim: NUM_ACTIONS,
            conditioned,
            seed,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; NUM_ACTIONS],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.instr_dim
    }

    pub fn n_weights(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

fn check_dims(
    params: &PolicyParams,
    obs: &ObservationEncoding,
    instr: &InstructionEncoding,
) -> Result<(), PolicyError> {
    if obs.len != params.obs_dim {
        return Err(PolicyError::DimensionMismatch {
            what: "observation",
            expected: params.obs_dim,
            got: obs.len,
        });
    }
    if instr.values.len() != params.instr_dim {
        return Err(PolicyError::DimensionMismatch {
            what: "instruction",
            expected: params.instr_dim,
            got: instr.values.len(),
        });
    }
    Ok(())
}

fn hidden_pre(params: &PolicyParams, obs: &ObservationEncoding, instr: &InstructionEncoding) -> Vec<f64> {
    let h = params.hidden_dim;
    let mut pre = params.b1.clone();
    for &(ix, v) in &obs.nz {
        let row = &params.w1[ix as usize * h..(ix as usize + 1) * h];
        for j in 0..h {
            pre[j] += v * row[j];
        }
    }
    if params.conditioned {
        for (k, &v) in instr.values.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &params.w1[(params.obs_dim + k) * h..(params.obs_dim + k + 1) * h];
            for j in 0..h {
                pre[j] += v * row[j];
            }
        }
    }
    pre
}

fn forward_parts(
    params: &PolicyParams,
    obs: &ObservationEncoding,
    instr: &InstructionEncoding,
) -> (Vec<f64>, Vec<f64>) {
    let pre = hidden_pre(params, obs, instr);
    let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
    let mut logits = params.b2.clone();
    for (j, &hj) in hidden.iter().enumerate() {
        let row = &params.w2[j * params.action_dim..(j + 1) * params.action_dim];
        for (a, logit) in logits.iter_mut().enumerate() {
            *logit += hj * row[a];
        }
    }
    (hidden, logits)
}

/// Action logits for one (observation, instruction) pair. Deterministic, and
/// exactly instruction-independent when the policy is unconditioned.
pub fn forward_logits(
    params: &PolicyParams,
    obs: &ObservationEncoding,
    instr: &InstructionEncoding,
) -> Result<Vec<f64>, PolicyError> {
    check_dims(params, obs, instr)?;
    Ok(forward_parts(params, obs, instr).1)
}

// ---------------------------------------------------------------------------
// Loss and gradient
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub obs: &'a ObservationEncoding,
    pub instr: &'a InstructionEncoding,
    pub action: ActionId,
}

/// Gradients with the same shapes as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn log_softmax_stable(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logsum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - logsum).collect()
}

/// Mean cross-entropy of the demonstrated actions and its exact gradient.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &[BatchItem],
) -> Result<(f64, PolicyGrads), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let h = params.hidden_dim;
    let a_dim = params.action_dim;
    let mut grads = PolicyGrads {
        w1: vec![0.0; params.w1.len()],
        b1: vec![0.0; params.b1.len()],
        w2: vec![0.0; params.w2.len()],
        b2: vec![0.0; params.b2.len()],
    };
    let mut loss_sum = 0.0;
    for item in batch {
        check_dims(params, item.obs, item.instr)?;
        let (hidden, logits) = forward_parts(params, item.obs, item.instr);
        let logp = log_softmax_stable(&logits);
        loss_sum += -logp[item.action.index()];

        // dL/dlogits = softmax - onehot(action), for the per-sample loss.
        let mut dlogits: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
        dlogits[item.action.index()] -= 1.0;
        for (a, g) in grads.b2.iter_mut().enumerate() {
            *g += dlogits[a];
        }

        let mut dpre = vec![0.0; h];
        for (j, &hj) in hidden.iter().enumerate() {
            let w2_row = &params.w2[j * a_dim..(j + 1) * a_dim];
            let g2_row = &mut grads.w2[j * a_dim..(j + 1) * a_dim];
            let mut dh = 0.0;
            for a in 0..a_dim {
                g2_row[a] += hj * dlogits[a];
                dh += w2_row[a] * dlogits[a];
            }
            dpre[j] = dh * (1.0 - hj * hj);
            grads.b1[j] += dpre[j];
        }
        for &(ix, v) in &item.obs.nz {
            let row = &mut grads.w1[ix as usize * h..(ix as usize + 1) * h];
            for j in 0..h {
                row[j] += v * dpre[j];
            }
        }
        if params.conditioned {
            for (k, &v) in item.instr.values.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let row = &mut grads.w1[(params.obs_dim + k) * h..(params.obs_dim + k + 1) * h];
                for j in 0..h {
                    row[j] += v * dpre[j];
                }
            }
        }
    }
    let n = batch.len() as f64;
    let loss = loss_sum / n;
    if !loss.is_finite() {
        return Err(PolicyError::NonFiniteLoss);
    }
    for g in grads
        .w1
        .iter_mut()
        .chain(grads.b1.iter_mut())
        .chain(grads.w2.iter_mut())
        .chain(grads.b2.iter_mut())
    {
        *g /= n;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub language_dropout_prob: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 40,
            batch_size: 64,
            language_dropout_prob: 0.0,
            seed: 11,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(PolicyError::MalformedParams(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.language_dropout_prob) {
            return Err(PolicyError::MalformedParams(
                "language_dropout_prob must lie in [0, 1]".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(PolicyError::MalformedParams(
                "epochs, batch_size, and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch gradient descent over every (observation, action) pair in the
/// dataset. When language dropout fires on a sample presentation, its
/// instruction is replaced by the null-token vector, the same representation
/// the training-free branch uses at inference.
pub fn train(
    ds: &DemoDataset,
    cfg: &TrainConfig,
    conditioned: bool,
) -> Result<TrainOutcome, PolicyError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let instr_encodings: Vec<InstructionEncoding> = ds
        .demonstrations
        .iter()
        .map(|d| InstructionEncoding::encode(&d.instruction))
        .collect::<Result<_, _>>()?;
    let null_instr = InstructionEncoding::null();
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (di, demo) in ds.demonstrations.iter().enumerate() {
        for si in 0..demo.steps.len() {
            samples.push((di, si));
        }
    }
    let obs_dim = ds.demonstrations[0].steps[0].obs.len;
    let mut params = PolicyParams::init(obs_dim, cfg.hidden, conditioned, cfg.seed);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, stream_seed(cfg.seed, "shuffle", &[epoch as u64]));
        let mut dropout_rng = rng_from(stream_seed(cfg.seed, "dropout", &[epoch as u64]));
        let mut epoch_loss_sum = 0.0;
        let mut epoch_samples = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&s| {
                    let (di, si) = samples[s];
                    let dropped = cfg.language_dropout_prob > 0.0
                        && dropout_rng.random::<f64>() < cfg.language_dropout_prob;
                    BatchItem {
                        obs: &ds.demonstrations[di].steps[si].obs,
                        instr: if dropped {
                            &null_instr
                        } else {
                            &instr_encodings[di]
                        },
                        action: ds.demonstrations[di].steps[si].action,
                    }
                })
                .collect();
            let (loss, grads) = loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(PolicyError::Divergence { epoch });
            }
            epoch_loss_sum += loss * batch.len() as f64;
            epoch_samples += batch.len();
            apply_sgd(&mut params, &grads, cfg.learning_rate);
        }
        let epoch_loss = epoch_loss_sum / epoch_samples as f64;
        if !epoch_loss.is_finite() {
            return Err(PolicyError::Divergence { epoch });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

fn apply_sgd(params: &mut PolicyParams, grads: &PolicyGrads, lr: f64) {
    for (w, g) in params.w1.iter_mut().zip(&grads.w1) {
        *w -= lr * g;
    }
    for (w, g) in params.b1.iter_mut().zip(&grads.b1) {
        *w -= lr * g;
    }
    for (w, g) in params.w2.iter_mut().zip(&grads.w2) {
        *w -= lr * g;
    }
    for (w, g) in params.b2.iter_mut().zip(&grads.b2) {
        *w -= lr * g;
    }
}

/// Fisher-Yates with its own stream, so epoch order is stable across runs.
fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = rng_from(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Fraction of dataset steps whose argmax action matches the demonstration.
pub fn action_accuracy(params: &PolicyParams, ds: &DemoDataset) -> Result<f64, PolicyError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for demo in &ds.demonstrations {
        let instr = InstructionEncoding::encode(&demo.instruction)?;
        for step in &demo.steps {
            let logits = forward_logits(params, &step.obs, &instr)?;
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(ix, _)| ix)
                .expect("non-empty logits");
            if argmax == step.action.index() {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Parameter persistence
// ---------------------------------------------------------------------------

const PARAMS_MAGIC: &[u8; 4] = b"CAGP";
const PARAMS_VERSION: u32 = 1;

pub fn save_params(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(33 + 8 * params.n_weights());
    bytes.extend_from_slice(PARAMS_MAGIC);
    bytes.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    bytes.push(u8::from(params.conditioned));
    for dim in [
        params.obs_dim,
        params.instr_dim,
        params.hidden_dim,
        params.action_dim,
    ] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&params.seed.to_le_bytes());
    for value in params
        .w1
        .iter()
        .chain(&params.b1)
        .chain(&params.w2)
        .chain(&params.b2)
    {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams, PolicyError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    const HEADER: usize = 4 + 4 + 1 + 4 * 4 + 8;
    if bytes.len() < HEADER + 32 {
        return Err(PolicyError::MalformedParams("file too short".into()));
    }
    if &bytes[0..4] != PARAMS_MAGIC {
        return Err(PolicyError::MalformedParams("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PARAMS_VERSION {
        return Err(PolicyError::MalformedParams(format!(
            "unsupported version {version}"
        )));
    }
    let conditioned = match bytes[8] {
        0 => false,
        1 => true,
        other => {
            return Err(PolicyError::MalformedParams(format!(
                "bad conditioned flag {other}"
            )))
        }
    };
    let dim_at = |ix: usize| -> usize {
        u32::from_le_bytes(bytes[9 + 4 * ix..13 + 4 * ix].try_into().unwrap()) as usize
    };
    let (obs_dim, instr_dim, hidden_dim, action_dim) = (dim_at(0), dim_at(1), dim_at(2), dim_at(3));
    let seed = u64::from_le_bytes(bytes[25..33].try_into().unwrap());
    let n_weights = (obs_dim + instr_dim) * hidden_dim
        + hidden_dim
        + hidden_dim * action_dim
        + action_dim;
    let expected = HEADER + 8 * n_weights + 32;
    if bytes.len() != expected {
        return Err(PolicyError::ShapeMismatch(format!(
            "header dims imply {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload_end = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..payload_end]);
    if digest.as_slice() != &bytes[payload_end..] {
        return Err(PolicyError::ChecksumMismatch);
    }
    let mut values = bytes[HEADER..payload_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Result<Vec<f64>, PolicyError> {
        let out: Vec<f64> = values.by_ref().take(n).collect();
        if out.len() != n || out.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::MalformedParams(
                "weight payload truncated or non-finite".into(),
            ));
        }
        Ok(out)
    };
    let w1 = take((obs_dim + instr_dim) * hidden_dim)?;
    let b1 = take(hidden_dim)?;
    let w2 = take(hidden_dim * action_dim)?;
    let b2 = take(action_dim)?;
    Ok(PolicyParams {
        obs_dim,
        instr_dim,
        hidden_dim,
        action_dim,
        conditioned,
        seed,
        w1,
        b1,
        w2,
        b2,
    })
}

// ---------------------------------------------------------------------------
// Joint likelihood table (oracle support)
// ---------------------------------------------------------------------------

/// Explicit joint `P(a, l | o)` over the discrete action set and a finite
/// instruction set. Only used to drive the brute-force guidance oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTable {
    /// `joint[a][l]`, non-negative, summing to 1 over all entries.
    pub joint: Vec<Vec<f64>>,
}

impl LikelihoodTable {
    pub fn new(joint: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if joint.is_empty() || joint[0].is_empty() {
            return Err(PolicyError::MalformedParams("empty joint table".into()));
        }
        let cols = joint[0].len();
        let mut total = 0.0;
        for row in &joint {
            if row.len() != cols {
                return Err(PolicyError::MalformedParams("ragged joint table".into()));
            }
            for &v in row {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(PolicyError::MalformedParams(
                        "joint table entries must be non-negative".into(),
                    ));
                }
                total += v;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(PolicyError::MalformedParams(format!(
                "joint table sums to {total}, expected 1"
            )));
        }
        Ok(LikelihoodTable { joint })
    }

    /// Random strictly-positive table; handy for oracle cross-checks.
    pub fn random(rng: &mut impl Rng, n_actions: usize, n_instructions: usize) -> Self {
        let mut joint = vec![vec![0.0; n_instructions]; n_actions];
        let mut total = 0.0;
        for row in joint.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(0.05..1.0);
                total += *v;
            }
        }
        for row in joint.iter_mut() {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        LikelihoodTable { joint }
    }

    pub fn n_actions(&self) -> usize {
        self.joint.len()
    }

    pub fn n_instructions(&self) -> usize {
        self.joint[0].len()
    }

    /// Vision-only prior `P(a | o)`.
    pub fn prior(&self) -> Vec<f64> {
        self.joint
            .iter()
            .map(|row| row.iter().sum::<f64>())
            .collect()
    }

    /// Marginal instruction probability `P(l | o)`.
    pub fn instruction_marginal(&self, instruction: usize) -> f64 {
        self.joint.iter().map(|row| row[instruction]).sum()
    }

    /// Posterior `P(a | o, l)`; `None` when the instruction has zero mass.
    pub fn conditional(&self, instruction: usize) -> Option<Vec<f64>> {
        let z = self.instruction_marginal(instruction);
        if z <= 0.0 {
            return None;
        }
        Some(self.joint.iter().map(|row| row[instruction] / z).collect())
    }

    /// Likelihood `P(l | a, o)` per action; `None` when some action has zero
    /// prior mass.
    pub fn likelihood(&self, instruction: usize) -> Option<Vec<f64>> {
        let prior = self.prior();
        if prior.iter().any(|&p| p <= 0.0) {
            return None;
        }
        Some(
            self.joint
                .iter()
                .zip(&prior)
                .map(|(row, p)| row[instruction] / p)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect_demos;
    use crate::suites::{make_suite, BiasProfile, SuiteKind};

    fn tiny_params(seed: u64, conditioned: bool) -> PolicyParams {
        // A full-size instruction slot count would dwarf the toy obs dim.
        let mut p = PolicyParams::init(6, 5, conditioned, seed);
        let mut rng = rng_from(stream_seed(seed, "tiny-extra", &[]));
        for v in p.w1.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in p.b1.iter_mut().chain(p.b2.iter_mut()) {
            *v = rng.random_range(-0.1..0.1);
        }
        p
    }

    fn random_obs(rng: &mut impl Rng, len: usize) -> ObservationEncoding {
        let dense: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        ObservationEncoding::from_dense(&dense)
    }

    fn random_instr(rng: &mut impl Rng) -> InstructionEncoding {
        let values: Vec<f64> = (0..INSTR_ENCODING_LEN)
            .map(|_| rng.random_range(0.0..0.5))
            .collect();
        InstructionEncoding { values }
    }

    #[test]
    fn instruction_encoding_sums_to_one() {
        let enc = InstructionEncoding::encode(&[
            "place".to_string(),
            "mug".to_string(),
            "left".to_string(),
        ])
        .unwrap();
        assert!((enc.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(enc.values.len(), INSTR_ENCODING_LEN);
        assert_eq!(enc.values[NULL_TOKEN_INDEX], 0.0);
        let null = InstructionEncoding::encode(&[]).unwrap();
        assert_eq!(null, InstructionEncoding::null());
        assert!(InstructionEncoding::encode(&["spoon".to_string()]).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut p = PolicyParams::init(6, 5, true, 0);
        p.w1.iter_mut().for_each(|v| *v = 0.0);
        p.w2.iter_mut().for_each(|v| *v = 0.0);
        let obs = ObservationEncoding::from_dense(&[1.0, 0.0, 0.5, 0.0, 0.0, 2.0]);
        let logits = forward_logits(&p, &obs, &InstructionEncoding::null()).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        let batch = [BatchItem {
            obs: &obs,
            instr: &InstructionEncoding::null(),
            action: ActionId::Up,
        }];
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unconditioned_forward_ignores_instruction() {
        let p = tiny_params(3, false);
        let mut rng = rng_from(4);
        let obs = random_obs(&mut rng, 6);
        let a = forward_logits(&p, &obs, &random_instr(&mut rng)).unwrap();
        let b = forward_logits(&p, &obs, &random_instr(&mut rng)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = tiny_params(3, true);
        let obs = ObservationEncoding::zeros(7);
        let err = forward_logits(&p, &obs, &InstructionEncoding::null()).unwrap_err();
        assert!(matches!(err, PolicyError::DimensionMismatch { .. }));
    }

    #[test]
    fn instruction_perturbation_bounded_by_operator_norm() {
        let p = tiny_params(5, true);
        let mut rng = rng_from(6);
        let obs = random_obs(&mut rng, 6);
        let instr = random_instr(&mut rng);
        let base = forward_logits(&p, &obs, &instr).unwrap();
        let eps = 1e-3;
        for k in 0..INSTR_ENCODING_LEN {
            let mut bumped = instr.clone();
            bumped.values[k] += eps;
            let out = forward_logits(&p, &obs, &bumped).unwrap();
            let delta: f64 = out
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let row = &p.w1[(p.obs_dim + k) * p.hidden_dim..(p.obs_dim + k + 1) * p.hidden_dim];
            let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let w2_norm = p.w2.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(delta <= w2_norm * row_norm * eps + 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from(42);
        for rep in 0..10 {
            let mut p = tiny_params(rep, rep % 2 == 0);
            let obs: Vec<ObservationEncoding> = (0..3).map(|_| random_obs(&mut rng, 6)).collect();
            let instr: Vec<InstructionEncoding> = (0..3).map(|_| random_instr(&mut rng)).collect();
            let batch: Vec<BatchItem> = (0..3)
                .map(|i| BatchItem {
                    obs: &obs[i],
                    instr: &instr[i],
                    action: ActionId::from_index(rng.random_range(0..NUM_ACTIONS)).unwrap(),
                })
                .collect();
            let (_, grads) = loss_and_grad(&p, &batch).unwrap();
            let eps = 1e-5;
            let n_w1 = p.w1.len();
            let n_b1 = p.b1.len();
            let n_w2 = p.w2.len();
            let flat_len = p.n_weights();
            for probe in 0..flat_len {
                let read = |p: &PolicyParams, ix: usize| -> f64 {
                    if ix < n_w1 {
                        p.w1[ix]
                    } else if ix < n_w1 + n_b1 {
                        p.b1[ix - n_w1]
                    } else if ix < n_w1 + n_b1 + n_w2 {
                        p.w2[ix - n_w1 - n_b1]
                    } else {
                        p.b2[ix - n_w1 - n_b1 - n_w2]
                    }
                };
                let write = |p: &mut PolicyParams, ix: usize, v: f64| {
                    if ix < n_w1 {
                        p.w1[ix] = v;
                    } else if ix < n_w1 + n_b1 {
                        p.b1[ix - n_w1] = v;
                    } else if ix < n_w1 + n_b1 + n_w2 {
                        p.w2[ix - n_w1 - n_b1] = v;
                    } else {
                        p.b2[ix - n_w1 - n_b1 - n_w2] = v;
                    }
                };
                let orig = read(&p, probe);
                write(&mut p, probe, orig + eps);
                let (lp, _) = loss_and_grad(&p, &batch).unwrap();
                write(&mut p, probe, orig - eps);
                let (lm, _) = loss_and_grad(&p, &batch).unwrap();
                write(&mut p, probe, orig);
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = read_grad(&grads, probe, n_w1, n_b1, n_w2);
                let rel =
                    (numeric - analytic).abs() / f64::max(1e-4, numeric.abs() + analytic.abs());
                assert!(
                    rel <= 1e-4,
                    "rep {rep} param {probe}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    fn read_grad(g: &PolicyGrads, ix: usize, n_w1: usize, n_b1: usize, n_w2: usize) -> f64 {
        if ix < n_w1 {
            g.w1[ix]
        } else if ix < n_w1 + n_b1 {
            g.b1[ix - n_w1]
        } else if ix < n_w1 + n_b1 + n_w2 {
            g.w2[ix - n_w1 - n_b1]
        } else {
            g.b2[ix - n_w1 - n_b1 - n_w2]
        }
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grad_unchanged() {
        let p = tiny_params(8, true);
        let mut rng = rng_from(12);
        let obs = random_obs(&mut rng, 6);
        let instr = random_instr(&mut rng);
        let item = BatchItem {
            obs: &obs,
            instr: &instr,
            action: ActionId::Grasp,
        };
        let (l1, g1) = loss_and_grad(&p, &[item.clone()]).unwrap();
        let (l2, g2) = loss_and_grad(&p, &[item.clone(), item]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    fn small_dataset() -> DemoDataset {
        let sets = make_suite(SuiteKind::Object, 1, 0).unwrap();
        let profile = BiasProfile {
            demos_in_domain: 20,
            demos_under_observed: 1,
            demos_ood: 0,
        };
        collect_demos(&sets, &profile, 3).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&ds, &cfg, true).unwrap();
        let b = train(&ds, &cfg, true).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.epoch_losses.len(), 3);
    }

    #[test]
    fn training_loss_decreases() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg, true).unwrap();
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
    }

    #[test]
    fn full_dropout_makes_outputs_instruction_independent() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 2,
            language_dropout_prob: 1.0,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg, true).unwrap();
        let obs = &ds.demonstrations[0].steps[0].obs;
        let a = InstructionEncoding::encode(&["place".into(), "mug".into()]).unwrap();
        let b = InstructionEncoding::encode(&["place".into(), "ball".into()]).unwrap();
        assert_eq!(
            forward_logits(&out.params, obs, &a).unwrap(),
            forward_logits(&out.params, obs, &b).unwrap()
        );
    }

    #[test]
    fn params_round_trip_bitwise() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cond.params");
        save_params(&out.params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(out.params, back);
    }

    #[test]
    fn corrupted_params_are_detected() {
        let p = tiny_params(1, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.params");
        save_params(&p, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Flip one payload byte: checksum mismatch.
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xFF;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(PolicyError::ChecksumMismatch)
        ));

        // Edit a header dim: shape mismatch against the payload length.
        let mut resized = bytes.clone();
        resized[17] = resized[17].wrapping_add(1); // hidden dim low byte
        std::fs::write(&path, &resized).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(PolicyError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn likelihood_table_marginals() {
        let table = LikelihoodTable::new(vec![vec![0.2, 0.1], vec![0.3, 0.4]]).unwrap();
        let prior = table.prior();
        assert!((prior[0] - 0.3).abs() < 1e-12);
        assert!((prior[1] - 0.7).abs() < 1e-12);
        let cond = table.conditional(1).unwrap();
        assert!((cond[0] - 0.2).abs() < 1e-12);
        assert!((cond[1] - 0.8).abs() < 1e-12);
        assert!(LikelihoodTable::new(vec![vec![0.5, 0.4]]).is_err());
    }
}
