//! The differentiable backbone: attributed event embedding, an LSTM over the
//! event sequence, and a sigmoid output on the last hidden state. Exposes
//! forward evaluation, summed cross-entropy loss, and the exact analytic
//! gradient with respect to the flat parameter vector.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`Layout`] of named
//! blocks:
//!
//! | block         | shape                    |
//! |---------------|--------------------------|
//! | `embed.type`  | `event_types x d`        |
//! | `embed.cat`   | `categorical_values x d` |
//! | `embed.num`   | `d x numeric_dims`       |
//! | `lstm.w_ih`   | `4h x d`                 |
//! | `lstm.w_hh`   | `4h x h`                 |
//! | `lstm.bias`   | `4h`                     |
//! | `out.weight`  | `h`                      |
//! | `out.bias`    | `1`                      |
//!
//! so the total parameter count is
//! `types·d + cats·d + d·dims + 4h·(d + h) + 4h + h + 1`. Gate order within
//! the `4h` axis is input, forget, cell, output.
//!
//! Everything here is a pure function of its inputs: identical inputs give
//! bitwise identical outputs, and callers may evaluate concurrently.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EpisodeSample, EventRecord, Vocabulary};
use crate::seed;

/// Probabilities are clamped to this range inside the loss (and only there),
/// so a confidently wrong prediction cannot produce an infinite loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what} index {got} outside vocabulary of {limit}")]
    VocabIndex {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("event carries {got} numeric values but the model accepts {limit}")]
    NumericWidth { got: usize, limit: usize },
    #[error("episode has no events")]
    EmptyEpisode,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("unknown parameter block '{0}'")]
    UnknownBlock(String),
    #[error("parameter layout mismatch")]
    LayoutMismatch,
    #[error("non-finite gradient in block {0}")]
    NonFiniteGradient(String),
}

/// Model dimensions and initialization scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub event_types: usize,
    pub categorical_values: usize,
    pub numeric_dims: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    /// Dimensions from a dataset vocabulary plus chosen widths.
    pub fn for_vocab(vocab: &Vocabulary, embed_dim: usize, hidden_dim: usize, init_scale: f64) -> Self {
        ModelConfig {
            event_types: vocab.event_types.len(),
            categorical_values: vocab.categorical_values.len(),
            numeric_dims: vocab.numeric_dims,
            embed_dim,
            hidden_dim,
            init_scale,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.event_types == 0 {
            return Err(ModelError::InvalidConfig(
                "at least one event type is required".into(),
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "embed and hidden dimensions must be at least 1".into(),
            ));
        }
        if !(self.init_scale > 0.0) {
            return Err(ModelError::InvalidConfig(
                "init scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form total parameter count (see the module table).
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.embed_dim, self.hidden_dim);
        self.event_types * d
            + self.categorical_values * d
            + d * self.numeric_dims
            + 4 * h * (d + h)
            + 4 * h
            + h
            + 1
    }

    /// Stable hash of every field; used to pair serialized parameters with
    /// the configuration that produced them.
    pub fn fingerprint(&self) -> u64 {
        let canon = format!(
            "types={} cats={} dims={} d={} h={} scale={}",
            self.event_types,
            self.categorical_values,
            self.numeric_dims,
            self.embed_dim,
            self.hidden_dim,
            self.init_scale
        );
        seed::derive_seed(0x6d6f64656c, &[&canon])
    }
}

/// A named, contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Maps block names to index ranges over a flat vector. Carries the model
/// config (when there is one) so operations can recover dimensions, and a
/// fingerprint so serialized vectors can be matched to their config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub total: usize,
    pub config: Option<ModelConfig>,
    pub fingerprint: u64,
}

pub const BLOCK_EMBED_TYPE: &str = "embed.type";
pub const BLOCK_EMBED_CAT: &str = "embed.cat";
pub const BLOCK_EMBED_NUM: &str = "embed.num";
pub const BLOCK_LSTM_W_IH: &str = "lstm.w_ih";
pub const BLOCK_LSTM_W_HH: &str = "lstm.w_hh";
pub const BLOCK_LSTM_BIAS: &str = "lstm.bias";
pub const BLOCK_OUT_WEIGHT: &str = "out.weight";
pub const BLOCK_OUT_BIAS: &str = "out.bias";

impl Layout {
    /// The backbone layout for a model configuration.
    pub fn of(config: &ModelConfig) -> Self {
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let sizes = [
            (BLOCK_EMBED_TYPE, config.event_types * d),
            (BLOCK_EMBED_CAT, config.categorical_values * d),
            (BLOCK_EMBED_NUM, d * config.numeric_dims),
            (BLOCK_LSTM_W_IH, 4 * h * d),
            (BLOCK_LSTM_W_HH, 4 * h * h),
            (BLOCK_LSTM_BIAS, 4 * h),
            (BLOCK_OUT_WEIGHT, h),
            (BLOCK_OUT_BIAS, 1),
        ];
        let mut blocks = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for (name, len) in sizes {
            blocks.push(Block {
                name: name.to_string(),
                start,
                len,
            });
            start += len;
        }
        Layout {
            blocks,
            total: start,
            config: Some(*config),
            fingerprint: config.fingerprint(),
        }
    }

    /// A single unstructured block, for objectives that are not the backbone
    /// (test losses, external parameter dumps).
    pub fn flat(len: usize) -> Self {
        Layout {
            blocks: vec![Block {
                name: "params".to_string(),
                start: 0,
                len,
            }],
            total: len,
            config: None,
            fingerprint: seed::derive_seed(0x666c6174, &[&len.to_string()]),
        }
    }

    pub fn range(&self, name: &str) -> Result<std::ops::Range<usize>, ModelError> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.start..b.start + b.len)
            .ok_or_else(|| ModelError::UnknownBlock(name.to_string()))
    }

    fn config(&self) -> Result<&ModelConfig, ModelError> {
        self.config.as_ref().ok_or(ModelError::InvalidConfig(
            "layout carries no model dimensions".into(),
        ))
    }
}

/// The flat, ordered parameter state of one model: a point in model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total];
        ParamVector { values, layout }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.total {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn block(&self, name: &str) -> Result<&[f64], ModelError> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// `self += c * other`. Panics on layout mismatch; callers in this crate
    /// construct both sides from the same layout.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        assert!(self.same_layout(other), "parameter layout mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert!(self.same_layout(other), "parameter layout mismatch");
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Name of the first block containing a non-finite entry, if any.
    pub fn first_nonfinite_block(&self) -> Option<&str> {
        for block in &self.layout.blocks {
            let slice = &self.values[block.start..block.start + block.len];
            if slice.iter().any(|v| !v.is_finite()) {
                return Some(&block.name);
            }
        }
        None
    }
}

/// Fresh parameters: every entry uniform in `[-scale, scale]`, then 1.0
/// added to the forget-gate bias so cell state flows at initialization.
/// Deterministic for a fixed `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed_value: u64) -> Result<ParamVector, ModelError> {
    config.validate()?;
    let layout = Layout::of(config);
    let mut rng = seed::rng_from(seed_value);
    let scale = config.init_scale;
    let mut values = Vec::with_capacity(layout.total);
    for _ in 0..layout.total {
        let u: f64 = rand::Rng::random::<f64>(&mut rng);
        values.push((2.0 * u - 1.0) * scale);
    }
    let mut params = ParamVector { values, layout };
    let h = config.hidden_dim;
    let bias = params.layout.range(BLOCK_LSTM_BIAS)?;
    for v in &mut params.values[bias.start + h..bias.start + 2 * h] {
        *v += 1.0;
    }
    Ok(params)
}

struct Dims {
    d: usize,
    h: usize,
    num: usize,
    types: usize,
    cats: usize,
}

fn dims(params: &ParamVector) -> Result<Dims, ModelError> {
    let c = params.layout.config()?;
    Ok(Dims {
        d: c.embed_dim,
        h: c.hidden_dim,
        num: c.numeric_dims,
        types: c.event_types,
        cats: c.categorical_values,
    })
}

/// Embeds one event: its type row, plus the rows of each categorical code,
/// plus a linear projection of the numeric values.
pub fn embed_event(params: &ParamVector, event: &EventRecord) -> Result<Vec<f64>, ModelError> {
    let dm = dims(params)?;
    let mut x = vec![0.0; dm.d];
    embed_into(params, &dm, event, &mut x)?;
    Ok(x)
}

fn embed_into(
    params: &ParamVector,
    dm: &Dims,
    event: &EventRecord,
    x: &mut [f64],
) -> Result<(), ModelError> {
    if event.event_type >= dm.types {
        return Err(ModelError::VocabIndex {
            what: "event type",
            got: event.event_type,
            limit: dm.types,
        });
    }
    if event.value_n.len() > dm.num {
        return Err(ModelError::NumericWidth {
            got: event.value_n.len(),
            limit: dm.num,
        });
    }
    let type_table = params.block(BLOCK_EMBED_TYPE)?;
    let cat_table = params.block(BLOCK_EMBED_CAT)?;
    let num_proj = params.block(BLOCK_EMBED_NUM)?;

    let row = &type_table[event.event_type * dm.d..(event.event_type + 1) * dm.d];
    x.copy_from_slice(row);

    for &c in &event.value_c {
        if c >= dm.cats {
            return Err(ModelError::VocabIndex {
                what: "categorical code",
                got: c,
                limit: dm.cats,
            });
        }
        let row = &cat_table[c * dm.d..(c + 1) * dm.d];
        for (xi, ri) in x.iter_mut().zip(row) {
            *xi += ri;
        }
    }

    for (j, xj) in x.iter_mut().enumerate() {
        let row = &num_proj[j * dm.num..(j + 1) * dm.num];
        for (k, &v) in event.value_n.iter().enumerate() {
            *xj += row[k] * v;
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-timestep values cached by the forward pass for backpropagation.
struct StepCache {
    x: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    h_prev: Vec<f64>,
}

struct ForwardCache {
    steps: Vec<StepCache>,
    h_last: Vec<f64>,
    p: f64,
}

fn forward_cached(params: &ParamVector, sample: &EpisodeSample) -> Result<ForwardCache, ModelError> {
    if sample.events.is_empty() {
        return Err(ModelError::EmptyEpisode);
    }
    let dm = dims(params)?;
    let (d, h) = (dm.d, dm.h);
    let w_ih = params.block(BLOCK_LSTM_W_IH)?;
    let w_hh = params.block(BLOCK_LSTM_W_HH)?;
    let bias = params.block(BLOCK_LSTM_BIAS)?;
    let w_out = params.block(BLOCK_OUT_WEIGHT)?;
    let b_out = params.block(BLOCK_OUT_BIAS)?[0];

    let mut h_state = vec![0.0; h];
    let mut c_state = vec![0.0; h];
    let mut steps = Vec::with_capacity(sample.events.len());

    for event in &sample.events {
        let mut x = vec![0.0; d];
        embed_into(params, &dm, event, &mut x)?;

        // Pre-activations: a = W_ih x + W_hh h_prev + bias.
        let mut a = bias.to_vec();
        for (g, ag) in a.iter_mut().enumerate() {
            let row = &w_ih[g * d..(g + 1) * d];
            for (xi, wi) in x.iter().zip(row) {
                *ag += wi * xi;
            }
            let row = &w_hh[g * h..(g + 1) * h];
            for (hi, wi) in h_state.iter().zip(row) {
                *ag += wi * hi;
            }
        }

        let mut gate_i = vec![0.0; h];
        let mut gate_f = vec![0.0; h];
        let mut gate_g = vec![0.0; h];
        let mut gate_o = vec![0.0; h];
        for j in 0..h {
            gate_i[j] = sigmoid(a[j]);
            gate_f[j] = sigmoid(a[h + j]);
            gate_g[j] = a[2 * h + j].tanh();
            gate_o[j] = sigmoid(a[3 * h + j]);
        }

        let c_prev = c_state.clone();
        let h_prev = h_state.clone();
        let mut tanh_c = vec![0.0; h];
        for j in 0..h {
            c_state[j] = gate_f[j] * c_prev[j] + gate_i[j] * gate_g[j];
            tanh_c[j] = c_state[j].tanh();
            h_state[j] = gate_o[j] * tanh_c[j];
        }

        steps.push(StepCache {
            x,
            gate_i,
            gate_f,
            gate_g,
            gate_o,
            c_prev,
            tanh_c,
            h_prev,
        });
    }

    let mut z = b_out;
    for (hj, wj) in h_state.iter().zip(w_out) {
        z += wj * hj;
    }
    Ok(ForwardCache {
        steps,
        h_last: h_state,
        p: sigmoid(z),
    })
}

/// Probability of the positive outcome for one episode, strictly in (0, 1).
pub fn forward(params: &ParamVector, sample: &EpisodeSample) -> Result<f64, ModelError> {
    Ok(forward_cached(params, sample)?.p)
}

fn cross_entropy(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Summed cross-entropy of the batch.
pub fn loss(params: &ParamVector, batch: &[&EpisodeSample]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    for sample in batch {
        total += cross_entropy(forward(params, sample)?, sample.label);
    }
    Ok(total)
}

/// Exact gradient of [`loss`] by backpropagation through time. Same layout
/// as `params`; errors if any accumulated entry is non-finite.
pub fn loss_grad(params: &ParamVector, batch: &[&EpisodeSample]) -> Result<ParamVector, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let dm = dims(params)?;
    let mut grad = ParamVector::zeros(params.layout.clone());
    for sample in batch {
        backprop_sample(params, &dm, sample, &mut grad)?;
    }
    if let Some(block) = grad.first_nonfinite_block() {
        return Err(ModelError::NonFiniteGradient(block.to_string()));
    }
    Ok(grad)
}

fn backprop_sample(
    params: &ParamVector,
    dm: &Dims,
    sample: &EpisodeSample,
    grad: &mut ParamVector,
) -> Result<(), ModelError> {
    let cache = forward_cached(params, sample)?;
    let (d, h) = (dm.d, dm.h);

    // d(loss)/dz for z the output pre-activation. The loss clamps the
    // probability, so the gradient is exactly zero in the clamped region;
    // elsewhere the sigmoid/cross-entropy pair reduces to p - y.
    let p = cache.p;
    let dz = if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        0.0
    } else if sample.label {
        p - 1.0
    } else {
        p
    };

    let w_ih = params.block(BLOCK_LSTM_W_IH)?.to_vec();
    let w_hh = params.block(BLOCK_LSTM_W_HH)?.to_vec();
    let w_out = params.block(BLOCK_OUT_WEIGHT)?.to_vec();

    let r_type = params.layout.range(BLOCK_EMBED_TYPE)?;
    let r_cat = params.layout.range(BLOCK_EMBED_CAT)?;
    let r_num = params.layout.range(BLOCK_EMBED_NUM)?;
    let r_w_ih = params.layout.range(BLOCK_LSTM_W_IH)?;
    let r_w_hh = params.layout.range(BLOCK_LSTM_W_HH)?;
    let r_bias = params.layout.range(BLOCK_LSTM_BIAS)?;
    let r_w_out = params.layout.range(BLOCK_OUT_WEIGHT)?;
    let r_b_out = params.layout.range(BLOCK_OUT_BIAS)?;

    // Output layer.
    {
        let gv = grad.values_mut();
        for j in 0..h {
            gv[r_w_out.start + j] += dz * cache.h_last[j];
        }
        gv[r_b_out.start] += dz;
    }

    let mut dh_next: Vec<f64> = w_out.iter().map(|w| dz * w).collect();
    let mut dc_next = vec![0.0; h];

    for (t, step) in cache.steps.iter().enumerate().rev() {
        let mut d_gates = vec![0.0; 4 * h];
        for j in 0..h {
            let dh = dh_next[j];
            let tanh_c = step.tanh_c[j];
            let dc = dh * step.gate_o[j] * (1.0 - tanh_c * tanh_c) + dc_next[j];

            let di = dc * step.gate_g[j] * step.gate_i[j] * (1.0 - step.gate_i[j]);
            let df = dc * step.c_prev[j] * step.gate_f[j] * (1.0 - step.gate_f[j]);
            let dg = dc * step.gate_i[j] * (1.0 - step.gate_g[j] * step.gate_g[j]);
            let do_ = dh * tanh_c * step.gate_o[j] * (1.0 - step.gate_o[j]);

            d_gates[j] = di;
            d_gates[h + j] = df;
            d_gates[2 * h + j] = dg;
            d_gates[3 * h + j] = do_;
            dc_next[j] = dc * step.gate_f[j];
        }

        let mut dx = vec![0.0; d];
        let mut dh_prev = vec![0.0; h];
        {
            let gv = grad.values_mut();
            for (g, &dg) in d_gates.iter().enumerate() {
                gv[r_bias.start + g] += dg;
                let w_ih_row = g * d;
                for (j, &xj) in step.x.iter().enumerate() {
                    gv[r_w_ih.start + w_ih_row + j] += dg * xj;
                    dx[j] += w_ih[w_ih_row + j] * dg;
                }
                let w_hh_row = g * h;
                for (j, &hj) in step.h_prev.iter().enumerate() {
                    gv[r_w_hh.start + w_hh_row + j] += dg * hj;
                    dh_prev[j] += w_hh[w_hh_row + j] * dg;
                }
            }
        }
        dh_next = dh_prev;

        // Embedding backward: the fused input is a sum, so dx flows to the
        // type row, every categorical row, and the numeric projection.
        let event = &sample.events[t];
        let gv = grad.values_mut();
        let type_row = r_type.start + event.event_type * d;
        for (j, &dxj) in dx.iter().enumerate() {
            gv[type_row + j] += dxj;
        }
        for &c in &event.value_c {
            let cat_row = r_cat.start + c * d;
            for (j, &dxj) in dx.iter().enumerate() {
                gv[cat_row + j] += dxj;
            }
        }
        for (j, &dxj) in dx.iter().enumerate() {
            let num_row = r_num.start + j * dm.num;
            for (k, &v) in event.value_n.iter().enumerate() {
                gv[num_row + k] += dxj * v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EpisodeSample;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            event_types: 2,
            categorical_values: 2,
            numeric_dims: 1,
            embed_dim: 2,
            hidden_dim: 4,
            init_scale: 0.1,
        }
    }

    fn event(t: usize, cats: &[usize], nums: &[f64], time: f64) -> EventRecord {
        EventRecord {
            event_type: t,
            value_c: cats.to_vec(),
            value_n: nums.to_vec(),
            time,
        }
    }

    fn random_episode(config: &ModelConfig, rng: &mut impl Rng, max_len: usize) -> EpisodeSample {
        let len = rng.random_range(1..=max_len);
        let mut time = 0.0;
        let events = (0..len)
            .map(|_| {
                time += rng.random::<f64>();
                let n_cats = rng.random_range(0..=2.min(config.categorical_values));
                event(
                    rng.random_range(0..config.event_types),
                    &(0..n_cats)
                        .map(|_| rng.random_range(0..config.categorical_values))
                        .collect::<Vec<_>>(),
                    &(0..config.numeric_dims)
                        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                        .collect::<Vec<_>>(),
                    time,
                )
            })
            .collect();
        EpisodeSample {
            events,
            label: rng.random::<f64>() < 0.5,
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let config = tiny_config();
        let a = init_params(&config, 3).unwrap();
        let b = init_params(&config, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&config, 4).unwrap());

        let mut bad = config;
        bad.init_scale = 0.0;
        let err = init_params(&bad, 3).unwrap_err().to_string();
        assert!(err.contains("init scale must be positive"), "{err}");
    }

    #[test]
    fn param_count_matches_hand_count() {
        // types=5, cats=3, dims=2, d=4, h=8:
        //   5*4 + 3*4 + 4*2 + 32*4 + 32*8 + 32 + 8 + 1 = 465
        let config = ModelConfig {
            event_types: 5,
            categorical_values: 3,
            numeric_dims: 2,
            embed_dim: 4,
            hidden_dim: 8,
            init_scale: 0.1,
        };
        assert_eq!(config.param_count(), 465);
        let params = init_params(&config, 0).unwrap();
        assert_eq!(params.len(), 465);
        let covered: usize = params.layout().blocks.iter().map(|b| b.len).sum();
        assert_eq!(covered, 465);
    }

    #[test]
    fn forget_gate_bias_is_offset() {
        let config = tiny_config();
        let params = init_params(&config, 9).unwrap();
        let bias = params.block(BLOCK_LSTM_BIAS).unwrap();
        let h = config.hidden_dim;
        for j in 0..h {
            assert!(bias[h + j] > 1.0 - config.init_scale - 1e-12);
            assert!(bias[j].abs() <= config.init_scale);
        }
    }

    #[test]
    fn embedding_reduces_to_type_row_without_attributes() {
        let config = tiny_config();
        let params = init_params(&config, 5).unwrap();
        let e = event(1, &[], &[], 0.0);
        let x = embed_event(&params, &e).unwrap();
        let d = config.embed_dim;
        let row = &params.block(BLOCK_EMBED_TYPE).unwrap()[d..2 * d];
        assert_eq!(x, row);
    }

    #[test]
    fn embedding_numeric_part_is_linear() {
        let config = tiny_config();
        let params = init_params(&config, 5).unwrap();
        let base = embed_event(&params, &event(0, &[1], &[0.0], 0.0)).unwrap();
        let one = embed_event(&params, &event(0, &[1], &[0.7], 0.0)).unwrap();
        let two = embed_event(&params, &event(0, &[1], &[1.4], 0.0)).unwrap();
        for j in 0..config.embed_dim {
            let delta1 = one[j] - base[j];
            let delta2 = two[j] - base[j];
            assert_abs_diff_eq!(delta2, 2.0 * delta1, epsilon = 1e-12);
        }
    }

    #[test]
    fn embedding_matches_hand_fusion_at_d2() {
        let config = ModelConfig {
            event_types: 2,
            categorical_values: 2,
            numeric_dims: 1,
            embed_dim: 2,
            hidden_dim: 1,
            init_scale: 0.1,
        };
        let mut params = ParamVector::zeros(Layout::of(&config));
        {
            let r = params.layout().range(BLOCK_EMBED_TYPE).unwrap();
            params.values_mut()[r.start..r.end].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
            let r = params.layout().range(BLOCK_EMBED_CAT).unwrap();
            params.values_mut()[r.start..r.end].copy_from_slice(&[0.05, -0.05, 0.5, 0.6]);
            let r = params.layout().range(BLOCK_EMBED_NUM).unwrap();
            params.values_mut()[r.start..r.end].copy_from_slice(&[2.0, -1.0]);
        }
        // type 1 row (0.3, 0.4) + cat 0 row (0.05, -0.05) + W_num * 0.5.
        let x = embed_event(&params, &event(1, &[0], &[0.5], 0.0)).unwrap();
        assert_abs_diff_eq!(x[0], 0.3 + 0.05 + 2.0 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.4 - 0.05 - 1.0 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let params = init_params(&tiny_config(), 5).unwrap();
        assert!(embed_event(&params, &event(7, &[], &[], 0.0)).is_err());
        assert!(embed_event(&params, &event(0, &[9], &[], 0.0)).is_err());
        assert!(embed_event(&params, &event(0, &[], &[1.0, 2.0], 0.0)).is_err());
    }

    #[test]
    fn forward_is_half_at_zero_params_and_stays_in_unit_interval() {
        let config = tiny_config();
        let zero = ParamVector::zeros(Layout::of(&config));
        let sample = EpisodeSample {
            events: vec![event(0, &[1], &[0.3], 0.0), event(1, &[], &[-0.4], 1.0)],
            label: true,
        };
        assert_abs_diff_eq!(forward(&zero, &sample).unwrap(), 0.5, epsilon = 1e-15);

        let mut rng = crate::seed::rng_from(77);
        let params = init_params(&config, 12).unwrap();
        for _ in 0..20 {
            let s = random_episode(&config, &mut rng, 6);
            let p = forward(&params, &s).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
        assert!(matches!(
            forward(&params, &EpisodeSample { events: vec![], label: false }),
            Err(ModelError::EmptyEpisode)
        ));
    }

    /// Straight-line scalar recurrence for a d=2, h=2 model, written against
    /// the cell equations directly rather than through the layout plumbing.
    fn scalar_oracle_forward(params: &ParamVector, xs: &[[f64; 2]]) -> f64 {
        let w_ih = params.block(BLOCK_LSTM_W_IH).unwrap();
        let w_hh = params.block(BLOCK_LSTM_W_HH).unwrap();
        let b = params.block(BLOCK_LSTM_BIAS).unwrap();
        let w_out = params.block(BLOCK_OUT_WEIGHT).unwrap();
        let b_out = params.block(BLOCK_OUT_BIAS).unwrap()[0];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());

        let (mut h0, mut h1, mut c0, mut c1) = (0.0, 0.0, 0.0, 0.0);
        for x in xs {
            let pre = |g: usize| {
                w_ih[g * 2] * x[0] + w_ih[g * 2 + 1] * x[1] + w_hh[g * 2] * h0 + w_hh[g * 2 + 1] * h1 + b[g]
            };
            let (i0, i1) = (sig(pre(0)), sig(pre(1)));
            let (f0, f1) = (sig(pre(2)), sig(pre(3)));
            let (g0, g1) = (pre(4).tanh(), pre(5).tanh());
            let (o0, o1) = (sig(pre(6)), sig(pre(7)));
            c0 = f0 * c0 + i0 * g0;
            c1 = f1 * c1 + i1 * g1;
            h0 = o0 * c0.tanh();
            h1 = o1 * c1.tanh();
        }
        sig(w_out[0] * h0 + w_out[1] * h1 + b_out)
    }

    #[test]
    fn forward_matches_scalar_recurrence_oracle() {
        let config = ModelConfig {
            event_types: 2,
            categorical_values: 0,
            numeric_dims: 0,
            embed_dim: 2,
            hidden_dim: 2,
            init_scale: 0.4,
        };
        let params = init_params(&config, 31).unwrap();
        let sample = EpisodeSample {
            events: vec![event(0, &[], &[], 0.0), event(1, &[], &[], 1.0)],
            label: true,
        };
        // The embedded inputs are exactly the type rows here.
        let table = params.block(BLOCK_EMBED_TYPE).unwrap();
        let xs = [[table[0], table[1]], [table[2], table[3]]];
        let expected = scalar_oracle_forward(&params, &xs);
        assert_abs_diff_eq!(forward(&params, &sample).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn loss_closed_forms() {
        let config = tiny_config();
        let zero = ParamVector::zeros(Layout::of(&config));
        let s = EpisodeSample {
            events: vec![event(0, &[], &[0.2], 0.0)],
            label: true,
        };
        // p = 0.5 at zero parameters.
        assert_abs_diff_eq!(
            loss(&zero, &[&s]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        let doubled = loss(&zero, &[&s, &s]).unwrap();
        assert_abs_diff_eq!(doubled, 2.0 * loss(&zero, &[&s]).unwrap(), epsilon = 1e-15);

        let params = init_params(&config, 8).unwrap();
        let mut rng = crate::seed::rng_from(5);
        let batch: Vec<EpisodeSample> =
            (0..3).map(|_| random_episode(&config, &mut rng, 4)).collect();
        let refs: Vec<&EpisodeSample> = batch.iter().collect();
        let expected: f64 = refs
            .iter()
            .map(|s| {
                let p = forward(&params, s).unwrap();
                if s.label {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        assert_abs_diff_eq!(loss(&params, &refs).unwrap(), expected, epsilon = 1e-12);
        assert!(matches!(loss(&params, &[]), Err(ModelError::EmptyBatch)));
    }

    /// Central finite differences of the loss, the independent gradient
    /// oracle used throughout.
    pub fn finite_difference_grad(
        params: &ParamVector,
        batch: &[&EpisodeSample],
        step: f64,
    ) -> Vec<f64> {
        let mut fd = Vec::with_capacity(params.len());
        let mut probe = params.clone();
        for i in 0..params.len() {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + step;
            let up = loss(&probe, batch).unwrap();
            probe.values_mut()[i] = orig - step;
            let down = loss(&probe, batch).unwrap();
            probe.values_mut()[i] = orig;
            fd.push((up - down) / (2.0 * step));
        }
        fd
    }

    pub fn max_relative_error(analytic: &[f64], oracle: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(oracle)
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let config = tiny_config();
        for seed_value in [1u64, 2, 3] {
            let params = init_params(&config, seed_value).unwrap();
            let mut rng = crate::seed::rng_from(seed_value + 100);
            let batch: Vec<EpisodeSample> =
                (0..4).map(|_| random_episode(&config, &mut rng, 5)).collect();
            let refs: Vec<&EpisodeSample> = batch.iter().collect();

            let analytic = loss_grad(&params, &refs).unwrap();
            let fd = finite_difference_grad(&params, &refs, 1e-4);
            let err = max_relative_error(analytic.values(), &fd);
            assert!(err < 1e-4, "seed {seed_value}: max relative error {err}");
        }
    }

    #[test]
    fn gradient_of_batch_is_sum_of_sample_gradients() {
        let config = tiny_config();
        let params = init_params(&config, 21).unwrap();
        let mut rng = crate::seed::rng_from(22);
        let s1 = random_episode(&config, &mut rng, 4);
        let s2 = random_episode(&config, &mut rng, 4);

        let joint = loss_grad(&params, &[&s1, &s2]).unwrap();
        let mut summed = loss_grad(&params, &[&s1]).unwrap();
        summed.axpy(1.0, &loss_grad(&params, &[&s2]).unwrap());
        for (a, b) in joint.values().iter().zip(summed.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn directional_derivative_consistency() {
        let config = tiny_config();
        let params = init_params(&config, 41).unwrap();
        let mut rng = crate::seed::rng_from(42);
        let batch: Vec<EpisodeSample> =
            (0..3).map(|_| random_episode(&config, &mut rng, 5)).collect();
        let refs: Vec<&EpisodeSample> = batch.iter().collect();
        let grad = loss_grad(&params, &refs).unwrap();

        for _ in 0..5 {
            let mut direction = ParamVector::zeros(params.layout().clone());
            for v in direction.values_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            let norm = direction.l2_norm();
            direction.scale(1.0 / norm);

            let eps = 1e-5;
            let mut up = params.clone();
            up.axpy(eps, &direction);
            let mut down = params.clone();
            down.axpy(-eps, &direction);
            let numeric =
                (loss(&up, &refs).unwrap() - loss(&down, &refs).unwrap()) / (2.0 * eps);
            let analytic = grad.dot(&direction);
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "directional derivative mismatch: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn descent_reaches_a_stationary_point() {
        // One episode with both labels forces the optimum to p = 1/2, an
        // interior stationary point reachable by plain gradient descent.
        let config = tiny_config();
        let mut params = init_params(&config, 60).unwrap();
        let episode = EpisodeSample {
            events: vec![event(0, &[1], &[0.4], 0.0), event(1, &[], &[-0.2], 0.5)],
            label: true,
        };
        let mut flipped = episode.clone();
        flipped.label = false;
        let batch = [&episode, &flipped];

        for _ in 0..2000 {
            let grad = loss_grad(&params, &batch).unwrap();
            if grad.l2_norm() < 1e-9 {
                break;
            }
            params.axpy(-0.5, &grad);
        }
        let grad = loss_grad(&params, &batch).unwrap();
        assert!(grad.l2_norm() < 1e-9, "gradient norm {}", grad.l2_norm());
        assert_abs_diff_eq!(forward(&params, &episode).unwrap(), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn purity_bitwise() {
        let config = tiny_config();
        let params = init_params(&config, 15).unwrap();
        let mut rng = crate::seed::rng_from(16);
        let sample = random_episode(&config, &mut rng, 5);
        let a = forward(&params, &sample).unwrap();
        let b = forward(&params, &sample).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        let g1 = loss_grad(&params, &[&sample]).unwrap();
        let g2 = loss_grad(&params, &[&sample]).unwrap();
        assert_eq!(g1, g2);
    }
}
