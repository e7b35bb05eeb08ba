//! Self-attentive knowledge tracing.
//!
//! Queries are exercise embeddings of the *next* problem, keys and values are
//! embeddings of past interactions. Positional embeddings are shared by both
//! streams. Each block is post-norm: attention, dropout, residual, layer norm,
//! then a ReLU feed-forward with its own residual and layer norm. Later blocks
//! take the previous block's output as queries and keep attending over the
//! interaction stream.

mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{keyed_rng, Parameter, Tensor};
use crate::seqgen::{self, EncodedSequence, ProblemRegistry, DEFAULT_V_CAP};

pub use forward::{AttentionMaps, DropoutKey};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaktConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub v_cap: usize,
    pub ffn_hidden: usize,
}

impl Default for SaktConfig {
    fn default() -> Self {
        SaktConfig {
            d_model: 128,
            num_heads: 8,
            num_blocks: 2,
            max_seq_len: 30,
            dropout_rate: 0.2,
            v_cap: DEFAULT_V_CAP,
            ffn_hidden: 128,
        }
    }
}

impl SaktConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len {} must be at least 2", self.max_seq_len));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0,1)", self.dropout_rate));
        }
        if self.v_cap < 2 || self.v_cap > (u32::MAX / 2) as usize {
            return bad(format!("v_cap {} out of range", self.v_cap));
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Positions per training instance (`L - 1`).
    pub fn positions(&self) -> usize {
        self.max_seq_len - 1
    }

    pub fn interaction_rows(&self) -> usize {
        2 * self.v_cap + 1
    }

    /// Exercise rows: pad (0), registered problems, OOV (`v_cap`).
    pub fn exercise_rows(&self) -> usize {
        self.v_cap + 1
    }

    /// Named parameter shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.ffn_hidden;
        let mut shapes = vec![
            ("interaction_table".to_string(), vec![self.interaction_rows(), d]),
            ("exercise_table".to_string(), vec![self.exercise_rows(), d]),
            ("position_table".to_string(), vec![self.positions(), d]),
        ];
        for b in 0..self.num_blocks {
            for (name, shape) in [
                ("w_query", vec![d, d]),
                ("w_key", vec![d, d]),
                ("w_value", vec![d, d]),
                ("w_out", vec![d, d]),
                ("ln1_gain", vec![d]),
                ("ln1_bias", vec![d]),
                ("w_ff1", vec![d, f]),
                ("b_ff1", vec![f]),
                ("w_ff2", vec![f, d]),
                ("b_ff2", vec![d]),
                ("ln2_gain", vec![d]),
                ("ln2_bias", vec![d]),
            ] {
                shapes.push((format!("blocks.{b}.{name}"), shape));
            }
        }
        shapes.push(("head.w".to_string(), vec![d, 1]));
        shapes.push(("head.b".to_string(), vec![1]));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub w_query: Parameter,
    pub w_key: Parameter,
    pub w_value: Parameter,
    pub w_out: Parameter,
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub w_ff1: Parameter,
    pub b_ff1: Parameter,
    pub w_ff2: Parameter,
    pub b_ff2: Parameter,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
}

impl Block {
    fn params(&self) -> [&Parameter; 12] {
        [
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.w_out,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 12] {
        [
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaktModel {
    pub config: SaktConfig,
    pub interaction_table: Parameter,
    pub exercise_table: Parameter,
    pub position_table: Parameter,
    pub blocks: Vec<Block>,
    pub head_w: Parameter,
    pub head_b: Parameter,
}

impl SaktModel {
    /// Uniform(±1/√fan_in) weights, zero biases, unit layer-norm gains, zero pad rows.
    pub fn init(config: &SaktConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng(seed, &[0x1417]);
        let mut make = |name: &str, shape: &[usize]| -> Parameter {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let value = if leaf.starts_with("ln") && leaf.ends_with("gain") {
                Tensor::filled(shape, 1.0)
            } else if leaf.starts_with('b') || leaf.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = if name.ends_with("_table") { shape[1] } else { shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(shape, data).expect("shape/length agree")
            };
            Parameter::new(value)
        };
        let mut built: Vec<Parameter> = config
            .parameter_shapes()
            .iter()
            .map(|(name, shape)| make(name, shape))
            .collect();
        for pad_table in &mut built[..2] {
            pad_table.value.row_mut(0).fill(0.0);
        }
        let mut it = built.into_iter();
        let mut next = || it.next().expect("parameter list matches shapes");
        let interaction_table = next();
        let exercise_table = next();
        let position_table = next();
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                w_query: next(),
                w_key: next(),
                w_value: next(),
                w_out: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                w_ff1: next(),
                b_ff1: next(),
                w_ff2: next(),
                b_ff2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        Ok(SaktModel {
            config: config.clone(),
            interaction_table,
            exercise_table,
            position_table,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Parameters in canonical order, paired with their names.
    pub fn params(&self) -> Vec<(String, &Parameter)> {
        let names = self.config.parameter_shapes().into_iter().map(|(n, _)| n);
        let mut refs: Vec<&Parameter> = vec![
            &self.interaction_table,
            &self.exercise_table,
            &self.position_table,
        ];
        for b in &self.blocks {
            refs.extend(b.params());
        }
        refs.push(&self.head_w);
        refs.push(&self.head_b);
        names.zip(refs).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let names = self.config.parameter_shapes().into_iter().map(|(n, _)| n);
        let mut refs: Vec<&mut Parameter> = vec![
            &mut self.interaction_table,
            &mut self.exercise_table,
            &mut self.position_table,
        ];
        for b in &mut self.blocks {
            refs.extend(b.params_mut());
        }
        refs.push(&mut self.head_w);
        refs.push(&mut self.head_b);
        names.zip(refs).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn reset_velocity(&mut self) {
        for (_, p) in self.params_mut() {
            p.velocity.fill(0.0);
        }
    }
}

/// Result of [`predict_next`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub probability: f64,
    pub query_oov: bool,
    pub history_oov: usize,
    /// History entries dropped because they fell outside the attention window.
    pub truncated: usize,
}

/// P(correct on `next_problem` | `history`), keeping the most recent `L-1` interactions.
pub fn predict_next(
    model: &SaktModel,
    registry: &ProblemRegistry,
    history: &[(&str, u8)],
    next_problem: &str,
) -> Result<Prediction> {
    if history.is_empty() {
        return Err(Error::Parameter(
            "prediction needs at least one past interaction".into(),
        ));
    }
    if registry.v_cap() != model.config.v_cap {
        return Err(Error::Parameter(format!(
            "registry stride {} does not match model stride {}",
            registry.v_cap(),
            model.config.v_cap
        )));
    }
    if let Some(&(_, r)) = history.iter().find(|(_, r)| *r > 1) {
        return Err(Error::Parameter(format!("non-binary response {r}")));
    }
    let window = model.config.positions();
    let truncated = history.len().saturating_sub(window);
    let recent = &history[truncated..];
    let seq_len = model.config.max_seq_len;
    let mut exercises = vec![0u32; seq_len];
    let mut responses = vec![0u8; seq_len];
    let mut history_oov = 0;
    for (i, (problem, r)) in recent.iter().enumerate() {
        let (idx, oov) = registry.encode(problem);
        history_oov += usize::from(oov);
        exercises[i] = idx;
        responses[i] = *r;
    }
    let (query, query_oov) = registry.encode(next_problem);
    exercises[recent.len()] = query;
    let seq = EncodedSequence {
        user_id: String::new(),
        exercises,
        responses,
        valid_len: recent.len() + 1,
        oov_count: history_oov + usize::from(query_oov),
    };
    let inst = seqgen::make_instances(&seq, model.config.v_cap);
    let probs = model.forward(std::slice::from_ref(&inst), None)?;
    Ok(Prediction {
        probability: probs.get(0, recent.len() - 1),
        query_oov,
        history_oov,
        truncated,
    })
}
