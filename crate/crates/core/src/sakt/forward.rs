use rand_chacha::ChaCha8Rng;

use super::{Block, SaktModel, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::numcore::ops::{self, gemm, gemm_nt, gemm_tn, LayerNormCache};
use crate::numcore::{keyed_rng, Tensor};
use crate::seqgen::TrainingInstance;

/// Addresses the dropout stream of one optimizer step; each sequence in the
/// batch draws from its own sub-stream so results do not depend on evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

impl DropoutKey {
    fn rng_for(&self, sequence: usize) -> ChaCha8Rng {
        keyed_rng(self.seed, &[0xd60, self.step, sequence as u64])
    }
}

/// Attention probabilities per block, per head (`n x n` each).
pub type AttentionMaps = Vec<Vec<Tensor>>;

struct BlockCache {
    x_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<Tensor>,
    concat: Tensor,
    drop_attn: Option<Vec<f64>>,
    ln1: LayerNormCache,
    h1: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
    drop_ff: Option<Vec<f64>>,
    ln2: LayerNormCache,
}

struct SeqCache {
    hist: Vec<usize>,
    query: Vec<usize>,
    memory: Tensor,
    blocks: Vec<BlockCache>,
    out: Tensor,
    probs: Vec<f64>,
}

fn take_cols(t: &Tensor, start: usize, width: usize) -> Tensor {
    let mut out = Vec::with_capacity(t.rows() * width);
    for i in 0..t.rows() {
        out.extend_from_slice(&t.row(i)[start..start + width]);
    }
    Tensor::from_vec(&[t.rows(), width], out).expect("column slice")
}

fn put_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    let w = src.cols();
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[rows, cols], data).expect("matrix dims")
}

fn add(mut a: Tensor, b: &Tensor) -> Tensor {
    a.add_assign(b).expect("same shape");
    a
}

impl SaktModel {
    fn check_instance(&self, inst: &TrainingInstance) -> Result<()> {
        let n = inst.len();
        if n > self.config.positions()
            || inst.query_exercises.len() != n
            || inst.history_tokens.len() != n
            || inst.valid_mask.len() != n
        {
            return Err(Error::Shape(format!(
                "instance of length {n} for a model with {} positions",
                self.config.positions()
            )));
        }
        let hist_rows = self.config.interaction_rows();
        let ex_rows = self.config.exercise_rows();
        for (&h, &q) in inst.history_tokens.iter().zip(&inst.query_exercises) {
            if h as usize >= hist_rows {
                return Err(Error::Index {
                    index: h as usize,
                    rows: hist_rows,
                });
            }
            if q as usize >= ex_rows {
                return Err(Error::Index {
                    index: q as usize,
                    rows: ex_rows,
                });
            }
        }
        Ok(())
    }

    fn block_forward(
        &self,
        block: &Block,
        x: &Tensor,
        memory: &Tensor,
        mask: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, BlockCache)> {
        let n = x.rows();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = ops::matmul(x, &block.w_query.value)?;
        let k = ops::matmul(memory, &block.w_key.value)?;
        let v = ops::matmul(memory, &block.w_value.value)?;
        let mut concat = Tensor::zeros(&[n, d]);
        let mut attn = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = take_cols(&q, h * dh, dh);
            let kh = take_cols(&k, h * dh, dh);
            let vh = take_cols(&v, h * dh, dh);
            let mut scores = gemm_nt(qh.data(), kh.data(), n, dh, n);
            scores.iter_mut().for_each(|s| *s *= scale);
            let a = ops::masked_softmax_rows_lenient(&mat(n, n, scores), mask)?;
            let ch = mat(n, dh, gemm(a.data(), vh.data(), n, n, dh));
            put_cols(&mut concat, &ch, h * dh);
            attn.push(a);
        }
        let training = rng.is_some();
        let mut dummy = keyed_rng(0, &[]);
        let rng = rng.unwrap_or(&mut dummy);
        let projected = ops::matmul(&concat, &block.w_out.value)?;
        let (dropped, drop_attn) =
            ops::dropout(&projected, self.config.dropout_rate, rng, training)?;
        let (h1, ln1) = ops::layer_norm(
            &add(dropped, x),
            &block.ln1_gain.value,
            &block.ln1_bias.value,
            LAYER_NORM_EPS,
        )?;
        let mut ff_pre = ops::matmul(&h1, &block.w_ff1.value)?;
        ops::add_row_bias(&mut ff_pre, &block.b_ff1.value);
        let ff_act = ops::relu(&ff_pre);
        let mut ff_out = ops::matmul(&ff_act, &block.w_ff2.value)?;
        ops::add_row_bias(&mut ff_out, &block.b_ff2.value);
        let (ff_dropped, drop_ff) =
            ops::dropout(&ff_out, self.config.dropout_rate, rng, training)?;
        let (out, ln2) = ops::layer_norm(
            &add(ff_dropped, &h1),
            &block.ln2_gain.value,
            &block.ln2_bias.value,
            LAYER_NORM_EPS,
        )?;
        Ok((
            out,
            BlockCache {
                x_in: x.clone(),
                q,
                k,
                v,
                attn,
                concat,
                drop_attn,
                ln1,
                h1,
                ff_pre,
                ff_act,
                drop_ff,
                ln2,
            },
        ))
    }

    fn forward_sequence(
        &self,
        inst: &TrainingInstance,
        mut rng: Option<ChaCha8Rng>,
    ) -> Result<SeqCache> {
        self.check_instance(inst)?;
        let n = inst.len();
        let hist: Vec<usize> = inst.history_tokens.iter().map(|&t| t as usize).collect();
        let query: Vec<usize> = inst.query_exercises.iter().map(|&e| e as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let pos = ops::embedding_lookup(&self.position_table.value, &positions)?;
        let memory = add(ops::embedding_lookup(&self.interaction_table.value, &hist)?, &pos);
        let mut x = add(ops::embedding_lookup(&self.exercise_table.value, &query)?, &pos);

        // query i sees history 0..=i, skipping pad tokens
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                mask[i * n + j] = hist[j] != 0;
            }
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = self.block_forward(block, &x, &memory, &mask, rng.as_mut())?;
            blocks.push(cache);
            x = out;
        }
        let logits = ops::matmul(&x, &self.head_w.value)?;
        let b = self.head_b.value.data()[0];
        let probs = logits
            .data()
            .iter()
            .map(|z| ops::sigmoid_scalar(z + b))
            .collect();
        Ok(SeqCache {
            hist,
            query,
            memory,
            blocks,
            out: x,
            probs,
        })
    }

    /// Returns `dX` and accumulates into `d_memory` and the block's parameter grads.
    fn block_backward(
        &self,
        block: &mut BlockGrads,
        params: &Block,
        cache: &BlockCache,
        memory: &Tensor,
        d_out: &Tensor,
        d_memory: &mut Tensor,
    ) -> Result<Tensor> {
        let n = d_out.rows();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (d_r2, dg2, db2) = ops::layer_norm_backward(&cache.ln2, &params.ln2_gain.value, d_out)?;
        block.acc(10, &dg2);
        block.acc(11, &db2);
        let d_ff_out = ops::dropout_backward(&d_r2, cache.drop_ff.as_deref());
        block.acc(9, &ops::sum_rows(&d_ff_out));
        let (d_ff_act, d_w2) = ops::matmul_backward(&cache.ff_act, &params.w_ff2.value, &d_ff_out)?;
        block.acc(8, &d_w2);
        let d_ff_pre = ops::relu_backward(&cache.ff_pre, &d_ff_act)?;
        block.acc(7, &ops::sum_rows(&d_ff_pre));
        let (d_h1_ff, d_w1) = ops::matmul_backward(&cache.h1, &params.w_ff1.value, &d_ff_pre)?;
        block.acc(6, &d_w1);
        let d_h1 = add(d_r2, &d_h1_ff);

        let (d_r1, dg1, db1) = ops::layer_norm_backward(&cache.ln1, &params.ln1_gain.value, &d_h1)?;
        block.acc(4, &dg1);
        block.acc(5, &db1);
        let d_proj = ops::dropout_backward(&d_r1, cache.drop_attn.as_deref());
        let (d_concat, d_wo) = ops::matmul_backward(&cache.concat, &params.w_out.value, &d_proj)?;
        block.acc(3, &d_wo);

        let d = self.config.d_model;
        let mut dq = Tensor::zeros(&[n, d]);
        let mut dk = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        for (h, a) in cache.attn.iter().enumerate() {
            let qh = take_cols(&cache.q, h * dh, dh);
            let kh = take_cols(&cache.k, h * dh, dh);
            let vh = take_cols(&cache.v, h * dh, dh);
            let dch = take_cols(&d_concat, h * dh, dh);
            let da = mat(n, n, gemm_nt(dch.data(), vh.data(), n, dh, n));
            let dvh = mat(n, dh, gemm_tn(a.data(), dch.data(), n, n, dh));
            let mut ds = ops::masked_softmax_rows_backward(a, &da)?;
            ds.data_mut().iter_mut().for_each(|g| *g *= scale);
            let dqh = mat(n, dh, gemm(ds.data(), kh.data(), n, n, dh));
            let dkh = mat(n, dh, gemm_tn(ds.data(), qh.data(), n, n, dh));
            put_cols(&mut dq, &dqh, h * dh);
            put_cols(&mut dk, &dkh, h * dh);
            put_cols(&mut dv, &dvh, h * dh);
        }
        let (dx_q, d_wq) = ops::matmul_backward(&cache.x_in, &params.w_query.value, &dq)?;
        let (dm_k, d_wk) = ops::matmul_backward(memory, &params.w_key.value, &dk)?;
        let (dm_v, d_wv) = ops::matmul_backward(memory, &params.w_value.value, &dv)?;
        block.acc(0, &d_wq);
        block.acc(1, &d_wk);
        block.acc(2, &d_wv);
        d_memory.add_assign(&dm_k)?;
        d_memory.add_assign(&dm_v)?;
        Ok(add(d_r1, &dx_q))
    }

    /// Backpropagates `d_logits` through one cached sequence into the model's grads.
    fn backward_sequence(
        &mut self,
        cache: &SeqCache,
        d_logits: &[f64],
        block_grads: &mut [BlockGrads],
    ) -> Result<()> {
        let n = cache.out.rows();
        let d = self.config.d_model;
        let dl = mat(n, 1, d_logits.to_vec());
        let (mut dx, d_head_w) = ops::matmul_backward(&cache.out, &self.head_w.value, &dl)?;
        self.head_w.grad.add_assign(&d_head_w)?;
        self.head_b.grad.data_mut()[0] += d_logits.iter().sum::<f64>();

        let mut d_memory = Tensor::zeros(&[n, d]);
        for b in (0..self.blocks.len()).rev() {
            dx = self.block_backward(
                &mut block_grads[b],
                &self.blocks[b],
                &cache.blocks[b],
                &cache.memory,
                &dx,
                &mut d_memory,
            )?;
        }
        let positions: Vec<usize> = (0..n).collect();
        ops::embedding_backward(&mut self.exercise_table.grad, &cache.query, &dx)?;
        ops::embedding_backward(&mut self.interaction_table.grad, &cache.hist, &d_memory)?;
        ops::embedding_backward(&mut self.position_table.grad, &positions, &add(dx, &d_memory))?;
        Ok(())
    }

    /// Probabilities for every position of every instance (`batch x n`).
    ///
    /// `dropout` switches on training mode; `None` is inference.
    pub fn forward(&self, batch: &[TrainingInstance], dropout: Option<DropoutKey>) -> Result<Tensor> {
        let n = batch.first().map_or(0, TrainingInstance::len);
        let mut data = Vec::with_capacity(batch.len() * n);
        for (i, inst) in batch.iter().enumerate() {
            if inst.len() != n {
                return Err(Error::Shape("ragged batch".into()));
            }
            let cache = self.forward_sequence(inst, dropout.map(|k| k.rng_for(i)))?;
            data.extend(cache.probs);
        }
        Tensor::from_vec(&[batch.len(), n], data)
    }

    /// Mean masked BCE over the batch; overwrites every parameter's `grad`.
    ///
    /// Pad-row gradients of both embedding tables are zeroed afterwards.
    pub fn loss(&mut self, batch: &[TrainingInstance], dropout: Option<DropoutKey>) -> Result<f64> {
        let total: usize = batch.iter().map(TrainingInstance::num_valid).sum();
        if total == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = batch[0].len();
        if batch.iter().any(|b| b.len() != n) {
            return Err(Error::Shape("ragged batch".into()));
        }
        self.zero_grad();
        let mut block_grads: Vec<BlockGrads> = self.blocks.iter().map(BlockGrads::new).collect();
        let mut probs = Vec::with_capacity(batch.len() * n);
        let mut labels = Vec::with_capacity(batch.len() * n);
        let mut mask = Vec::with_capacity(batch.len() * n);
        for (i, inst) in batch.iter().enumerate() {
            let cache = self.forward_sequence(inst, dropout.map(|k| k.rng_for(i)))?;
            // fused sigmoid + BCE gradient: stays informative where p saturates past the clamp
            let d_logits: Vec<f64> = cache
                .probs
                .iter()
                .zip(&inst.labels)
                .zip(&inst.valid_mask)
                .map(|((p, &y), &m)| if m { (p - f64::from(y)) / total as f64 } else { 0.0 })
                .collect();
            self.backward_sequence(&cache, &d_logits, &mut block_grads)?;
            probs.extend_from_slice(&cache.probs);
            labels.extend(inst.labels.iter().map(|&y| f64::from(y)));
            mask.extend_from_slice(&inst.valid_mask);
        }
        for (block, grads) in self.blocks.iter_mut().zip(block_grads) {
            grads.apply(block);
        }
        self.interaction_table.grad.row_mut(0).fill(0.0);
        self.exercise_table.grad.row_mut(0).fill(0.0);
        let shape = [batch.len(), n];
        ops::bce_masked(
            &Tensor::from_vec(&shape, probs)?,
            &Tensor::from_vec(&shape, labels)?,
            &mask,
        )
    }

    /// Inference-mode attention maps for one instance, for offline inspection.
    pub fn attention_maps(&self, inst: &TrainingInstance) -> Result<AttentionMaps> {
        let cache = self.forward_sequence(inst, None)?;
        Ok(cache.blocks.into_iter().map(|b| b.attn).collect())
    }
}

/// Dense gradients for one block, indexed like `Block::params`.
struct BlockGrads {
    grads: Vec<Tensor>,
}

impl BlockGrads {
    fn new(block: &Block) -> Self {
        BlockGrads {
            grads: block.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    fn acc(&mut self, slot: usize, g: &Tensor) {
        let dst = self.grads[slot].data_mut();
        for (a, b) in dst.iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    fn apply(self, block: &mut Block) {
        for (p, g) in block.params_mut().into_iter().zip(self.grads) {
            let dst = p.grad.data_mut();
            for (a, b) in dst.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}
