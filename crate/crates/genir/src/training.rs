//! Multitask fine-tuning: cross-entropy over the first decoder position,
//! Adam updates with data-parallel gradient accumulation, evaluation
//! metrics (Hits@k, R@5, MRR) and the overfit/divergence guard rails.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, ExampleKind, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::model::forward::{forward_query, gold_rank, SOS_ROW};
use crate::model::{positional_encoding, ModelConfig, ModelParams};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::{cross_entropy_logits, Scalar, Tensor2};

/// Fixed number of gradient-accumulation chunks per batch. Chunks are
/// summed in order, so results do not depend on the worker count.
const GRAD_CHUNKS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Indexing:retrieval mix of the training stream.
    pub ratio: u32,
    /// Evaluate on validation queries every this many steps.
    pub eval_every: usize,
    /// Stop once validation Hits@1 reaches this value, if set.
    #[serde(default)]
    pub early_stop_hits_at_1: Option<f64>,
    /// Keep a parameter snapshot at every evaluation point.
    #[serde(default)]
    pub keep_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 3000,
            seed: 7,
            ratio: 32,
            eval_every: 100,
            early_stop_hits_at_1: Some(0.95),
            keep_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.eval_every == 0
            || self.ratio == 0
        {
            return Err(Error::InvalidArgument(
                "train config values must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Retrieval quality over a query set with one relevant document each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hits_at_1: f64,
    pub recall_at_5: f64,
    pub hits_at_10: f64,
    pub mrr: f64,
}

impl EvalResult {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self {
                hits_at_1: 0.0,
                recall_at_5: 0.0,
                hits_at_10: 0.0,
                mrr: 0.0,
            };
        }
        let n = ranks.len() as f64;
        let count = |p: usize| ranks.iter().filter(|&&r| r <= p).count() as f64 / n;
        Self {
            hits_at_1: count(1),
            recall_at_5: count(5),
            hits_at_10: count(10),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: EvalResult,
    /// Gold-document rank per query, aligned with the input order.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub result: EvalResult,
}

pub struct TrainOutcome<R: Scalar> {
    pub params: ModelParams<R>,
    pub loss_curve: Vec<LossPoint>,
    pub eval_points: Vec<EvalPoint>,
    pub checkpoints: Vec<(usize, ModelParams<R>)>,
}

// ---------------------------------------------------------------------------
// Tape construction
// ---------------------------------------------------------------------------

struct AttnVars {
    w_q: Vec<Var>,
    w_k: Vec<Var>,
    w_v: Vec<Var>,
    w_o: Var,
}

struct EncLayerVars {
    attn: AttnVars,
    attn_gain: Var,
    ff_proj: Var,
    ff_out: Var,
    mlp_gain: Var,
}

struct DecLayerVars {
    self_attn: AttnVars,
    self_gain: Var,
    cross_attn: AttnVars,
    cross_gain: Var,
    ff_proj: Var,
    ff_out: Var,
    mlp_gain: Var,
}

/// Parameter leaves registered on a tape, in the same canonical order as
/// [`ModelParams::for_each_tensor`].
struct ParamVars {
    embed: Var,
    enc: Vec<EncLayerVars>,
    enc_final_gain: Var,
    dec: Vec<DecLayerVars>,
    unembed: Var,
    ordered: Vec<Var>,
}

fn reg_leaf<R: Scalar>(tape: &mut Tape<R>, ordered: &mut Vec<Var>, t: &Tensor2<R>) -> Var {
    let v = tape.leaf(t.clone());
    ordered.push(v);
    v
}

fn reg_attn<R: Scalar>(
    tape: &mut Tape<R>,
    ordered: &mut Vec<Var>,
    a: &crate::model::AttentionParams<R>,
) -> AttnVars {
    AttnVars {
        w_q: a.w_q.iter().map(|t| reg_leaf(tape, ordered, t)).collect(),
        w_k: a.w_k.iter().map(|t| reg_leaf(tape, ordered, t)).collect(),
        w_v: a.w_v.iter().map(|t| reg_leaf(tape, ordered, t)).collect(),
        w_o: reg_leaf(tape, ordered, &a.w_o),
    }
}

impl ParamVars {
    fn register<R: Scalar>(tape: &mut Tape<R>, params: &ModelParams<R>) -> Self {
        let mut ordered = Vec::new();
        let embed = reg_leaf(tape, &mut ordered, &params.embed);
        let mut enc = Vec::with_capacity(params.enc_layers.len());
        for layer in &params.enc_layers {
            let attn = reg_attn(tape, &mut ordered, &layer.attn);
            let attn_gain = reg_leaf(tape, &mut ordered, &layer.attn_gain);
            let ff_proj = reg_leaf(tape, &mut ordered, &layer.mlp.ff_proj);
            let ff_out = reg_leaf(tape, &mut ordered, &layer.mlp.ff_out);
            let mlp_gain = reg_leaf(tape, &mut ordered, &layer.mlp_gain);
            enc.push(EncLayerVars {
                attn,
                attn_gain,
                ff_proj,
                ff_out,
                mlp_gain,
            });
        }
        let enc_final_gain = reg_leaf(tape, &mut ordered, &params.enc_final_gain);
        let mut dec = Vec::with_capacity(params.dec_layers.len());
        for layer in &params.dec_layers {
            let self_attn = reg_attn(tape, &mut ordered, &layer.self_attn);
            let self_gain = reg_leaf(tape, &mut ordered, &layer.self_gain);
            let cross_attn = reg_attn(tape, &mut ordered, &layer.cross_attn);
            let cross_gain = reg_leaf(tape, &mut ordered, &layer.cross_gain);
            let ff_proj = reg_leaf(tape, &mut ordered, &layer.mlp.ff_proj);
            let ff_out = reg_leaf(tape, &mut ordered, &layer.mlp.ff_out);
            let mlp_gain = reg_leaf(tape, &mut ordered, &layer.mlp_gain);
            dec.push(DecLayerVars {
                self_attn,
                self_gain,
                cross_attn,
                cross_gain,
                ff_proj,
                ff_out,
                mlp_gain,
            });
        }
        let unembed = reg_leaf(tape, &mut ordered, &params.unembed);
        Self {
            embed,
            enc,
            enc_final_gain,
            dec,
            unembed,
            ordered,
        }
    }
}

fn tape_mha<R: Scalar>(
    tape: &mut Tape<R>,
    q_src: Var,
    kv_src: Var,
    attn: &AttnVars,
    scale: R,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(attn.w_q.len());
    for h in 0..attn.w_q.len() {
        let q = tape.matmul_nt(q_src, attn.w_q[h])?;
        let k = tape.matmul_nt(kv_src, attn.w_k[h])?;
        let v = tape.matmul_nt(kv_src, attn.w_v[h])?;
        let s = tape.matmul_nt(q, k)?;
        let a = tape.scaled_softmax_rows(s, scale);
        heads.push(tape.matmul(a, v)?);
    }
    let concat = tape.concat_cols(&heads)?;
    tape.matmul_nt(concat, attn.w_o)
}

/// Records the full forward pass for one example and returns the loss node.
/// Mirrors the inference path operation for operation.
fn tape_loss<R: Scalar>(
    tape: &mut Tape<R>,
    pv: &ParamVars,
    config: &ModelConfig,
    example: &Example,
) -> Result<Var> {
    if example.input.is_empty() || example.input.len() > config.max_query_len {
        return Err(Error::InvalidArgument(format!(
            "example input length {} outside 1..={}",
            example.input.len(),
            config.max_query_len
        )));
    }
    let mut indices = Vec::with_capacity(example.input.len());
    for t in &example.input {
        if t.index() >= config.d_v {
            return Err(Error::UnknownToken(t.0));
        }
        indices.push(t.index());
    }
    if example.target.index() >= config.d_v {
        return Err(Error::UnknownToken(example.target.0));
    }
    let scale = config.attn_scale::<R>();

    // Encoder.
    let emb = tape.select_rows(pv.embed, &indices)?;
    let pe = tape.leaf(positional_encoding(indices.len(), config.d_model));
    let mut x = tape.add(emb, pe)?;
    for layer in &pv.enc {
        let normed = tape.rms_norm_rows(x, layer.attn_gain)?;
        let attn = tape_mha(tape, normed, normed, &layer.attn, scale)?;
        x = tape.add(x, attn)?;
        let normed = tape.rms_norm_rows(x, layer.mlp_gain)?;
        let acts = tape.matmul_nt(normed, layer.ff_proj)?;
        let acts = tape.relu(acts);
        let out = tape.matmul_nt(acts, layer.ff_out)?;
        x = tape.add(x, out)?;
    }
    let enc_out = tape.rms_norm_rows(x, pv.enc_final_gain)?;

    // Single-position decoder.
    let mut r = tape.select_rows(pv.embed, &[SOS_ROW])?;
    for layer in &pv.dec {
        let normed = tape.rms_norm_rows(r, layer.self_gain)?;
        let attn = tape_mha(tape, normed, normed, &layer.self_attn, scale)?;
        r = tape.add(r, attn)?;
        let normed = tape.rms_norm_rows(r, layer.cross_gain)?;
        let cross = tape_mha(tape, normed, enc_out, &layer.cross_attn, scale)?;
        r = tape.add(r, cross)?;
        let normed = tape.rms_norm_rows(r, layer.mlp_gain)?;
        let acts = tape.matmul_nt(normed, layer.ff_proj)?;
        let acts = tape.relu(acts);
        let out = tape.matmul_nt(acts, layer.ff_out)?;
        r = tape.add(r, out)?;
    }

    let clamped = tape.relu(r);
    let scaled = tape.scale(clamped, R::of_f64((config.d_model as f64).sqrt()));
    let logits = tape.matmul_nt(scaled, pv.unembed)?;
    tape.cross_entropy(logits, example.target.index())
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// Per-parameter gradient tensors in canonical order.
#[derive(Debug, Clone)]
pub struct Grad<R: Scalar> {
    pub tensors: Vec<Tensor2<R>>,
}

impl<R: Scalar> Grad<R> {
    pub fn zeros_like(params: &ModelParams<R>) -> Self {
        let mut tensors = Vec::new();
        params.for_each_tensor(|_, t| tensors.push(Tensor2::zeros(t.rows(), t.cols())));
        Self { tensors }
    }

    pub fn add_assign(&mut self, other: &Grad<R>) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: R) {
        for t in &mut self.tensors {
            for v in t.as_mut_slice() {
                *v = *v * c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Cross-entropy of the gold docid at the decoder output, computed on the
/// inference path.
pub fn loss<R: Scalar>(params: &ModelParams<R>, example: &Example) -> Result<R> {
    if example.target.index() >= params.config.d_v {
        return Err(Error::UnknownToken(example.target.0));
    }
    let (logits, _) = forward_query(params, &example.input, None)?;
    let (l, _) = cross_entropy_logits(logits.as_slice(), example.target.index());
    Ok(l)
}

/// Loss plus parameter gradients for one example, via the tape.
pub fn loss_and_grad<R: Scalar>(
    params: &ModelParams<R>,
    example: &Example,
) -> Result<(R, Grad<R>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let loss_var = tape_loss(&mut tape, &pv, &params.config, example)?;
    let grads: Gradients<R> = tape.backward(loss_var)?;
    let mut tensors = Vec::with_capacity(pv.ordered.len());
    for &v in &pv.ordered {
        tensors.push(grads.get_or_zeros(v, tape.value(v).shape()));
    }
    Ok((tape.scalar_value(loss_var), Grad { tensors }))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with constant learning rate and bias correction.
pub struct Adam<R: Scalar> {
    m: Vec<Tensor2<R>>,
    v: Vec<Tensor2<R>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<R: Scalar> Adam<R> {
    pub fn new(params: &ModelParams<R>) -> Self {
        let g = Grad::zeros_like(params);
        Self {
            m: g.tensors.clone(),
            v: g.tensors,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<R>, grad: &Grad<R>, lr: f64) {
        self.t += 1;
        let b1 = R::of_f64(self.beta1);
        let b2 = R::of_f64(self.beta2);
        let one = R::one();
        let corr1 = R::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = R::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = R::of_f64(lr);
        let eps = R::of_f64(self.eps);

        let mut i = 0usize;
        params.for_each_tensor_mut(|_, p| {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = &grad.tensors[i];
            for ((pv, mv), (vv, &gv)) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice().iter_mut().zip(g.as_slice()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Ranks the gold document for every query and aggregates metrics.
pub fn evaluate<R: Scalar>(
    params: &ModelParams<R>,
    vocab: &Vocabulary,
    queries: &[Example],
) -> Result<Evaluation> {
    for q in queries {
        if !vocab.is_docid(q.target) {
            return Err(Error::InvalidArgument(format!(
                "evaluation target {} is not a docid token",
                q.target.0
            )));
        }
    }
    let ranks: Vec<usize> = queries
        .par_iter()
        .map(|q| {
            let (logits, _) = forward_query(params, &q.input, None)?;
            Ok(gold_rank(&logits, vocab, q.target))
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        result: EvalResult::from_ranks(&ranks),
        ranks,
    })
}

/// The subset of queries whose gold document ranks first un-patched.
pub fn correct_queries<R: Scalar>(
    params: &ModelParams<R>,
    vocab: &Vocabulary,
    queries: &[Example],
) -> Result<Vec<Example>> {
    let eval = evaluate(params, vocab, queries)?;
    Ok(queries
        .iter()
        .zip(&eval.ranks)
        .filter(|(_, &r)| r == 1)
        .map(|(q, _)| q.clone())
        .collect())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Trains on the example stream. Deterministic given the seed regardless
/// of worker count; aborts with [`Error::Divergence`] on a non-finite
/// batch loss.
pub fn train<R: Scalar>(
    mut params: ModelParams<R>,
    set: &crate::corpus::ExampleSet,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<R>> {
    cfg.validate()?;
    if set.stream.is_empty() {
        return Err(Error::InvalidArgument("empty training stream".to_string()));
    }

    let order = shuffled_block_order(set, cfg.seed);
    let val_queries: Vec<Example> = set
        .retrieval_examples
        .iter()
        .filter(|e| e.split == Split::Validation)
        .cloned()
        .collect();

    let mut adam = Adam::new(&params);
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut eval_points = Vec::new();
    let mut checkpoints = Vec::new();
    let chunk = cfg.batch_size.div_ceil(GRAD_CHUNKS);

    for step in 0..cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|i| &order[(step * cfg.batch_size + i) % order.len()])
            .collect();

        // Data-parallel per-chunk accumulation; chunks reduce in order.
        let partials: Vec<Result<(R, Grad<R>)>> = batch
            .par_chunks(chunk)
            .map(|examples| {
                let mut sum_loss = R::zero();
                let mut acc: Option<Grad<R>> = None;
                for e in examples {
                    let (l, g) = loss_and_grad(&params, e)?;
                    sum_loss = sum_loss + l;
                    match &mut acc {
                        Some(a) => a.add_assign(&g)?,
                        None => acc = Some(g),
                    }
                }
                Ok((sum_loss, acc.expect("non-empty chunk")))
            })
            .collect();

        let mut total_loss = R::zero();
        let mut grad: Option<Grad<R>> = None;
        for p in partials {
            let (l, g) = p?;
            total_loss = total_loss + l;
            match &mut grad {
                Some(a) => a.add_assign(&g)?,
                None => grad = Some(g),
            }
        }
        let inv_b = R::one() / R::from_usize(cfg.batch_size).unwrap();
        let batch_loss = (total_loss * inv_b).as_f64();
        if !batch_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "batch loss is not finite at step {step}"
            )));
        }
        let mut grad = grad.expect("at least one chunk");
        grad.scale_in_place(inv_b);
        adam.step(&mut params, &grad, cfg.learning_rate);
        loss_curve.push(LossPoint {
            step,
            loss: batch_loss,
        });

        let at_cadence = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if at_cadence && !val_queries.is_empty() {
            let eval = evaluate(&params, vocab, &val_queries)?;
            eval_points.push(EvalPoint {
                step: step + 1,
                result: eval.result,
            });
            if cfg.keep_checkpoints {
                checkpoints.push((step + 1, params.clone()));
            }
            if let Some(threshold) = cfg.early_stop_hits_at_1 {
                if eval.result.hits_at_1 >= threshold {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        params,
        loss_curve,
        eval_points,
        checkpoints,
    })
}

/// Reorders the stream at block granularity (each block is one run of
/// indexing examples plus its trailing retrieval example) so the batch
/// order depends on the training seed.
fn shuffled_block_order(set: &crate::corpus::ExampleSet, seed: u64) -> Vec<Example> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut blocks: Vec<Vec<Example>> = Vec::new();
    let mut current = Vec::new();
    for e in &set.stream {
        let is_retrieval = e.kind == ExampleKind::Retrieve;
        current.push(e.clone());
        if is_retrieval {
            blocks.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7261696e);
    blocks.shuffle(&mut rng);
    blocks.into_iter().flatten().collect()
}
