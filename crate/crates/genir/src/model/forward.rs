//! The instrumented forward pass.
//!
//! The decoder holds a single-position residual stream (atomic document
//! identifiers mean one generated token). Every component reads a
//! pre-normalized view of the stream and adds its output back to the raw
//! stream, so the final residual is exactly the start embedding plus the
//! sum of all component outputs.
//!
//! Patching replaces a component's *output vector* right before the
//! residual add; everything upstream is untouched and everything
//! downstream sees the patched stream.

use std::collections::BTreeMap;

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor1, Tensor2};

use super::trace::{CrossAttnHeadTrace, DecoderLayerTrace, Trace};
use super::{
    positional_encoding, AttentionParams, ComponentId, ComponentKind, MlpParams, ModelConfig,
    ModelParams, Site,
};

/// Vocabulary row used as the decoder's start-of-sentence input
/// (fixed by the vocabulary layout).
pub const SOS_ROW: usize = 1;

/// Resolved patch set: concrete replacement vectors per decoder component.
#[derive(Debug, Clone, Default)]
pub struct PatchOverrides<R: Scalar> {
    map: BTreeMap<ComponentId, Tensor1<R>>,
}

impl<R: Scalar> PatchOverrides<R> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: ComponentId, replacement: Tensor1<R>) -> Result<()> {
        if self.map.contains_key(&id) {
            return Err(Error::InvalidPlan(format!(
                "component {id} patched more than once"
            )));
        }
        self.map.insert(id, replacement);
        Ok(())
    }

    pub fn get(&self, id: &ComponentId) -> Option<&Tensor1<R>> {
        self.map.get(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ComponentId, &Tensor1<R>)> {
        self.map.iter()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (id, v) in &self.map {
            id.validate(config)?;
            if id.site != Site::Decoder {
                return Err(Error::InvalidPlan(format!(
                    "component {id}: only decoder components can be patched"
                )));
            }
            if v.len() != config.d_model {
                return Err(Error::InvalidPlan(format!(
                    "component {id}: replacement has length {}, expected {}",
                    v.len(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}

/// Multi-head attention in matrix form; `q_src` rows attend over
/// `kv_src` rows. Encoder self-attention is bidirectional; the decoder
/// passes a single row for both (one position).
pub(crate) fn multi_head_attention<R: Scalar>(
    q_src: &Tensor2<R>,
    kv_src: &Tensor2<R>,
    p: &AttentionParams<R>,
    scale: R,
) -> Result<Tensor2<R>> {
    let mut heads = Vec::with_capacity(p.w_q.len());
    for h in 0..p.w_q.len() {
        let q = q_src.matmul_nt(&p.w_q[h])?;
        let k = kv_src.matmul_nt(&p.w_k[h])?;
        let v = kv_src.matmul_nt(&p.w_v[h])?;
        let s = q.matmul_nt(&k)?;
        let a = s.scaled_softmax_rows(scale);
        heads.push(a.matmul(&v)?);
    }
    let refs: Vec<&Tensor2<R>> = heads.iter().collect();
    Tensor2::concat_cols(&refs)?.matmul_nt(&p.w_o)
}

pub(crate) fn mlp_rows<R: Scalar>(
    x: &Tensor2<R>,
    p: &MlpParams<R>,
) -> Result<(Tensor2<R>, Tensor2<R>)> {
    let acts = x.matmul_nt(&p.ff_proj)?.relu();
    let out = acts.matmul_nt(&p.ff_out)?;
    Ok((out, acts))
}

/// MLP on a single residual vector; returns the output added to the
/// stream and the neuron activations `a(r)_i = ReLU(FF_proj_i . r)`.
pub fn mlp<R: Scalar>(r: &Tensor1<R>, p: &MlpParams<R>) -> Result<(Tensor1<R>, Tensor1<R>)> {
    let (out, acts) = mlp_rows(&r.to_row(), p)?;
    Ok((out.to_tensor1(), acts.to_tensor1()))
}

/// One cross-attention component over encoder outputs, with per-head
/// internals for tracing: `s_i = (W_Q r)^T k_i`, `a = scaled-softmax(s)`,
/// `o_h = sum_i a_i v_i`, heads concatenated then multiplied by `W_O`.
pub fn cross_attention<R: Scalar>(
    r_normed: &Tensor1<R>,
    enc_out: &Tensor2<R>,
    p: &AttentionParams<R>,
    scale: R,
) -> Result<(Tensor1<R>, Vec<CrossAttnHeadTrace<R>>)> {
    let r_row = r_normed.to_row();
    let mut heads = Vec::with_capacity(p.w_q.len());
    let mut traces = Vec::with_capacity(p.w_q.len());
    for h in 0..p.w_q.len() {
        let q = r_row.matmul_nt(&p.w_q[h])?;
        let k = enc_out.matmul_nt(&p.w_k[h])?;
        let v = enc_out.matmul_nt(&p.w_v[h])?;
        let s = q.matmul_nt(&k)?;
        let a = s.scaled_softmax_rows(scale);
        let o = a.matmul(&v)?;
        traces.push(CrossAttnHeadTrace {
            scores: s.to_tensor1(),
            weights: a.to_tensor1(),
            keys: k,
            values: v,
            output: o.to_tensor1(),
        });
        heads.push(o);
    }
    let refs: Vec<&Tensor2<R>> = heads.iter().collect();
    let out = Tensor2::concat_cols(&refs)?.matmul_nt(&p.w_o)?;
    Ok((out.to_tensor1(), traces))
}

/// Encoder pass: token embeddings plus sinusoidal positions, then
/// pre-norm self-attention/MLP layers, then a final RMS norm.
/// Returns one output row per query token.
pub fn encode<R: Scalar>(params: &ModelParams<R>, tokens: &[TokenId]) -> Result<Tensor2<R>> {
    let config = &params.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty query".to_string()));
    }
    if tokens.len() > config.max_query_len {
        return Err(Error::InvalidArgument(format!(
            "query of {} tokens exceeds max length {}",
            tokens.len(),
            config.max_query_len
        )));
    }
    let mut indices = Vec::with_capacity(tokens.len());
    for t in tokens {
        if t.index() >= config.d_v {
            return Err(Error::UnknownToken(t.0));
        }
        indices.push(t.index());
    }

    let pe = positional_encoding::<R>(tokens.len(), config.d_model);
    let mut x = params.embed.select_rows(&indices)?.add(&pe)?;
    let scale = config.attn_scale::<R>();
    for layer in &params.enc_layers {
        let (normed, _) = x.rms_norm_rows(&layer.attn_gain)?;
        let attn_out = multi_head_attention(&normed, &normed, &layer.attn, scale)?;
        x = x.add(&attn_out)?;
        let (normed, _) = x.rms_norm_rows(&layer.mlp_gain)?;
        let (mlp_out, _) = mlp_rows(&normed, &layer.mlp)?;
        x = x.add(&mlp_out)?;
    }
    let (out, _) = x.rms_norm_rows(&params.enc_final_gain)?;
    Ok(out)
}

/// Unembedding: `l = W_U . (sqrt(d_model) . ReLU(r))`.
pub fn unembed<R: Scalar>(params: &ModelParams<R>, r: &Tensor1<R>) -> Result<Tensor1<R>> {
    let scaled = r
        .to_row()
        .relu()
        .scale(R::of_f64((params.config.d_model as f64).sqrt()));
    Ok(scaled.matmul_nt(&params.unembed)?.to_tensor1())
}

/// Single-position decoder pass over encoder outputs, recording a full
/// [`Trace`]. `overrides`, when given, replaces the listed component
/// outputs right before their residual add; `None` and an empty override
/// set produce bit-identical results.
pub fn decode<R: Scalar>(
    params: &ModelParams<R>,
    enc_out: &Tensor2<R>,
    overrides: Option<&PatchOverrides<R>>,
) -> Result<(Tensor1<R>, Trace<R>)> {
    let config = &params.config;
    if let Some(o) = overrides {
        o.validate(config)?;
    }
    if enc_out.cols() != config.d_model || enc_out.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: enc_out.shape(),
            rhs: (1, config.d_model),
        });
    }

    let effective = |id: ComponentId, computed: Tensor1<R>| -> Tensor1<R> {
        match overrides.and_then(|o| o.get(&id)) {
            Some(replacement) => replacement.clone(),
            None => computed,
        }
    };

    let scale = config.attn_scale::<R>();
    let mut r = params.embed.select_rows(&[SOS_ROW])?;
    let r_init = r.to_tensor1();
    let mut layers = Vec::with_capacity(config.n_dec_layers);

    for (l, layer) in params.dec_layers.iter().enumerate() {
        let r_begin = r.to_tensor1();

        let (normed, denoms) = r.rms_norm_rows(&layer.self_gain)?;
        let self_rms = denoms[0];
        let computed = multi_head_attention(&normed, &normed, &layer.self_attn, scale)?;
        let self_out = effective(
            ComponentId::decoder(l, ComponentKind::SelfAttention),
            computed.to_tensor1(),
        );
        r = r.add(&self_out.to_row())?;

        let (normed, denoms) = r.rms_norm_rows(&layer.cross_gain)?;
        let cross_rms = denoms[0];
        let (computed, cross_heads) =
            cross_attention(&normed.to_tensor1(), enc_out, &layer.cross_attn, scale)?;
        let cross_out = effective(ComponentId::decoder(l, ComponentKind::CrossAttention), computed);
        r = r.add(&cross_out.to_row())?;

        let (normed, denoms) = r.rms_norm_rows(&layer.mlp_gain)?;
        let mlp_rms = denoms[0];
        let (computed, acts) = mlp_rows(&normed, &layer.mlp)?;
        let mlp_out = effective(ComponentId::decoder(l, ComponentKind::Mlp), computed.to_tensor1());
        r = r.add(&mlp_out.to_row())?;

        layers.push(DecoderLayerTrace {
            r_begin,
            self_out,
            cross_out,
            mlp_out,
            r_end: r.to_tensor1(),
            cross_heads,
            mlp_acts: acts.to_tensor1(),
            self_rms,
            cross_rms,
            mlp_rms,
        });
    }

    let final_residual = r.to_tensor1();
    let logits = unembed(params, &final_residual)?;
    let trace = Trace {
        encoder_outputs: enc_out.clone(),
        r_init,
        layers,
        final_residual,
        logits: logits.clone(),
    };
    Ok((logits, trace))
}

/// Encode then decode in one call.
pub fn forward_query<R: Scalar>(
    params: &ModelParams<R>,
    tokens: &[TokenId],
    overrides: Option<&PatchOverrides<R>>,
) -> Result<(Tensor1<R>, Trace<R>)> {
    let enc = encode(params, tokens)?;
    decode(params, &enc, overrides)
}

/// Docid tokens sorted by descending logit; equal logits order by
/// ascending token id.
pub fn rank_documents<R: Scalar>(logits: &Tensor1<R>, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = vocab.docid_token_ids().collect();
    ids.sort_by(|a, b| {
        let la = logits.as_slice()[a.index()];
        let lb = logits.as_slice()[b.index()];
        lb.partial_cmp(&la)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ids
}

/// 1-based rank of `gold` among docid tokens under the same ordering as
/// [`rank_documents`].
pub fn gold_rank<R: Scalar>(logits: &Tensor1<R>, vocab: &Vocabulary, gold: TokenId) -> usize {
    let lg = logits.as_slice()[gold.index()];
    let mut ahead = 0usize;
    for t in vocab.docid_token_ids() {
        if t == gold {
            continue;
        }
        let lt = logits.as_slice()[t.index()];
        if lt > lg || (lt == lg && t.0 < gold.0) {
            ahead += 1;
        }
    }
    ahead + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::numerics::RMS_EPS;

    fn tiny_config(d_v: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_v,
            max_query_len: 6,
        }
    }

    fn tiny_params(seed: u64) -> ModelParams<f32> {
        ModelParams::random(tiny_config(16), seed).unwrap()
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let p = tiny_params(5);
        let a = encode(&p, &toks(&[3])).unwrap();
        assert_eq!(a.shape(), (1, 8));
        let b = encode(&p, &toks(&[3])).unwrap();
        assert_eq!(a, b);
        assert!(encode(&p, &[]).is_err());
        assert!(encode(&p, &toks(&[99])).is_err());
        assert!(encode(&p, &toks(&[2, 2, 2, 2, 2, 2, 2])).is_err());
    }

    #[test]
    fn encode_is_position_sensitive() {
        let p = tiny_params(5);
        let ab = encode(&p, &toks(&[3, 4])).unwrap();
        let ba = encode(&p, &toks(&[4, 3])).unwrap();
        assert!(ab.max_abs_diff(&ba) > 1e-4, "positional encoding inactive");
    }

    #[test]
    fn encode_zero_weights_matches_hand_computation() {
        // All weights zero, gains one: attention and MLP add nothing, so
        // the output is the RMS-normalized (embedding + position) rows.
        let config = ModelConfig {
            d_model: 4,
            d_ff: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_v: 6,
            max_query_len: 4,
        };
        let mut p = ModelParams::<f64>::zeros(config).unwrap();
        for (i, v) in p.embed.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let tokens = toks(&[2, 5]);
        let got = encode(&p, &tokens).unwrap();

        let pe = positional_encoding::<f64>(2, 4);
        for (row, t) in [(0usize, 2usize), (1, 5)] {
            let x: Vec<f64> = (0..4)
                .map(|j| p.embed.get(t, j) + pe.get(row, j))
                .collect();
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / 4.0 + RMS_EPS).sqrt();
            for j in 0..4 {
                assert!((got.get(row, j) - x[j] / rms).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_empty_overrides_is_bitwise_identity() {
        let p = tiny_params(9);
        let enc = encode(&p, &toks(&[2, 3, 4])).unwrap();
        let (clean, _) = decode(&p, &enc, None).unwrap();
        let empty = PatchOverrides::new();
        let (hooked, _) = decode(&p, &enc, Some(&empty)).unwrap();
        assert_eq!(clean, hooked);
    }

    #[test]
    fn decode_rejects_malformed_overrides() {
        let p = tiny_params(9);
        let enc = encode(&p, &toks(&[2])).unwrap();
        let mut bad_layer = PatchOverrides::new();
        bad_layer
            .insert(
                ComponentId::decoder(99, ComponentKind::Mlp),
                Tensor1::zeros(8),
            )
            .unwrap();
        assert!(decode(&p, &enc, Some(&bad_layer)).is_err());

        let mut bad_dim = PatchOverrides::new();
        bad_dim
            .insert(ComponentId::decoder(0, ComponentKind::Mlp), Tensor1::zeros(3))
            .unwrap();
        assert!(decode(&p, &enc, Some(&bad_dim)).is_err());

        let mut enc_site = PatchOverrides::new();
        enc_site
            .insert(
                ComponentId {
                    site: Site::Encoder,
                    layer: 0,
                    kind: ComponentKind::Mlp,
                },
                Tensor1::zeros(8),
            )
            .unwrap();
        assert!(decode(&p, &enc, Some(&enc_site)).is_err());
    }

    #[test]
    fn trace_residual_reconstruction_is_tight() {
        let p = tiny_params(11);
        let enc = encode(&p, &toks(&[2, 7, 5, 3])).unwrap();
        let (_, trace) = decode(&p, &enc, None).unwrap();
        assert!(trace.residual_reconstruction_error() < 1e-4);
        let rebuilt = trace.additive_reconstruction();
        assert!(rebuilt.max_abs_diff(&trace.final_residual) < 1e-4);
        for layer in &trace.layers {
            assert!(layer.mlp_acts.as_slice().iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn single_key_cross_attention_passes_value_through() {
        let p = tiny_params(13);
        let enc = encode(&p, &toks(&[4])).unwrap();
        let (_, trace) = decode(&p, &enc, None).unwrap();
        for layer in &trace.layers {
            for head in &layer.cross_heads {
                assert_eq!(head.weights.len(), 1);
                assert!((head.weights.as_slice()[0] - 1.0).abs() < 1e-7);
                // o_h = v_1 when there is only one key.
                assert!(head.output.max_abs_diff(&head.values.row_tensor(0)) < 1e-7);
            }
        }
    }

    #[test]
    fn duplicate_keys_share_attention_weight() {
        let p = tiny_params(17);
        let enc = encode(&p, &toks(&[5])).unwrap();
        // Duplicate the single encoder row so e_1 = e_2.
        let dup = Tensor2::from_vec(
            2,
            enc.cols(),
            [enc.row(0), enc.row(0)].concat(),
        );
        let r = Tensor1::from_f64s(&(0..8).map(|i| (i as f64 * 0.31).cos()).collect::<Vec<_>>());
        let scale = p.config.attn_scale::<f32>();
        let (_, heads) = cross_attention(&r, &dup, &p.dec_layers[0].cross_attn, scale).unwrap();
        for head in heads {
            let w = head.weights.as_slice();
            assert!((w[0] - w[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        let p = ModelParams::<f64>::random(tiny_config(16), 23).unwrap();
        let enc = encode(&p, &toks(&[2, 3, 9, 6])).unwrap();
        let n = enc.rows();
        let r = Tensor1::from_f64s(&(0..8).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>());
        let attn = &p.dec_layers[1].cross_attn;
        let scale = p.config.attn_scale::<f64>();
        let (got, _) = cross_attention(&r, &enc, attn, scale).unwrap();

        // Naive per-formula oracle.
        let dh = p.config.head_dim();
        let mut concat = Vec::new();
        for h in 0..p.config.n_heads {
            let wq = &attn.w_q[h];
            let wk = &attn.w_k[h];
            let wv = &attn.w_v[h];
            let q: Vec<f64> = (0..dh)
                .map(|o| (0..8).map(|j| wq.get(o, j) * r.as_slice()[j]).sum())
                .collect();
            let mut scores = vec![0.0; n];
            for i in 0..n {
                let k: Vec<f64> = (0..dh)
                    .map(|o| (0..8).map(|j| wk.get(o, j) * enc.get(i, j)).sum())
                    .collect();
                scores[i] = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
            let exps: Vec<f64> = scores.iter().map(|&s| (s * scale - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut o = vec![0.0; dh];
            for i in 0..n {
                let a = exps[i] / z;
                for d in 0..dh {
                    let v: f64 = (0..8).map(|j| wv.get(d, j) * enc.get(i, j)).sum();
                    o[d] += a * v;
                }
            }
            concat.extend(o);
        }
        let expected: Vec<f64> = (0..8)
            .map(|d| (0..8).map(|j| attn.w_o.get(d, j) * concat[j]).sum())
            .collect();
        let expected = Tensor1::from_vec(expected);
        assert!(got.max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn mlp_zero_for_orthogonal_input_and_single_neuron() {
        let d = 4;
        let mut mp = MlpParams::<f64> {
            ff_proj: Tensor2::zeros(3, d),
            ff_out: Tensor2::zeros(d, 3),
        };
        // Rows of ff_proj orthogonal to r = e0.
        mp.ff_proj.set(0, 1, 1.0);
        mp.ff_proj.set(1, 2, 1.0);
        mp.ff_proj.set(2, 3, 1.0);
        let r = Tensor1::from_vec(vec![5.0, 0.0, 0.0, 0.0]);
        let (out, acts) = mlp(&r, &mp).unwrap();
        assert_eq!(acts.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(out.as_slice(), &[0.0; 4]);

        // Single active neuron i: output = FF_out_i * (FF_proj_i . r).
        mp.ff_proj.set(1, 0, 2.0);
        for d_ in 0..d {
            mp.ff_out.set(d_, 1, (d_ as f64) - 1.5);
        }
        let (out, acts) = mlp(&r, &mp).unwrap();
        assert_eq!(acts.as_slice(), &[0.0, 10.0, 0.0]);
        for d_ in 0..d {
            assert!((out.as_slice()[d_] - 10.0 * ((d_ as f64) - 1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_matrix_form_matches_neuron_sum() {
        let p = ModelParams::<f64>::random(tiny_config(16), 31).unwrap();
        let mp = &p.dec_layers[0].mlp;
        let r = Tensor1::from_f64s(&(0..8).map(|i| (i as f64 - 3.5) * 0.4).collect::<Vec<_>>());
        let (out, acts) = mlp(&r, mp).unwrap();
        // sum_i FF_out_i * a_i
        let mut expected = vec![0.0f64; 8];
        for i in 0..16 {
            let a = acts.as_slice()[i];
            for d in 0..8 {
                expected[d] += mp.ff_out.get(d, i) * a;
            }
        }
        assert!(out.max_abs_diff(&Tensor1::from_vec(expected)) < 1e-5);
    }

    #[test]
    fn unembed_zero_linearity_and_hand_case() {
        let p = tiny_params(37);
        let zero = Tensor1::zeros(8);
        let l = unembed(&p, &zero).unwrap();
        assert!(l.as_slice().iter().all(|&x| x == 0.0));

        let r = Tensor1::from_f64s(&[0.5, -1.0, 2.0, 0.0, -0.2, 1.0, 3.0, -4.0]);
        let l1 = unembed(&p, &r).unwrap();
        let l2 = unembed(&p, &r.scale(2.0)).unwrap();
        // Doubling a non-negative-clamped input doubles the logits.
        assert!(l2.max_abs_diff(&l1.scale(2.0)) < 1e-4);

        // One-hot unembedding rows at d_V = 3: logits pick scaled coords.
        let config = ModelConfig {
            d_model: 4,
            d_ff: 4,
            n_heads: 1,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_v: 3,
            max_query_len: 2,
        };
        let mut q = ModelParams::<f64>::zeros(config).unwrap();
        q.unembed.set(0, 0, 1.0);
        q.unembed.set(1, 1, 1.0);
        q.unembed.set(2, 3, 1.0);
        let r = Tensor1::from_vec(vec![1.0, -2.0, 5.0, 0.25]);
        let l = unembed(&q, &r).unwrap();
        assert!((l.as_slice()[0] - 2.0).abs() < 1e-12); // sqrt(4) * 1.0
        assert!((l.as_slice()[1] - 0.0).abs() < 1e-12); // ReLU clamps -2
        assert!((l.as_slice()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unembed_of_final_residual_equals_trace_logits() {
        let p = tiny_params(41);
        let enc = encode(&p, &toks(&[2, 8])).unwrap();
        let (logits, trace) = decode(&p, &enc, None).unwrap();
        let again = unembed(&p, &trace.final_residual).unwrap();
        assert_eq!(again, logits);
        assert_eq!(trace.logits, logits);
    }

    #[test]
    fn decoder_self_attention_ignores_query_weights() {
        // With one position the softmax weight is exactly 1, so the
        // self-attention output is a linear map of the normalized stream
        // and W_Q cannot influence it.
        let mut p = tiny_params(43);
        let enc = encode(&p, &toks(&[3, 5])).unwrap();
        let (a, _) = decode(&p, &enc, None).unwrap();
        for layer in &mut p.dec_layers {
            for wq in &mut layer.self_attn.w_q {
                for v in wq.as_mut_slice() {
                    *v *= -3.7;
                }
            }
        }
        let (b, _) = decode(&p, &enc, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_documents_ordering_and_ties() {
        let vocab = Vocabulary::new(3, 4); // ids: 0,1 special; 2..5 words; 5..9 docids
        let d_v = vocab.len();
        let mut logits = vec![0.0f32; d_v];
        logits[vocab.docid(2).index()] = 3.0;
        logits[vocab.docid(0).index()] = 1.0;
        logits[vocab.docid(1).index()] = 1.0; // tie with docid 0
        let logits = Tensor1::from_vec(logits);
        let ranked = rank_documents(&logits, &vocab);
        assert_eq!(ranked[0], vocab.docid(2));
        assert_eq!(ranked[1], vocab.docid(0)); // tie resolves to lower id
        assert_eq!(ranked[2], vocab.docid(1));
        assert_eq!(ranked[3], vocab.docid(3));
        assert_eq!(gold_rank(&logits, &vocab, vocab.docid(2)), 1);
        assert_eq!(gold_rank(&logits, &vocab, vocab.docid(1)), 3);
    }

    #[test]
    fn rank_documents_matches_full_sort_oracle() {
        let vocab = Vocabulary::new(10, 20);
        let mut state = 12345u64;
        let logits: Vec<f32> = (0..vocab.len())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 33) as f32 / (1u32 << 30) as f32) - 1.5
            })
            .collect();
        let logits = Tensor1::from_vec(logits);
        let ranked = rank_documents(&logits, &vocab);

        // Selection-sort oracle over (logit desc, id asc).
        let mut remaining: Vec<TokenId> = vocab.docid_token_ids().collect();
        let mut oracle = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (bi, bb) = (remaining[i], remaining[best]);
                let (li, lb) = (logits.as_slice()[bi.index()], logits.as_slice()[bb.index()]);
                if li > lb || (li == lb && bi.0 < bb.0) {
                    best = i;
                }
            }
            oracle.push(remaining.remove(best));
        }
        assert_eq!(ranked, oracle);
        for (i, t) in oracle.iter().enumerate() {
            assert_eq!(gold_rank(&logits, &vocab, *t), i + 1);
        }
    }

    #[test]
    fn patched_component_replaces_residual_contribution() {
        let p = tiny_params(47);
        let enc = encode(&p, &toks(&[2, 3])).unwrap();
        let (_, clean) = decode(&p, &enc, None).unwrap();

        let custom = Tensor1::from_f64s(&[1.0, -1.0, 0.5, 0.0, 0.0, 2.0, -0.5, 0.25]);
        let mut overrides = PatchOverrides::new();
        overrides
            .insert(ComponentId::decoder(1, ComponentKind::Mlp), custom.clone())
            .unwrap();
        let (_, patched) = decode(&p, &enc, Some(&overrides)).unwrap();

        // Upstream of the patch: bit-identical.
        assert_eq!(patched.layers[0].r_begin, clean.layers[0].r_begin);
        assert_eq!(patched.layers[0].r_end, clean.layers[0].r_end);
        assert_eq!(patched.layers[1].cross_out, clean.layers[1].cross_out);
        // At the patch: the recorded output is the replacement.
        assert_eq!(patched.layers[1].mlp_out, custom);
        // Stream identity still holds on the patched pass.
        assert!(patched.residual_reconstruction_error() < 1e-4);
    }
}
