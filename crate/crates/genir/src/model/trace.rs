//! Recorded values from one decoder pass.

use crate::numerics::{Scalar, Tensor1, Tensor2};

use super::{ComponentId, ComponentKind, Site};

/// Internals of one cross-attention head for one pass.
#[derive(Debug, Clone)]
pub struct CrossAttnHeadTrace<R: Scalar> {
    /// Similarity scores `s_1..s_N` (pre-softmax).
    pub scores: Tensor1<R>,
    /// Attention weights `a_1..a_N`.
    pub weights: Tensor1<R>,
    /// Key vectors, one row per encoder position.
    pub keys: Tensor2<R>,
    /// Value vectors, one row per encoder position.
    pub values: Tensor2<R>,
    /// Head output `o_h = sum_i a_i v_i` (before `W_O`).
    pub output: Tensor1<R>,
}

/// Per-layer snapshots: residual before/after, the three component
/// outputs added to the stream, per-head cross-attention internals, MLP
/// neuron activations, and the frozen RMS denominators of each
/// component's input normalization.
#[derive(Debug, Clone)]
pub struct DecoderLayerTrace<R: Scalar> {
    pub r_begin: Tensor1<R>,
    pub self_out: Tensor1<R>,
    pub cross_out: Tensor1<R>,
    pub mlp_out: Tensor1<R>,
    pub r_end: Tensor1<R>,
    pub cross_heads: Vec<CrossAttnHeadTrace<R>>,
    pub mlp_acts: Tensor1<R>,
    pub self_rms: R,
    pub cross_rms: R,
    pub mlp_rms: R,
}

impl<R: Scalar> DecoderLayerTrace<R> {
    pub fn component_out(&self, kind: ComponentKind) -> &Tensor1<R> {
        match kind {
            ComponentKind::SelfAttention => &self.self_out,
            ComponentKind::CrossAttention => &self.cross_out,
            ComponentKind::Mlp => &self.mlp_out,
        }
    }

    pub fn input_rms(&self, kind: ComponentKind) -> R {
        match kind {
            ComponentKind::SelfAttention => self.self_rms,
            ComponentKind::CrossAttention => self.cross_rms,
            ComponentKind::Mlp => self.mlp_rms,
        }
    }
}

/// Full record of one query pass: encoder outputs, the decoder residual
/// stream layer by layer, and the final logits.
#[derive(Debug, Clone)]
pub struct Trace<R: Scalar> {
    /// Encoder outputs `e_1..e_N`, one row per query token.
    pub encoder_outputs: Tensor2<R>,
    /// Decoder start residual (start-of-sentence embedding).
    pub r_init: Tensor1<R>,
    pub layers: Vec<DecoderLayerTrace<R>>,
    pub final_residual: Tensor1<R>,
    pub logits: Tensor1<R>,
}

impl<R: Scalar> Trace<R> {
    /// Component output for a decoder-site id, if it exists in this trace.
    pub fn component_out(&self, id: ComponentId) -> Option<&Tensor1<R>> {
        if id.site != Site::Decoder {
            return None;
        }
        self.layers.get(id.layer).map(|l| l.component_out(id.kind))
    }

    /// Max over layers of `||r_end - r_begin - sum(c_out)||_inf`.
    pub fn residual_reconstruction_error(&self) -> R {
        let mut worst = R::zero();
        for layer in &self.layers {
            for j in 0..layer.r_begin.len() {
                let rebuilt = layer.r_begin.as_slice()[j]
                    + layer.self_out.as_slice()[j]
                    + layer.cross_out.as_slice()[j]
                    + layer.mlp_out.as_slice()[j];
                let d = (layer.r_end.as_slice()[j] - rebuilt).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Residual rebuilt from the initial embedding plus every component
    /// output (should match `final_residual` up to rounding).
    pub fn additive_reconstruction(&self) -> Tensor1<R> {
        let mut acc = self.r_init.clone();
        for layer in &self.layers {
            for (kind_out, slot) in [
                (&layer.self_out, 0),
                (&layer.cross_out, 1),
                (&layer.mlp_out, 2),
            ] {
                let _ = slot;
                for (a, &b) in acc.as_mut_slice().iter_mut().zip(kind_out.as_slice()) {
                    *a = *a + b;
                }
            }
        }
        acc
    }

    /// All decoder component ids present in this trace, in stream order.
    pub fn component_ids(&self) -> Vec<ComponentId> {
        let mut out = Vec::with_capacity(self.layers.len() * 3);
        for layer in 0..self.layers.len() {
            for kind in ComponentKind::ALL {
                out.push(ComponentId::decoder(layer, kind));
            }
        }
        out
    }
}
