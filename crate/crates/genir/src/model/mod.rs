//! The instrumented encoder-decoder: configuration, weight containers,
//! deterministic initialization, the forward pass with per-component hook
//! points ([`forward`]), pass traces ([`trace`]) and the binary weights
//! format ([`weights`]).

pub mod forward;
pub mod trace;
pub mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2};

pub use forward::{
    cross_attention, decode, encode, gold_rank, mlp, rank_documents, unembed, PatchOverrides,
};
pub use trace::{CrossAttnHeadTrace, DecoderLayerTrace, Trace};

/// Model shape. `d_model` must divide evenly into `n_heads`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_v: usize,
    pub max_query_len: usize,
}

impl ModelConfig {
    /// Default desk-scale shape; `d_v` comes from the vocabulary.
    pub fn desk_scale(d_v: usize) -> Self {
        Self {
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 6,
            d_v,
            max_query_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.d_ff == 0
            || self.n_heads == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.d_v == 0
            || self.max_query_len == 0
        {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".to_string()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Softmax scaling `1/sqrt(d_model / H)`.
    pub fn attn_scale<R: Scalar>(&self) -> R {
        R::of_f64(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// Which stream a component lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Encoder,
    Decoder,
}

/// Component kind within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    SelfAttention,
    CrossAttention,
    Mlp,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [
        ComponentKind::SelfAttention,
        ComponentKind::CrossAttention,
        ComponentKind::Mlp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ComponentKind::SelfAttention => "self_attention",
            ComponentKind::CrossAttention => "cross_attention",
            ComponentKind::Mlp => "mlp",
        }
    }
}

/// Address of one component output in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub site: Site,
    pub layer: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn decoder(layer: usize, kind: ComponentKind) -> Self {
        Self {
            site: Site::Decoder,
            layer,
            kind,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let max = match self.site {
            Site::Encoder => config.n_enc_layers,
            Site::Decoder => config.n_dec_layers,
        };
        if self.layer >= max {
            return Err(Error::InvalidPlan(format!(
                "component {self} out of range: site has {max} layers"
            )));
        }
        if self.site == Site::Encoder && self.kind == ComponentKind::CrossAttention {
            return Err(Error::InvalidPlan(format!(
                "component {self}: cross-attention exists only in the decoder"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for ComponentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let site = match self.site {
            Site::Encoder => "encoder",
            Site::Decoder => "decoder",
        };
        write!(f, "{site}.{}.{}", self.layer, self.kind.label())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Multi-head attention weights: per-head `W_Q`, `W_K`, `W_V`
/// (`head_dim x d_model` each, applied as `x * W^T`) and a shared
/// `W_O` (`d_model x d_model`). No bias terms anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<R: Scalar> {
    pub w_q: Vec<Tensor2<R>>,
    pub w_k: Vec<Tensor2<R>>,
    pub w_v: Vec<Tensor2<R>>,
    pub w_o: Tensor2<R>,
}

/// Two feed-forward layers joined by a ReLU: `FF_proj` is
/// `d_ff x d_model`, `FF_out` is `d_model x d_ff`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<R: Scalar> {
    pub ff_proj: Tensor2<R>,
    pub ff_out: Tensor2<R>,
}

/// RMS gains are stored as `1 x d_model` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<R: Scalar> {
    pub attn: AttentionParams<R>,
    pub mlp: MlpParams<R>,
    pub attn_gain: Tensor2<R>,
    pub mlp_gain: Tensor2<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<R: Scalar> {
    pub self_attn: AttentionParams<R>,
    pub cross_attn: AttentionParams<R>,
    pub mlp: MlpParams<R>,
    pub self_gain: Tensor2<R>,
    pub cross_gain: Tensor2<R>,
    pub mlp_gain: Tensor2<R>,
}

/// All model weights. Token embedding and unembedding are separate
/// (untied) `d_V x d_model` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R: Scalar> {
    pub config: ModelConfig,
    pub embed: Tensor2<R>,
    pub enc_layers: Vec<EncoderLayerParams<R>>,
    pub enc_final_gain: Tensor2<R>,
    pub dec_layers: Vec<DecoderLayerParams<R>>,
    pub unembed: Tensor2<R>,
}

fn attn_zeros<R: Scalar>(config: &ModelConfig) -> AttentionParams<R> {
    let dh = config.head_dim();
    let d = config.d_model;
    AttentionParams {
        w_q: (0..config.n_heads).map(|_| Tensor2::zeros(dh, d)).collect(),
        w_k: (0..config.n_heads).map(|_| Tensor2::zeros(dh, d)).collect(),
        w_v: (0..config.n_heads).map(|_| Tensor2::zeros(dh, d)).collect(),
        w_o: Tensor2::zeros(d, d),
    }
}

fn ones_row<R: Scalar>(d: usize) -> Tensor2<R> {
    Tensor2::from_vec(1, d, vec![R::one(); d])
}

impl<R: Scalar> ModelParams<R> {
    /// All-zero weights with unit gains; useful as a skeleton for loading
    /// and for hand-computed forward checks.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let enc_layers = (0..config.n_enc_layers)
            .map(|_| EncoderLayerParams {
                attn: attn_zeros(&config),
                mlp: MlpParams {
                    ff_proj: Tensor2::zeros(config.d_ff, d),
                    ff_out: Tensor2::zeros(d, config.d_ff),
                },
                attn_gain: ones_row(d),
                mlp_gain: ones_row(d),
            })
            .collect();
        let dec_layers = (0..config.n_dec_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attn_zeros(&config),
                cross_attn: attn_zeros(&config),
                mlp: MlpParams {
                    ff_proj: Tensor2::zeros(config.d_ff, d),
                    ff_out: Tensor2::zeros(d, config.d_ff),
                },
                self_gain: ones_row(d),
                cross_gain: ones_row(d),
                mlp_gain: ones_row(d),
            })
            .collect();
        Ok(Self {
            embed: Tensor2::zeros(config.d_v, d),
            enc_final_gain: ones_row(d),
            unembed: Tensor2::zeros(config.d_v, d),
            enc_layers,
            dec_layers,
            config,
        })
    }

    /// Seed-deterministic Gaussian initialization. Weight matrices get
    /// std `1/sqrt(fan_in)`, the embedding std 0.5, gains start at 1.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.for_each_tensor_mut(|name, t| {
            if name.ends_with("gain") {
                return; // gains stay at 1
            }
            let std = if name == "embed" {
                0.5
            } else {
                1.0 / (t.cols() as f64).sqrt()
            };
            for v in t.as_mut_slice() {
                *v = R::of_f64(normal(&mut rng) * std);
            }
        });
        Ok(params)
    }

    /// Visit every weight tensor in canonical order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor2<R>)) {
        let mut g = |name: String, t: &Tensor2<R>| f(&name, t);
        g("embed".to_string(), &self.embed);
        for (l, layer) in self.enc_layers.iter().enumerate() {
            visit_attn(&format!("enc.{l}.attn"), &layer.attn, &mut g);
            g(format!("enc.{l}.attn_gain"), &layer.attn_gain);
            g(format!("enc.{l}.mlp.ff_proj"), &layer.mlp.ff_proj);
            g(format!("enc.{l}.mlp.ff_out"), &layer.mlp.ff_out);
            g(format!("enc.{l}.mlp_gain"), &layer.mlp_gain);
        }
        g("enc_final_gain".to_string(), &self.enc_final_gain);
        for (l, layer) in self.dec_layers.iter().enumerate() {
            visit_attn(&format!("dec.{l}.self_attn"), &layer.self_attn, &mut g);
            g(format!("dec.{l}.self_gain"), &layer.self_gain);
            visit_attn(&format!("dec.{l}.cross_attn"), &layer.cross_attn, &mut g);
            g(format!("dec.{l}.cross_gain"), &layer.cross_gain);
            g(format!("dec.{l}.mlp.ff_proj"), &layer.mlp.ff_proj);
            g(format!("dec.{l}.mlp.ff_out"), &layer.mlp.ff_out);
            g(format!("dec.{l}.mlp_gain"), &layer.mlp_gain);
        }
        g("unembed".to_string(), &self.unembed);
    }

    /// Visit every weight tensor mutably, in the same canonical order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor2<R>)) {
        let mut g = |name: String, t: &mut Tensor2<R>| f(&name, t);
        g("embed".to_string(), &mut self.embed);
        for (l, layer) in self.enc_layers.iter_mut().enumerate() {
            visit_attn_mut(&format!("enc.{l}.attn"), &mut layer.attn, &mut g);
            g(format!("enc.{l}.attn_gain"), &mut layer.attn_gain);
            g(format!("enc.{l}.mlp.ff_proj"), &mut layer.mlp.ff_proj);
            g(format!("enc.{l}.mlp.ff_out"), &mut layer.mlp.ff_out);
            g(format!("enc.{l}.mlp_gain"), &mut layer.mlp_gain);
        }
        g("enc_final_gain".to_string(), &mut self.enc_final_gain);
        for (l, layer) in self.dec_layers.iter_mut().enumerate() {
            visit_attn_mut(&format!("dec.{l}.self_attn"), &mut layer.self_attn, &mut g);
            g(format!("dec.{l}.self_gain"), &mut layer.self_gain);
            visit_attn_mut(&format!("dec.{l}.cross_attn"), &mut layer.cross_attn, &mut g);
            g(format!("dec.{l}.cross_gain"), &mut layer.cross_gain);
            g(format!("dec.{l}.mlp.ff_proj"), &mut layer.mlp.ff_proj);
            g(format!("dec.{l}.mlp.ff_out"), &mut layer.mlp.ff_out);
            g(format!("dec.{l}.mlp_gain"), &mut layer.mlp_gain);
        }
        g("unembed".to_string(), &mut self.unembed);
    }

    pub fn n_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.as_slice().len());
        n
    }

    pub fn cast<S: Scalar>(&self) -> ModelParams<S> {
        let mut out = ModelParams::<S>::zeros(self.config.clone()).expect("config already valid");
        let mut src: Vec<Tensor2<S>> = Vec::new();
        self.for_each_tensor(|_, t| src.push(t.cast::<S>()));
        let mut i = 0;
        out.for_each_tensor_mut(|_, t| {
            *t = src[i].clone();
            i += 1;
        });
        out
    }

    /// Weight tensors in canonical order.
    pub fn to_flat(&self) -> Vec<Tensor2<R>> {
        let mut out = Vec::new();
        self.for_each_tensor(|_, t| out.push(t.clone()));
        out
    }

    /// Rebuild from canonically ordered tensors (shapes must match).
    pub fn from_flat(config: ModelConfig, tensors: &[Tensor2<R>]) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut i = 0usize;
        let mut err = None;
        params.for_each_tensor_mut(|name, t| {
            if err.is_some() {
                return;
            }
            match tensors.get(i) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(Error::InvalidArgument(format!(
                        "tensor {name}: shape {:?} does not match expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::InvalidArgument("too few tensors".to_string())),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {i} tensors, got {}",
                tensors.len()
            )));
        }
        Ok(params)
    }
}

fn visit_attn<R: Scalar>(
    prefix: &str,
    attn: &AttentionParams<R>,
    f: &mut impl FnMut(String, &Tensor2<R>),
) {
    for (h, t) in attn.w_q.iter().enumerate() {
        f(format!("{prefix}.w_q.{h}"), t);
    }
    for (h, t) in attn.w_k.iter().enumerate() {
        f(format!("{prefix}.w_k.{h}"), t);
    }
    for (h, t) in attn.w_v.iter().enumerate() {
        f(format!("{prefix}.w_v.{h}"), t);
    }
    f(format!("{prefix}.w_o"), &attn.w_o);
}

fn visit_attn_mut<R: Scalar>(
    prefix: &str,
    attn: &mut AttentionParams<R>,
    f: &mut impl FnMut(String, &mut Tensor2<R>),
) {
    for (h, t) in attn.w_q.iter_mut().enumerate() {
        f(format!("{prefix}.w_q.{h}"), t);
    }
    for (h, t) in attn.w_k.iter_mut().enumerate() {
        f(format!("{prefix}.w_k.{h}"), t);
    }
    for (h, t) in attn.w_v.iter_mut().enumerate() {
        f(format!("{prefix}.w_v.{h}"), t);
    }
    f(format!("{prefix}.w_o"), &mut attn.w_o);
}

/// Box-Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fixed sinusoidal positional encodings for `n` positions.
pub fn positional_encoding<R: Scalar>(n: usize, d_model: usize) -> Tensor2<R> {
    Tensor2::from_fn(n, d_model, |pos, j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        R::of_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
