//! Cross-modal fusion and the assembled audiovisual model.
//!
//! Three fusion families sit between (or after) the two branches:
//!
//! - late transformer fusion: one cross-attention transformer block per
//!   branch on the stage-2 outputs, queries from its own branch and
//!   keys/values from the other; pooled outputs are concatenated;
//! - intermediate transformer fusion: the same blocks after stage 1, with
//!   the block output projected back and added to the branch;
//! - intermediate attention fusion: no features cross between branches;
//!   the softmax similarity matrix is collapsed into a per-timestep
//!   attention vector that rescales the key-side branch.
//!
//! Single-direction variants (one cross block, queries from one side) serve
//! as baselines.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::layers::{global_avg_pool, Branch, BranchConfig, LayerNorm, Linear, Modality, Stage};
use crate::params::{Forward, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query/key/value projections of a cross-modal attention.
#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub query: Linear,
    pub key: Linear,
    /// Absent for the attention-vector fusion, which never mixes values.
    pub value: Option<Linear>,
    pub latent_dim: usize,
    pub heads: usize,
}

impl AttentionProjections {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        latent_dim: usize,
        heads: usize,
        with_value: bool,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !latent_dim.is_multiple_of(heads) {
            return Err(Error::invalid(
                "AttentionProjections",
                format!("latent dim {latent_dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(AttentionProjections {
            query: Linear::new(store, &format!("{name}.query"), q_in, latent_dim, bias),
            key: Linear::new(store, &format!("{name}.key"), kv_in, latent_dim, bias),
            value: with_value.then(|| Linear::new(store, &format!("{name}.value"), kv_in, latent_dim, bias)),
            latent_dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }
}

/// `[B, N, h·dh]` to `[B, h, N, dh]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(y, &[0, 2, 1, 3])
}

/// `[B, h, N, dh]` to `[B, N, h·dh]`.
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(y, &[s[0], s[2], s[1] * s[3]])
}

fn check_seq(tape: &Tape, x: Var, dim: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != dim {
        return Err(Error::shape(op, s, &[dim]));
    }
    Ok(())
}

/// Pre-softmax similarity `(Φ_q W_q)(Φ_k W_k)ᵀ / sqrt(d_h)` per head.
///
/// `phi_q` is `[B, N_q, q_in]` and `phi_k` is `[B, N_k, kv_in]`; the result
/// is `[B, h, N_q, N_k]`. With one head `d_h` is the full latent dimension.
pub fn scaled_similarity(f: &mut Forward, proj: &AttentionProjections, phi_q: Var, phi_k: Var) -> Result<Var> {
    check_seq(f.tape, phi_q, proj.query.in_dim, "scaled_similarity (queries)")?;
    check_seq(f.tape, phi_k, proj.key.in_dim, "scaled_similarity (keys)")?;
    if f.tape.shape(phi_q)[0] != f.tape.shape(phi_k)[0] {
        return Err(Error::shape("scaled_similarity", f.tape.shape(phi_q), f.tape.shape(phi_k)));
    }
    let q = proj.query.forward(f, phi_q)?;
    let k = proj.key.forward(f, phi_k)?;
    let q = split_heads(f.tape, q, proj.heads)?;
    let k = split_heads(f.tape, k, proj.heads)?;
    let kt = f.tape.transpose_last(k)?;
    let s = f.tape.matmul(q, kt)?;
    Ok(f.tape.scale(s, 1.0 / libm::sqrt(proj.head_dim() as f64)))
}

/// Collapses a similarity matrix `[..., N_q, N_k]` into per-key weights
/// `[..., N_k]`: softmax over keys, summed over queries, scaled by
/// `N_k / N_q` so the weights average exactly one.
///
/// A similarity matrix that is constant along each row (in particular the
/// all-zero one) gives weights of exactly one.
pub fn attention_vector(tape: &mut Tape, s: Var) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    let r = shape.len();
    if r < 2 || shape[r - 2] == 0 {
        return Err(Error::shape("attention_vector", &shape, &[]));
    }
    let (nq, nk) = (shape[r - 2], shape[r - 1]);
    let a = tape.softmax(s, r - 1)?;
    let cols = tape.sum_axis(a, r - 2)?;
    Ok(tape.scale(cols, nk as f64 / nq as f64))
}

/// Multi-head cross-attention with an output projection.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub proj: AttentionProjections,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        latent_dim: usize,
        heads: usize,
        qkv_bias: bool,
    ) -> Result<Self> {
        let proj = AttentionProjections::new(store, name, q_in, kv_in, latent_dim, heads, true, qkv_bias)?;
        let out = Linear::new(store, &format!("{name}.out"), latent_dim, latent_dim, true);
        Ok(CrossAttention { proj, out })
    }

    /// `softmax(S)·(Φ_kv W_v)` per head, heads concatenated, then projected.
    /// Output is `[B, N_q, d]`.
    pub fn forward(&self, f: &mut Forward, phi_q: Var, phi_kv: Var) -> Result<Var> {
        let s = scaled_similarity(f, &self.proj, phi_q, phi_kv)?;
        let a = f.tape.softmax(s, 3)?;
        let v = self
            .proj
            .value
            .as_ref()
            .expect("cross attention always has a value projection")
            .forward(f, phi_kv)?;
        let v = split_heads(f.tape, v, self.proj.heads)?;
        let ctx = f.tape.matmul(a, v)?;
        let ctx = merge_heads(f.tape, ctx)?;
        self.out.forward(f, ctx)
    }
}

/// Post-norm cross-attention transformer block.
///
/// `y1 = LN(R(Φ_q) + Attn(Φ_q, Φ_kv))`, `y2 = LN(y1 + FF(y1))`, where `R`
/// projects the queries to the latent width when it differs and `FF` is a
/// two-layer ReLU network.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub residual: Option<Linear>,
    pub attn: CrossAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        latent_dim: usize,
        heads: usize,
        ff_hidden: usize,
        qkv_bias: bool,
    ) -> Result<Self> {
        let residual =
            (q_in != latent_dim).then(|| Linear::new(store, &format!("{name}.residual"), q_in, latent_dim, false));
        let attn = CrossAttention::new(store, &format!("{name}.attn"), q_in, kv_in, latent_dim, heads, qkv_bias)?;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), latent_dim);
        let ff1 = Linear::new(store, &format!("{name}.ff1"), latent_dim, ff_hidden, true);
        let ff2 = Linear::new(store, &format!("{name}.ff2"), ff_hidden, latent_dim, true);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), latent_dim);
        Ok(TransformerBlock {
            residual,
            attn,
            norm1,
            ff1,
            ff2,
            norm2,
        })
    }

    pub fn forward(&self, f: &mut Forward, phi_q: Var, phi_kv: Var) -> Result<Var> {
        let att = self.attn.forward(f, phi_q, phi_kv)?;
        let res = match &self.residual {
            Some(r) => r.forward(f, phi_q)?,
            None => phi_q,
        };
        let y = f.tape.add(res, att)?;
        let y1 = self.norm1.forward(f, y)?;
        let h = self.ff1.forward(f, y1)?;
        let h = f.tape.relu(h);
        let h = self.ff2.forward(f, h)?;
        let y = f.tape.add(y1, h)?;
        self.norm2.forward(f, y)
    }
}

/// Output of [`intermediate_attention_fuse`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionFused {
    pub audio: Var,
    pub vision: Var,
    /// Per-timestep audio weights `[B, N_a]`.
    pub audio_weights: Var,
    /// Per-timestep vision weights `[B, N_v]`.
    pub vision_weights: Var,
}

fn head_averaged_weights(f: &mut Forward, proj: &AttentionProjections, q: Var, k: Var) -> Result<Var> {
    let s = scaled_similarity(f, proj, q, k)?;
    let v = attention_vector(f.tape, s)?;
    f.tape.mean_axis(v, 1)
}

/// Attention-vector fusion of stage-1 features.
///
/// Audio queries against vision keys weight the vision timesteps and vice
/// versa; each branch is only rescaled per timestep, never mixed with the
/// other's features.
pub fn intermediate_attention_fuse(
    f: &mut Forward,
    phi_a: Var,
    phi_v: Var,
    proj_av: &AttentionProjections,
    proj_va: &AttentionProjections,
) -> Result<AttentionFused> {
    let vision_weights = head_averaged_weights(f, proj_av, phi_a, phi_v)?;
    let audio_weights = head_averaged_weights(f, proj_va, phi_v, phi_a)?;
    let vision = f.tape.mul_rows(phi_v, vision_weights)?;
    let audio = f.tape.mul_rows(phi_a, audio_weights)?;
    Ok(AttentionFused {
        audio,
        vision,
        audio_weights,
        vision_weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    LateTransformer,
    IntermediateTransformer,
    IntermediateAttention,
    /// Audio fused into vision: vision queries, audio keys/values.
    SingleDirectionAV,
    /// Vision fused into audio: audio queries, vision keys/values.
    SingleDirectionVA,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::LateTransformer,
        FusionKind::IntermediateTransformer,
        FusionKind::IntermediateAttention,
        FusionKind::SingleDirectionAV,
        FusionKind::SingleDirectionVA,
    ];

    pub fn code(self) -> &'static str {
        match self {
            FusionKind::LateTransformer => "LT",
            FusionKind::IntermediateTransformer => "IT",
            FusionKind::IntermediateAttention => "IA",
            FusionKind::SingleDirectionAV => "TAV",
            FusionKind::SingleDirectionVA => "TVA",
        }
    }

    pub fn parse(s: &str) -> Option<FusionKind> {
        Self::ALL.into_iter().find(|k| k.code().eq_ignore_ascii_case(s))
    }

    /// Table-style label such as `IA4`; single-direction baselines carry no
    /// head suffix.
    pub fn label(self, heads: usize) -> String {
        match self {
            FusionKind::SingleDirectionAV | FusionKind::SingleDirectionVA => String::from(self.code()),
            _ => format!("{}{}", self.code(), heads),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    Classification { classes: usize },
    /// Scalar sentiment-style score.
    Regression,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub vision_dim: usize,
    pub fusion: FusionKind,
    pub heads: usize,
    pub latent_dim: usize,
    pub ff_hidden: usize,
    pub task: Task,
    /// Bias terms on the query/key/value projections.
    pub qkv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_dim: 74,
            vision_dim: 35,
            fusion: FusionKind::IntermediateAttention,
            heads: 1,
            latent_dim: 64,
            ff_hidden: 128,
            task: Task::Classification { classes: 7 },
            qkv_bias: false,
        }
    }
}

#[derive(Clone, Debug)]
enum FusionLayers {
    Late {
        audio_block: TransformerBlock,
        vision_block: TransformerBlock,
    },
    IntermediateTransformer {
        audio_block: TransformerBlock,
        vision_block: TransformerBlock,
        audio_back: Linear,
        vision_back: Linear,
    },
    IntermediateAttention {
        av: AttentionProjections,
        va: AttentionProjections,
    },
    Single {
        block: TransformerBlock,
        queries: Modality,
    },
}

/// Intermediate results of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, outputs]` logits or scores.
    pub output: Var,
    pub audio_stage1: Var,
    pub vision_stage1: Var,
    /// Pooled audio features fed to the head, when the head sees them.
    pub audio_pooled: Option<Var>,
    pub vision_pooled: Option<Var>,
    /// Attention-vector fusion weights.
    pub fused: Option<AttentionFused>,
}

/// Two branches, a fusion mechanism and a linear prediction head.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub audio: Branch,
    pub vision: Branch,
    fusion: FusionLayers,
    pub head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.audio_dim == 0 || config.vision_dim == 0 || config.task.outputs() == 0 {
            return Err(Error::invalid("Model::new", "dimensions must be positive"));
        }
        let mut params = ParamStore::new(seed);
        let audio = Branch::new(&mut params, "audio", BranchConfig::audio(config.audio_dim))?;
        let vision = Branch::new(&mut params, "vision", BranchConfig::vision(config.vision_dim))?;
        let (a1, v1) = (audio.config.stage1_channels(), vision.config.stage1_channels());
        let (a2, v2) = (audio.config.stage2_channels(), vision.config.stage2_channels());
        let (d, h, ff, bias) = (config.latent_dim, config.heads, config.ff_hidden, config.qkv_bias);
        let (fusion, head_in) = match config.fusion {
            FusionKind::LateTransformer => (
                FusionLayers::Late {
                    audio_block: TransformerBlock::new(&mut params, "fusion.audio_block", a2, v2, d, h, ff, bias)?,
                    vision_block: TransformerBlock::new(&mut params, "fusion.vision_block", v2, a2, d, h, ff, bias)?,
                },
                2 * d,
            ),
            FusionKind::IntermediateTransformer => (
                FusionLayers::IntermediateTransformer {
                    audio_block: TransformerBlock::new(&mut params, "fusion.audio_block", a1, v1, d, h, ff, bias)?,
                    vision_block: TransformerBlock::new(&mut params, "fusion.vision_block", v1, a1, d, h, ff, bias)?,
                    audio_back: Linear::new(&mut params, "fusion.audio_back", d, a1, true),
                    vision_back: Linear::new(&mut params, "fusion.vision_back", d, v1, true),
                },
                a2 + v2,
            ),
            FusionKind::IntermediateAttention => (
                FusionLayers::IntermediateAttention {
                    av: AttentionProjections::new(&mut params, "fusion.av", a1, v1, d, h, false, bias)?,
                    va: AttentionProjections::new(&mut params, "fusion.va", v1, a1, d, h, false, bias)?,
                },
                a2 + v2,
            ),
            FusionKind::SingleDirectionAV | FusionKind::SingleDirectionVA => {
                let queries = if config.fusion == FusionKind::SingleDirectionAV {
                    Modality::Vision
                } else {
                    Modality::Audio
                };
                let (q_in, kv_in) = match queries {
                    Modality::Vision => (v2, a2),
                    Modality::Audio => (a2, v2),
                };
                (
                    FusionLayers::Single {
                        block: TransformerBlock::new(&mut params, "fusion.block", q_in, kv_in, d, h, ff, bias)?,
                        queries,
                    },
                    d,
                )
            }
        };
        let head = Linear::new(&mut params, "head", head_in, config.task.outputs(), true);
        Ok(Model {
            config,
            params,
            audio,
            vision,
            fusion,
            head,
        })
    }

    /// Full forward pass on batched inputs `audio: [B, N_a, d_a]`,
    /// `vision: [B, N_v, d_v]`.
    pub fn forward(&self, f: &mut Forward, audio: Var, vision: Var) -> Result<ModelOutput> {
        let ab = f.tape.shape(audio).first().copied();
        let vb = f.tape.shape(vision).first().copied();
        if ab != vb {
            return Err(Error::shape("model batch", f.tape.shape(audio), f.tape.shape(vision)));
        }
        let a1 = self.audio.forward(f, audio, Stage::First)?;
        let v1 = self.vision.forward(f, vision, Stage::First)?;
        let mut fused = None;
        let (features, audio_pooled, vision_pooled) = match &self.fusion {
            FusionLayers::Late {
                audio_block,
                vision_block,
            } => {
                let a2 = self.audio.forward(f, a1, Stage::Second)?;
                let v2 = self.vision.forward(f, v1, Stage::Second)?;
                let ya = audio_block.forward(f, a2, v2)?;
                let yv = vision_block.forward(f, v2, a2)?;
                let pa = global_avg_pool(f, ya)?;
                let pv = global_avg_pool(f, yv)?;
                (f.tape.concat(&[pa, pv], 1)?, Some(pa), Some(pv))
            }
            FusionLayers::IntermediateTransformer {
                audio_block,
                vision_block,
                audio_back,
                vision_back,
            } => {
                let ya = audio_block.forward(f, a1, v1)?;
                let yv = vision_block.forward(f, v1, a1)?;
                let ya = audio_back.forward(f, ya)?;
                let yv = vision_back.forward(f, yv)?;
                let a1f = f.tape.add(a1, ya)?;
                let v1f = f.tape.add(v1, yv)?;
                let a2 = self.audio.forward(f, a1f, Stage::Second)?;
                let v2 = self.vision.forward(f, v1f, Stage::Second)?;
                let pa = global_avg_pool(f, a2)?;
                let pv = global_avg_pool(f, v2)?;
                (f.tape.concat(&[pa, pv], 1)?, Some(pa), Some(pv))
            }
            FusionLayers::IntermediateAttention { av, va } => {
                let fz = intermediate_attention_fuse(f, a1, v1, av, va)?;
                fused = Some(fz);
                let a2 = self.audio.forward(f, fz.audio, Stage::Second)?;
                let v2 = self.vision.forward(f, fz.vision, Stage::Second)?;
                let pa = global_avg_pool(f, a2)?;
                let pv = global_avg_pool(f, v2)?;
                (f.tape.concat(&[pa, pv], 1)?, Some(pa), Some(pv))
            }
            FusionLayers::Single { block, queries } => {
                let a2 = self.audio.forward(f, a1, Stage::Second)?;
                let v2 = self.vision.forward(f, v1, Stage::Second)?;
                let (q, kv) = match queries {
                    Modality::Vision => (v2, a2),
                    Modality::Audio => (a2, v2),
                };
                let y = block.forward(f, q, kv)?;
                (global_avg_pool(f, y)?, None, None)
            }
        };
        let output = self.head.forward(f, features)?;
        Ok(ModelOutput {
            output,
            audio_stage1: a1,
            vision_stage1: v1,
            audio_pooled,
            vision_pooled,
            fused,
        })
    }

    /// Evaluation-mode prediction without gradient tracking.
    pub fn predict(&self, audio: &Tensor, vision: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &self.params, false, false);
        let a = f.tape.constant(audio.clone());
        let v = f.tape.constant(vision.clone());
        let out = self.forward(&mut f, a, v)?;
        Ok(f.tape.value(out.output).clone())
    }

    pub fn num_outputs(&self) -> usize {
        self.config.task.outputs()
    }
}
