//! Dual-stream decoder.
//!
//! One stream refines event queries against coarse audio features (masked
//! self-attention, cross-attention, FFN) and scores clip-level presence;
//! the other models temporal context over the fused frame sequence with
//! Conformer blocks. Frame-level probability factorizes as
//! sigmoid(z_t . c_i) * y_cl_i, which guarantees frame <= clip.

use std::sync::Arc;
use thiserror::Error;

use rand::Rng;

use crate::encoder::{
    attention_proj, coarse_encode, encode, ffn_forward, layer_norm_forward, p,
    register_attention, register_ffn, register_layer_norm, sinusoidal_pe, EncoderConfig,
    EncoderError,
};
use crate::numerics::{
    multi_head_attention, AttnMask, Graph, NodeId, NumericsError, ParamGroup, ParamSet,
};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("decoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Query attention policy. Base rows never attend novel columns at
/// inference time, so novel queries cannot disturb base predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    TrainNoMask,
    BaseInvisibleToNovel,
    BaseVisibleToNovel,
}

#[derive(Clone, Debug)]
pub struct QueryAttentionMask {
    pub allowed: Arc<AttnMask>,
    pub strategy: MaskStrategy,
    pub n_base: usize,
    pub n_novel: usize,
}

/// Builds the [N x N] query-to-query visibility mask for a strategy.
pub fn build_mask(n_base: usize, n_novel: usize, strategy: MaskStrategy) -> QueryAttentionMask {
    let n = n_base + n_novel;
    let allow = match strategy {
        MaskStrategy::TrainNoMask => AttnMask::all_visible(n, n),
        MaskStrategy::BaseInvisibleToNovel => AttnMask::from_fn(n, n, |r, c| {
            (r < n_base) == (c < n_base)
        }),
        MaskStrategy::BaseVisibleToNovel => AttnMask::from_fn(n, n, |r, c| {
            r >= n_base || c < n_base
        }),
    };
    QueryAttentionMask {
        allowed: Arc::new(allow),
        strategy,
        n_base,
        n_novel,
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub event_blocks: usize,
    pub context_blocks: usize,
    /// Depthwise kernel width in the Conformer convolution module; odd.
    pub conv_kernel: usize,
    /// Add sinusoidal positions to cross-attention keys.
    pub pe_on_cross_keys: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 384,
            heads: 4,
            event_blocks: 2,
            context_blocks: 2,
            conv_kernel: 7,
            pe_on_cross_keys: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DecoderError::Config(format!(
                "{} heads over dim {}",
                self.heads, self.dim
            )));
        }
        if self.event_blocks == 0 || self.context_blocks == 0 {
            return Err(DecoderError::Config("need at least one block per stream".into()));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(DecoderError::Config(format!(
                "conv kernel {} must be odd",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

pub fn register_decoder_params(
    cfg: &DecoderConfig,
    ps: &mut ParamSet,
    rng: &mut impl Rng,
) -> Result<(), DecoderError> {
    cfg.validate()?;
    let d = cfg.dim;
    let grp = ParamGroup::Head;

    for i in 0..cfg.event_blocks {
        let pre = format!("dec.event.block{i}");
        register_attention(ps, &format!("{pre}.self"), d, grp, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln1"), d, grp)?;
        register_attention(ps, &format!("{pre}.cross"), d, grp, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln2"), d, grp)?;
        register_ffn(ps, &format!("{pre}.ffn"), d, d, grp, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln3"), d, grp)?;
    }

    // clip head: 2-layer MLP -> scalar logit
    ps.add_xavier("dec.clip.w1", &[d, d], d, d, grp, rng)?;
    ps.add_zeros("dec.clip.b1", &[d], grp)?;
    ps.add_xavier("dec.clip.w2", &[d, 1], d, 1, grp, rng)?;
    ps.add_zeros("dec.clip.b2", &[1], grp)?;

    // map head: 3-layer MLP -> classifier vector
    for l in 1..=3 {
        ps.add_xavier(format!("dec.map.w{l}"), &[d, d], d, d, grp, rng)?;
        ps.add_zeros(format!("dec.map.b{l}"), &[d], grp)?;
    }

    for i in 0..cfg.context_blocks {
        let pre = format!("dec.ctx.block{i}");
        register_layer_norm(ps, &format!("{pre}.ln_ffn1"), d, grp)?;
        register_ffn(ps, &format!("{pre}.ffn1"), d, d, grp, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln_attn"), d, grp)?;
        register_attention(ps, &format!("{pre}.attn"), d, grp, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln_conv"), d, grp)?;
        ps.add_xavier(format!("{pre}.conv.pw1_w"), &[d, 2 * d], d, 2 * d, grp, rng)?;
        ps.add_zeros(format!("{pre}.conv.pw1_b"), &[2 * d], grp)?;
        ps.add_xavier(
            format!("{pre}.conv.dw_w"),
            &[cfg.conv_kernel, d],
            cfg.conv_kernel,
            cfg.conv_kernel,
            grp,
            rng,
        )?;
        ps.add_zeros(format!("{pre}.conv.dw_b"), &[d], grp)?;
        register_layer_norm(ps, &format!("{pre}.conv.ln_mid"), d, grp)?;
        ps.add_xavier(format!("{pre}.conv.pw2_w"), &[d, d], d, d, grp, rng)?;
        ps.add_zeros(format!("{pre}.conv.pw2_b"), &[d], grp)?;
        register_layer_norm(ps, &format!("{pre}.ln_ffn2"), d, grp)?;
        register_ffn(ps, &format!("{pre}.ffn2"), d, d, grp, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln_final"), d, grp)?;
    }
    Ok(())
}

/// Refines queries against coarse features: per block, masked query
/// self-attention, cross-attention over the coarse sequence, and an FFN,
/// each with residual + layer norm. Row order is preserved.
pub fn event_decoder_forward(
    g: &mut Graph,
    ps: &ParamSet,
    queries: NodeId,
    coarse: NodeId,
    mask: &QueryAttentionMask,
    cfg: &DecoderConfig,
) -> Result<NodeId, DecoderError> {
    let n = g.shape(queries)[0];
    let d = g.shape(queries)[1];
    if d != cfg.dim || g.shape(coarse)[1] != cfg.dim {
        return Err(DecoderError::Config(format!(
            "queries {:?} / coarse {:?} vs dim {}",
            g.shape(queries),
            g.shape(coarse),
            cfg.dim
        )));
    }
    if mask.allowed.rows != n {
        return Err(DecoderError::Config(format!(
            "mask is {}x{}, queries {n}",
            mask.allowed.rows, mask.allowed.cols
        )));
    }

    let t_c = g.shape(coarse)[0];
    let keys = if cfg.pe_on_cross_keys {
        let pe = g.constant(sinusoidal_pe(t_c, cfg.dim));
        g.add(coarse, pe)?
    } else {
        coarse
    };

    let mut x = queries;
    for i in 0..cfg.event_blocks {
        let pre = format!("dec.event.block{i}");
        let sp = attention_proj(g, ps, &format!("{pre}.self"))?;
        let a = multi_head_attention(g, x, x, x, cfg.heads, Some(mask.allowed.clone()), &sp)?;
        let res = g.add(x, a)?;
        x = layer_norm_forward(g, ps, &format!("{pre}.ln1"), res)?;

        let cp = attention_proj(g, ps, &format!("{pre}.cross"))?;
        let c = multi_head_attention(g, x, keys, coarse, cfg.heads, None, &cp)?;
        let res = g.add(x, c)?;
        x = layer_norm_forward(g, ps, &format!("{pre}.ln2"), res)?;

        let f = ffn_forward(g, ps, &format!("{pre}.ffn"), x)?;
        let res = g.add(x, f)?;
        x = layer_norm_forward(g, ps, &format!("{pre}.ln3"), res)?;
    }
    Ok(x)
}

/// Clip-presence scores: sigmoid of a 2-layer MLP, one score per query.
pub fn clip_head(g: &mut Graph, ps: &ParamSet, refined: NodeId) -> Result<NodeId, DecoderError> {
    let n = g.shape(refined)[0];
    let w1 = p(g, ps, "dec.clip.w1")?;
    let b1 = p(g, ps, "dec.clip.b1")?;
    let w2 = p(g, ps, "dec.clip.w2")?;
    let b2 = p(g, ps, "dec.clip.b2")?;
    let h = g.matmul(refined, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let logit = g.matmul(h, w2)?;
    let logit = g.add_row(logit, b2)?;
    let y = g.sigmoid(logit);
    Ok(g.reshape(y, &[n])?)
}

/// Classifier vectors: 3-layer MLP applied per refined query row.
pub fn map_head(g: &mut Graph, ps: &ParamSet, refined: NodeId) -> Result<NodeId, DecoderError> {
    let mut x = refined;
    for l in 1..=3 {
        let w = p(g, ps, &format!("dec.map.w{l}"))?;
        let b = p(g, ps, &format!("dec.map.b{l}"))?;
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
        if l < 3 {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

fn conformer_conv_module(
    g: &mut Graph,
    ps: &ParamSet,
    pre: &str,
    x: NodeId,
    dim: usize,
) -> Result<NodeId, DecoderError> {
    let pw1_w = p(g, ps, &format!("{pre}.conv.pw1_w"))?;
    let pw1_b = p(g, ps, &format!("{pre}.conv.pw1_b"))?;
    let h = g.matmul(x, pw1_w)?;
    let h = g.add_row(h, pw1_b)?;
    // GLU: first half gated by sigmoid of second half
    let a = g.slice_cols(h, 0, dim)?;
    let b = g.slice_cols(h, dim, 2 * dim)?;
    let gate = g.sigmoid(b);
    let gated = g.mul(a, gate)?;

    let dw_w = p(g, ps, &format!("{pre}.conv.dw_w"))?;
    let dw_b = p(g, ps, &format!("{pre}.conv.dw_b"))?;
    let conv = g.depthwise_conv1d(gated, dw_w, dw_b)?;
    let normed = layer_norm_forward(g, ps, &format!("{pre}.conv.ln_mid"), conv)?;
    let act = g.swish(normed);

    let pw2_w = p(g, ps, &format!("{pre}.conv.pw2_w"))?;
    let pw2_b = p(g, ps, &format!("{pre}.conv.pw2_b"))?;
    let out = g.matmul(act, pw2_w)?;
    Ok(g.add_row(out, pw2_b)?)
}

/// Temporal context stream: Conformer blocks (half-step FFN, self-attention,
/// convolution module, half-step FFN, final norm), shape preserving.
///
/// `attention_enabled` exists for locality tests; production passes true.
pub fn context_forward(
    g: &mut Graph,
    ps: &ParamSet,
    e: NodeId,
    cfg: &DecoderConfig,
    attention_enabled: bool,
) -> Result<NodeId, DecoderError> {
    if g.shape(e)[1] != cfg.dim {
        return Err(DecoderError::Config(format!(
            "context input {:?} vs dim {}",
            g.shape(e),
            cfg.dim
        )));
    }
    let mut x = e;
    for i in 0..cfg.context_blocks {
        let pre = format!("dec.ctx.block{i}");

        let n1 = layer_norm_forward(g, ps, &format!("{pre}.ln_ffn1"), x)?;
        let f1 = ffn_forward(g, ps, &format!("{pre}.ffn1"), n1)?;
        let f1h = g.scale(f1, 0.5);
        x = g.add(x, f1h)?;

        if attention_enabled {
            let na = layer_norm_forward(g, ps, &format!("{pre}.ln_attn"), x)?;
            let proj = attention_proj(g, ps, &format!("{pre}.attn"))?;
            let a = multi_head_attention(g, na, na, na, cfg.heads, None, &proj)?;
            x = g.add(x, a)?;
        }

        let nc = layer_norm_forward(g, ps, &format!("{pre}.ln_conv"), x)?;
        let c = conformer_conv_module(g, ps, &pre, nc, cfg.dim)?;
        x = g.add(x, c)?;

        let n2 = layer_norm_forward(g, ps, &format!("{pre}.ln_ffn2"), x)?;
        let f2 = ffn_forward(g, ps, &format!("{pre}.ffn2"), n2)?;
        let f2h = g.scale(f2, 0.5);
        x = g.add(x, f2h)?;

        x = layer_norm_forward(g, ps, &format!("{pre}.ln_final"), x)?;
    }
    Ok(x)
}

/// Factorized frame probability: sigmoid(Z C^T) scaled per class by the
/// clip prior. With the prior disabled the conditional alone is returned.
pub fn frame_prediction(
    g: &mut Graph,
    z: NodeId,
    classifiers: NodeId,
    y_clip: NodeId,
    use_clip_prior: bool,
) -> Result<NodeId, DecoderError> {
    let logits = g.matmul_tb(z, classifiers)?;
    let cond = g.sigmoid(logits);
    if use_clip_prior {
        Ok(g.mul_row(cond, y_clip)?)
    } else {
        Ok(cond)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Replace the event decoder with cosine matching of raw queries.
    pub no_event_decoder: bool,
    /// Bypass the context stream (Z := E).
    pub no_context: bool,
    /// Drop the clip prior from the frame factorization.
    pub no_clip_prior: bool,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim != self.decoder.dim {
            return Err(DecoderError::Config(format!(
                "encoder dim {} != decoder dim {}",
                self.encoder.dim, self.decoder.dim
            )));
        }
        Ok(())
    }
}

pub fn register_model_params(
    cfg: &ModelConfig,
    ps: &mut ParamSet,
    rng: &mut impl Rng,
) -> Result<(), DecoderError> {
    cfg.validate()?;
    crate::encoder::register_encoder_params(&cfg.encoder, ps, rng)?;
    register_decoder_params(&cfg.decoder, ps, rng)?;
    Ok(())
}

/// Cosine-similarity temperature for the no-event-decoder ablation.
const COSINE_TEMPERATURE: f64 = 0.07;

fn row_normalize(g: &mut Graph, x: NodeId) -> Result<NodeId, DecoderError> {
    let rows = g.shape(x)[0];
    let sq = g.mul(x, x)?;
    let ones = g.constant(crate::numerics::Tensor::filled(&[g.shape(x)[1], 1], 1.0));
    let sumsq = g.matmul(sq, ones)?;
    let eps = g.add_const(sumsq, 1e-12);
    let inv = g.pow_const(eps, -0.5);
    let inv_flat = g.reshape(inv, &[rows])?;
    let xt = g.transpose(x)?;
    let scaled = g.mul_row(xt, inv_flat)?;
    Ok(g.transpose(scaled)?)
}

/// Graph handles for one full forward pass.
pub struct PredictionNodes {
    pub clip: NodeId,
    pub frame: NodeId,
    pub t: usize,
    pub n: usize,
}

/// Full forward pass over one clip: encoder, event decoder + heads,
/// context stream, and the factorized frame prediction.
pub fn detector_forward(
    g: &mut Graph,
    ps: &ParamSet,
    mel: NodeId,
    queries: NodeId,
    mask: &QueryAttentionMask,
    cfg: &ModelConfig,
) -> Result<PredictionNodes, DecoderError> {
    cfg.validate()?;
    let n = g.shape(queries)[0];

    if cfg.ablation.no_event_decoder {
        // CLAP-style matching: frame score from cosine similarity of the
        // context features and raw queries; clip score by max pooling.
        let coarse = coarse_encode(g, ps, mel, &cfg.encoder)?;
        let _ = coarse; // coarse path unused without the event decoder
        let enc = encode(g, ps, mel, &cfg.encoder)?;
        let z = if cfg.ablation.no_context {
            enc.fused
        } else {
            context_forward(g, ps, enc.fused, &cfg.decoder, true)?
        };
        let zn = row_normalize(g, z)?;
        let qn = row_normalize(g, queries)?;
        let cos = g.matmul_tb(zn, qn)?;
        let logits = g.scale(cos, 1.0 / COSINE_TEMPERATURE);
        let frame = g.sigmoid(logits);
        let clip = g.max_over_rows(frame)?;
        return Ok(PredictionNodes {
            clip,
            frame,
            t: g.shape(frame)[0],
            n,
        });
    }

    let enc = encode(g, ps, mel, &cfg.encoder)?;
    let refined = event_decoder_forward(g, ps, queries, enc.coarse, mask, &cfg.decoder)?;
    let y_clip = clip_head(g, ps, refined)?;
    let classifiers = map_head(g, ps, refined)?;
    let z = if cfg.ablation.no_context {
        enc.fused
    } else {
        context_forward(g, ps, enc.fused, &cfg.decoder, true)?
    };
    let frame = frame_prediction(g, z, classifiers, y_clip, !cfg.ablation.no_clip_prior)?;
    Ok(PredictionNodes {
        clip: y_clip,
        frame,
        t: g.shape(frame)[0],
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOpts, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_to_grid(m: &QueryAttentionMask) -> Vec<Vec<u8>> {
        (0..m.allowed.rows)
            .map(|r| {
                (0..m.allowed.cols)
                    .map(|c| m.allowed.allows(r, c) as u8)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn mask_matches_strategy_definitions() {
        let vis = build_mask(2, 1, MaskStrategy::BaseVisibleToNovel);
        assert_eq!(mask_to_grid(&vis), [[1, 1, 0], [1, 1, 0], [1, 1, 1]]);

        let invis = build_mask(2, 1, MaskStrategy::BaseInvisibleToNovel);
        assert_eq!(mask_to_grid(&invis), [[1, 1, 0], [1, 1, 0], [0, 0, 1]]);

        for strat in [
            MaskStrategy::TrainNoMask,
            MaskStrategy::BaseInvisibleToNovel,
            MaskStrategy::BaseVisibleToNovel,
        ] {
            let m = build_mask(3, 0, strat);
            assert_eq!(mask_to_grid(&m), [[1, 1, 1], [1, 1, 1], [1, 1, 1]]);
        }
    }

    #[test]
    fn mask_diagonal_is_always_allowed() {
        for strat in [
            MaskStrategy::TrainNoMask,
            MaskStrategy::BaseInvisibleToNovel,
            MaskStrategy::BaseVisibleToNovel,
        ] {
            let m = build_mask(2, 3, strat);
            for i in 0..5 {
                assert!(m.allowed.allows(i, i), "{strat:?} diag {i}");
            }
        }
    }

    fn small_decoder_cfg(dim: usize) -> DecoderConfig {
        DecoderConfig {
            dim,
            heads: 2,
            event_blocks: 2,
            context_blocks: 2,
            conv_kernel: 7,
            pe_on_cross_keys: true,
        }
    }

    fn decoder_params(cfg: &DecoderConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_decoder_params(cfg, &mut ps, &mut rng).unwrap();
        ps
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn event_decoder_keeps_query_shape() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 1);
        let mut g = Graph::new();
        for n in [1usize, 4] {
            let q = g.constant(rand_t(&[n, 8], 2));
            let coarse = g.constant(rand_t(&[5, 8], 3));
            let m = build_mask(n, 0, MaskStrategy::TrainNoMask);
            let out = event_decoder_forward(&mut g, &ps, q, coarse, &m, &cfg).unwrap();
            assert_eq!(g.shape(out), &[n, 8]);
        }
    }

    #[test]
    fn base_rows_ignore_appended_novel_queries() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 4);
        let base = rand_t(&[3, 8], 5);
        let novel = rand_t(&[2, 8], 6);
        let coarse = rand_t(&[4, 8], 7);

        let mut g = Graph::new();
        let qb = g.constant(base.clone());
        let cb = g.constant(coarse.clone());
        let m0 = build_mask(3, 0, MaskStrategy::BaseVisibleToNovel);
        let out_base = event_decoder_forward(&mut g, &ps, qb, cb, &m0, &cfg).unwrap();

        let mut both_vals = base.data().to_vec();
        both_vals.extend_from_slice(novel.data());
        let qall = g.constant(Tensor::from_values(&[5, 8], &both_vals).unwrap());
        let call = g.constant(coarse);
        for strat in [
            MaskStrategy::BaseVisibleToNovel,
            MaskStrategy::BaseInvisibleToNovel,
        ] {
            let m = build_mask(3, 2, strat);
            let out_all = event_decoder_forward(&mut g, &ps, qall, call, &m, &cfg).unwrap();
            for r in 0..3 {
                for c in 0..8 {
                    let d = (g.value(out_base).at2(r, c) - g.value(out_all).at2(r, c)).abs();
                    assert!(d < 1e-6, "{strat:?} row {r} col {c} diff {d}");
                }
            }
        }
    }

    #[test]
    fn permuting_novel_queries_permutes_novel_rows_only() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 8);
        let base = rand_t(&[2, 8], 9);
        let novel = rand_t(&[3, 8], 10);
        let coarse = rand_t(&[4, 8], 11);
        let perm = [2usize, 0, 1];

        let stack = |rows: Vec<&[f64]>| {
            let mut v = Vec::new();
            for r in &rows {
                v.extend_from_slice(r);
            }
            Tensor::from_values(&[rows.len(), 8], &v).unwrap()
        };

        let q1 = stack(vec![
            base.row(0),
            base.row(1),
            novel.row(0),
            novel.row(1),
            novel.row(2),
        ]);
        let q2 = stack(vec![
            base.row(0),
            base.row(1),
            novel.row(perm[0]),
            novel.row(perm[1]),
            novel.row(perm[2]),
        ]);

        let mut g = Graph::new();
        let n1 = g.constant(q1);
        let n2 = g.constant(q2);
        let c = g.constant(coarse);
        let m = build_mask(2, 3, MaskStrategy::BaseVisibleToNovel);
        let o1 = event_decoder_forward(&mut g, &ps, n1, c, &m, &cfg).unwrap();
        let o2 = event_decoder_forward(&mut g, &ps, n2, c, &m, &cfg).unwrap();

        for r in 0..2 {
            for j in 0..8 {
                assert!((g.value(o1).at2(r, j) - g.value(o2).at2(r, j)).abs() < 1e-6);
            }
        }
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let want = g.value(o1).at2(2 + src, j);
                let got = g.value(o2).at2(2 + dst, j);
                assert!((want - got).abs() < 1e-6, "novel {dst} <- {src}");
            }
        }
    }

    #[test]
    fn zeroed_clip_head_outputs_half() {
        let cfg = small_decoder_cfg(8);
        let mut ps = decoder_params(&cfg, 12);
        for name in ["dec.clip.w1", "dec.clip.b1", "dec.clip.w2", "dec.clip.b2"] {
            let id = ps.id(name).unwrap();
            let shape = ps.value(id).shape().to_vec();
            *ps.value_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let q = g.constant(rand_t(&[4, 8], 13));
        let y = clip_head(&mut g, &ps, q).unwrap();
        assert_eq!(g.shape(y), &[4]);
        for i in 0..4 {
            assert_eq!(g.value(y).data()[i], 0.5);
        }
    }

    #[test]
    fn clip_head_outputs_stay_in_open_unit_interval() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 14);
        let mut g = Graph::new();
        let q = g.constant(rand_t(&[6, 8], 15));
        let y = clip_head(&mut g, &ps, q).unwrap();
        for &v in g.value(y).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn map_head_rows_are_independent() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 16);
        let a = rand_t(&[3, 8], 17);
        let mut b = a.clone();
        for j in 0..8 {
            b.data_mut()[1 * 8 + j] += 0.5;
        }
        let mut g = Graph::new();
        let na = g.constant(a);
        let nb = g.constant(b);
        let ca = map_head(&mut g, &ps, na).unwrap();
        let cb = map_head(&mut g, &ps, nb).unwrap();
        assert_eq!(g.shape(ca), &[3, 8]);
        for r in [0usize, 2] {
            for j in 0..8 {
                assert_eq!(g.value(ca).at2(r, j), g.value(cb).at2(r, j), "row {r}");
            }
        }
        let mid_diff: f64 = (0..8)
            .map(|j| (g.value(ca).at2(1, j) - g.value(cb).at2(1, j)).abs())
            .sum();
        assert!(mid_diff > 1e-6);
    }

    #[test]
    fn heads_pass_gradient_check() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 18);
        let q = rand_t(&[3, 8], 19);

        let weights = rand_t(&[3, 8], 20);
        let report = grad_check(
            |params, g| {
                let qn = g.constant(q.clone());
                let c = map_head(g, params, qn).map_err(|_| NumericsError::GradCheck("map".into()))?;
                let wv = g.constant(weights.clone());
                let prod = g.mul(c, wv)?;
                let y = clip_head(g, params, qn).map_err(|_| NumericsError::GradCheck("clip".into()))?;
                let ys = g.sum_all(y);
                let cs = g.sum_all(prod);
                g.add(ys, cs)
            },
            &ps,
            &GradCheckOpts {
                max_coords_per_param: Some(6),
                seed: 21,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn context_preserves_shape_and_passes_gradcheck() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 22);
        let e = rand_t(&[10, 8], 23);
        let mut g = Graph::new();
        let en = g.constant(e.clone());
        let z = context_forward(&mut g, &ps, en, &cfg, true).unwrap();
        assert_eq!(g.shape(z), &[10, 8]);

        let weights = rand_t(&[10, 8], 24);
        let report = grad_check(
            |params, g| {
                let x = g.constant(e.clone());
                let z = context_forward(g, params, x, &cfg, true)
                    .map_err(|_| NumericsError::GradCheck("ctx".into()))?;
                let w = g.constant(weights.clone());
                let prod = g.mul(z, w)?;
                Ok(g.sum_all(prod))
            },
            &ps,
            &GradCheckOpts {
                max_coords_per_param: Some(3),
                seed: 25,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn context_without_attention_is_local_to_conv_radius() {
        let cfg = small_decoder_cfg(8);
        let ps = decoder_params(&cfg, 26);
        let e = rand_t(&[40, 8], 27);
        let mut poked = e.clone();
        let tau = 20usize;
        poked.data_mut()[tau * 8 + 2] += 1.0;

        let mut g = Graph::new();
        let a = g.constant(e);
        let b = g.constant(poked);
        let za = context_forward(&mut g, &ps, a, &cfg, false).unwrap();
        let zb = context_forward(&mut g, &ps, b, &cfg, false).unwrap();

        // two blocks of kernel-7 depthwise conv: radius 3 each
        let radius = cfg.context_blocks * (cfg.conv_kernel / 2);
        for t in 0..40 {
            let diff: f64 = (0..8)
                .map(|j| (g.value(za).at2(t, j) - g.value(zb).at2(t, j)).abs())
                .fold(0.0, f64::max);
            if t + radius < tau || t > tau + radius {
                assert_eq!(diff, 0.0, "leak at frame {t}");
            }
        }
    }

    #[test]
    fn frame_prediction_matches_worked_examples() {
        let mut g = Graph::new();
        // one frame, three classes; z and c chosen to give exact logits
        let z = g.constant(Tensor::from_values(&[1, 1], &[1.0]).unwrap());
        let c = g.constant(
            Tensor::from_values(&[3, 1], &[3f64.ln(), 0.0, 5.0]).unwrap(),
        );
        let y = g.constant(Tensor::from_values(&[3], &[0.8, 1.0, 0.0]).unwrap());
        let out = frame_prediction(&mut g, z, c, y, true).unwrap();
        let v = g.value(out);
        assert!((v.at2(0, 0) - 0.6).abs() < 1e-6, "sigmoid(ln 3) * 0.8");
        assert!((v.at2(0, 1) - 0.5).abs() < 1e-12, "sigmoid(0) * 1");
        assert_eq!(v.at2(0, 2), 0.0, "zero clip prior zeroes the column");
    }

    #[test]
    fn frame_is_monotone_in_clip_prior() {
        let mut g = Graph::new();
        let z = g.constant(rand_t(&[4, 6], 28));
        let c = g.constant(rand_t(&[3, 6], 29));
        let y_lo = g.constant(Tensor::from_values(&[3], &[0.2, 0.5, 0.9]).unwrap());
        let y_hi = g.constant(Tensor::from_values(&[3], &[0.3, 0.5, 1.0]).unwrap());
        let f_lo = frame_prediction(&mut g, z, c, y_lo, true).unwrap();
        let f_hi = frame_prediction(&mut g, z, c, y_hi, true).unwrap();
        for t in 0..4 {
            for i in 0..3 {
                assert!(g.value(f_lo).at2(t, i) <= g.value(f_hi).at2(t, i) + 1e-15);
            }
        }
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                mel_bins: 8,
                dim: 32,
                heads: 2,
                fine_blocks: 2,
                coarse_blocks: 1,
                patch_time: 8,
                upsample_factor: 4,
                mel_fps: 100.0,
            },
            decoder: small_decoder_cfg(32),
            ablation: AblationConfig::default(),
        }
    }

    fn model_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_model_params(cfg, &mut ps, &mut rng).unwrap();
        ps
    }

    #[test]
    fn full_forward_shapes_and_clip_bound() {
        let cfg = tiny_model_cfg();
        let ps = model_params(&cfg, 30);
        let mel = rand_t(&[32, 8], 31);
        let queries = rand_t(&[3, 32], 32);
        let mask = build_mask(2, 1, MaskStrategy::BaseVisibleToNovel);

        let mut g = Graph::new();
        let m = g.constant(mel);
        let q = g.constant(queries);
        let out = detector_forward(&mut g, &ps, m, q, &mask, &cfg).unwrap();
        assert_eq!(g.shape(out.clip), &[3]);
        assert_eq!(g.shape(out.frame), &[16, 3]);
        for i in 0..3 {
            let clip = g.value(out.clip).data()[i];
            assert!((0.0..=1.0).contains(&clip));
            for t in 0..16 {
                let fr = g.value(out.frame).at2(t, i);
                assert!(fr <= clip + 1e-12, "frame {t} class {i}: {fr} > {clip}");
                assert!((0.0..=1.0).contains(&fr));
            }
        }
    }

    #[test]
    fn no_clip_prior_can_exceed_clip_score() {
        let mut cfg = tiny_model_cfg();
        cfg.ablation.no_clip_prior = true;
        let ps = model_params(&cfg, 33);
        let mel = rand_t(&[32, 8], 34);
        let queries = rand_t(&[3, 32], 35);
        let mask = build_mask(3, 0, MaskStrategy::TrainNoMask);

        let mut g = Graph::new();
        let m = g.constant(mel);
        let q = g.constant(queries);
        let out = detector_forward(&mut g, &ps, m, q, &mask, &cfg).unwrap();
        let mut exceeded = false;
        for i in 0..3 {
            let clip = g.value(out.clip).data()[i];
            for t in 0..16 {
                if g.value(out.frame).at2(t, i) > clip {
                    exceeded = true;
                }
            }
        }
        assert!(exceeded, "without the prior some frame should exceed its clip score");
    }

    #[test]
    fn ablations_run_and_differ_from_default() {
        let base_cfg = tiny_model_cfg();
        let ps = model_params(&base_cfg, 36);
        let mel = rand_t(&[32, 8], 37);
        let queries = rand_t(&[2, 32], 38);
        let mask = build_mask(2, 0, MaskStrategy::TrainNoMask);

        let run = |cfg: &ModelConfig| {
            let mut g = Graph::new();
            let m = g.constant(mel.clone());
            let q = g.constant(queries.clone());
            let out = detector_forward(&mut g, &ps, m, q, mask_ref(&mask), cfg).unwrap();
            (
                g.value(out.frame).clone(),
                g.value(out.clip).clone(),
            )
        };
        fn mask_ref(m: &QueryAttentionMask) -> &QueryAttentionMask {
            m
        }

        let (f0, _) = run(&base_cfg);
        for flip in ["ctx", "evdec"] {
            let mut cfg = base_cfg.clone();
            match flip {
                "ctx" => cfg.ablation.no_context = true,
                _ => cfg.ablation.no_event_decoder = true,
            }
            let (f1, c1) = run(&cfg);
            assert!(f1.all_finite() && c1.all_finite());
            assert!(f0.max_abs_diff(&f1) > 1e-9, "{flip} changed nothing");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_model_cfg();
        let ps = model_params(&cfg, 39);
        let mel = rand_t(&[32, 8], 40);
        let queries = rand_t(&[2, 32], 41);
        let mask = build_mask(2, 0, MaskStrategy::TrainNoMask);

        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::new();
            let m = g.constant(mel.clone());
            let q = g.constant(queries.clone());
            let out = detector_forward(&mut g, &ps, m, q, &mask, &cfg).unwrap();
            outs.push((g.value(out.frame).clone(), g.value(out.clip).clone()));
        }
        assert_eq!(outs[0].0, outs[1].0);
        assert_eq!(outs[0].1, outs[1].1);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = tiny_model_cfg();
        let ps = model_params(&cfg, 42);
        let mel = rand_t(&[32, 8], 43);
        let queries = rand_t(&[3, 32], 44);
        let mask = build_mask(3, 0, MaskStrategy::TrainNoMask);
        let wf = rand_t(&[16, 3], 45);
        let wc = rand_t(&[3], 46);

        let report = grad_check(
            |params, g| {
                let m = g.constant(mel.clone());
                let q = g.constant(queries.clone());
                let out = detector_forward(g, params, m, q, &mask, &cfg)
                    .map_err(|e| NumericsError::GradCheck(format!("forward: {e}")))?;
                let wfn = g.constant(wf.clone());
                let wcn = g.constant(wc.clone());
                let pf = g.mul(out.frame, wfn)?;
                let pc = g.mul(out.clip, wcn)?;
                let sf = g.sum_all(pf);
                let sc = g.sum_all(pc);
                g.add(sf, sc)
            },
            &ps,
            &GradCheckOpts {
                max_coords_per_param: Some(2),
                seed: 47,
                analytic_unquantized: true,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {:.3e} at {:?} ({} coords)",
            report.max_rel_err,
            report.worst,
            report.coords_checked
        );
    }
}
