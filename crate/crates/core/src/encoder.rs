//! Dual-branch audio encoder.
//!
//! A lightweight CNN branch keeps fine temporal detail at the working frame
//! rate, while a patch-embedding transformer branch models coarse context at
//! 1/4 of that rate. The fused sequence is fine + Upsample(coarse), where
//! the upsampling is endpoint-aligned linear interpolation.
//!
//! Default geometry: 100 fps mel input, fine branch pools time by 2 (50 fps),
//! coarse patches cover 8 mel frames each (12.5 fps), upsample factor 4.

use rand::Rng;
use thiserror::Error;

use crate::frontend::MelSpectrogram;
use crate::numerics::{
    multi_head_attention, AttnProj, Graph, NodeId, NumericsError, ParamGroup, ParamSet, Tensor,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub mel_bins: usize,
    pub dim: usize,
    pub heads: usize,
    pub fine_blocks: usize,
    pub coarse_blocks: usize,
    /// Mel frames per coarse patch; each patch spans the full frequency axis.
    pub patch_time: usize,
    /// Coarse-to-fused time upsampling factor.
    pub upsample_factor: usize,
    pub mel_fps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mel_bins: 64,
            dim: 384,
            heads: 4,
            fine_blocks: 4,
            coarse_blocks: 2,
            patch_time: 8,
            upsample_factor: 4,
            mel_fps: 100.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(EncoderError::Config(format!("dim {} must be positive and even", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "{} heads over dim {}",
                self.heads, self.dim
            )));
        }
        if self.fine_blocks == 0 || self.coarse_blocks == 0 {
            return Err(EncoderError::Config("need at least one block per branch".into()));
        }
        if self.mel_bins == 0 {
            return Err(EncoderError::Config("zero mel bins".into()));
        }
        if self.upsample_factor == 0 || self.patch_time % self.upsample_factor != 0 {
            return Err(EncoderError::Config(format!(
                "patch_time {} must be a multiple of upsample_factor {}",
                self.patch_time, self.upsample_factor
            )));
        }
        Ok(())
    }

    /// Fine-branch time pooling; chosen so fused and upsampled-coarse rates agree.
    pub fn time_pool(&self) -> usize {
        self.patch_time / self.upsample_factor
    }

    pub fn fused_fps(&self) -> f64 {
        self.mel_fps / self.time_pool() as f64
    }

    pub fn coarse_fps(&self) -> f64 {
        self.mel_fps / self.patch_time as f64
    }

    /// Output channels per fine block, growing toward `dim`.
    fn fine_channels(&self) -> Vec<usize> {
        (1..=self.fine_blocks)
            .map(|b| (self.dim * b / self.fine_blocks).max(4))
            .collect()
    }
}

/// Coarse branch output at `frames_per_second` = mel rate / patch_time.
#[derive(Clone, Debug)]
pub struct CoarseFeatures {
    pub values: Tensor,
    pub frames_per_second: f64,
}

/// Fused frame-level sequence at the working rate (50 fps default).
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    pub values: Tensor,
    pub frames_per_second: f64,
}

pub(crate) fn p(g: &mut Graph, ps: &ParamSet, name: &str) -> Result<NodeId, NumericsError> {
    Ok(g.param(ps, ps.id(name)?))
}

pub(crate) fn register_attention(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    group: ParamGroup,
    rng: &mut impl Rng,
) -> Result<(), NumericsError> {
    for w in ["wq", "wk", "wv", "wo"] {
        ps.add_xavier(format!("{prefix}.{w}"), &[dim, dim], dim, dim, group, rng)?;
    }
    for b in ["bq", "bv", "bo"] {
        ps.add_zeros(format!("{prefix}.{b}"), &[dim], group)?;
    }
    Ok(())
}

pub(crate) fn attention_proj(
    g: &mut Graph,
    ps: &ParamSet,
    prefix: &str,
) -> Result<AttnProj, NumericsError> {
    Ok(AttnProj {
        wq: p(g, ps, &format!("{prefix}.wq"))?,
        bq: p(g, ps, &format!("{prefix}.bq"))?,
        wk: p(g, ps, &format!("{prefix}.wk"))?,
        wv: p(g, ps, &format!("{prefix}.wv"))?,
        bv: p(g, ps, &format!("{prefix}.bv"))?,
        wo: p(g, ps, &format!("{prefix}.wo"))?,
        bo: p(g, ps, &format!("{prefix}.bo"))?,
    })
}

pub(crate) fn register_ffn(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    group: ParamGroup,
    rng: &mut impl Rng,
) -> Result<(), NumericsError> {
    ps.add_xavier(format!("{prefix}.w1"), &[dim, hidden], dim, hidden, group, rng)?;
    ps.add_zeros(format!("{prefix}.b1"), &[hidden], group)?;
    ps.add_xavier(format!("{prefix}.w2"), &[hidden, dim], hidden, dim, group, rng)?;
    ps.add_zeros(format!("{prefix}.b2"), &[dim], group)?;
    Ok(())
}

pub(crate) fn ffn_forward(
    g: &mut Graph,
    ps: &ParamSet,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NumericsError> {
    let w1 = p(g, ps, &format!("{prefix}.w1"))?;
    let b1 = p(g, ps, &format!("{prefix}.b1"))?;
    let w2 = p(g, ps, &format!("{prefix}.w2"))?;
    let b2 = p(g, ps, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

pub(crate) fn register_layer_norm(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    group: ParamGroup,
) -> Result<(), NumericsError> {
    ps.add_ones(format!("{prefix}.gamma"), &[dim], group)?;
    ps.add_zeros(format!("{prefix}.beta"), &[dim], group)?;
    Ok(())
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn layer_norm_forward(
    g: &mut Graph,
    ps: &ParamSet,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NumericsError> {
    let gamma = p(g, ps, &format!("{prefix}.gamma"))?;
    let beta = p(g, ps, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Sinusoidal position table, [rows×dim].
pub(crate) fn sinusoidal_pe(rows: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[rows, dim], |i| {
        let (t, j) = (i / dim, i % dim);
        let k = j / 2;
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let angle = t as f64 * omega;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn register_encoder_params(
    cfg: &EncoderConfig,
    ps: &mut ParamSet,
    rng: &mut impl Rng,
) -> Result<(), EncoderError> {
    cfg.validate()?;
    let d = cfg.dim;

    // Coarse branch is the pretrainable backbone group.
    let patch_in = cfg.patch_time * cfg.mel_bins;
    ps.add_xavier("enc.coarse.patch.w", &[patch_in, d], patch_in, d, ParamGroup::Backbone, rng)?;
    ps.add_zeros("enc.coarse.patch.b", &[d], ParamGroup::Backbone)?;
    for i in 0..cfg.coarse_blocks {
        let pre = format!("enc.coarse.block{i}");
        register_attention(ps, &format!("{pre}.attn"), d, ParamGroup::Backbone, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln1"), d, ParamGroup::Backbone)?;
        register_ffn(ps, &format!("{pre}.ffn"), d, d, ParamGroup::Backbone, rng)?;
        register_layer_norm(ps, &format!("{pre}.ln2"), d, ParamGroup::Backbone)?;
    }

    let mut cin = 1usize;
    for (i, cout) in cfg.fine_channels().into_iter().enumerate() {
        let pre = format!("enc.fine.block{i}");
        ps.add_xavier(
            format!("{pre}.conv.w"),
            &[cout, cin, 3, 3],
            cin * 9,
            cout * 9,
            ParamGroup::Head,
            rng,
        )?;
        ps.add_zeros(format!("{pre}.conv.b"), &[cout], ParamGroup::Head)?;
        ps.add_ones(format!("{pre}.norm.gamma"), &[cout], ParamGroup::Head)?;
        ps.add_zeros(format!("{pre}.norm.beta"), &[cout], ParamGroup::Head)?;
        cin = cout;
    }
    ps.add_xavier("enc.fine.proj.w", &[cin, d], cin, d, ParamGroup::Head, rng)?;
    ps.add_zeros("enc.fine.proj.b", &[d], ParamGroup::Head)?;
    Ok(())
}

/// Patch embedding + positional encoding + transformer blocks.
/// `mel` is a [frames×mel_bins] node; output is [frames/patch_time × dim].
pub fn coarse_encode(
    g: &mut Graph,
    ps: &ParamSet,
    mel: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId, EncoderError> {
    let frames = g.shape(mel)[0];
    if frames == 0 || frames % cfg.patch_time != 0 {
        return Err(EncoderError::Config(format!(
            "{frames} mel frames not divisible by patch_time {}",
            cfg.patch_time
        )));
    }
    let t_c = frames / cfg.patch_time;

    // consecutive mel rows are contiguous, so a patch is one reshape away
    let patches = g.reshape(mel, &[t_c, cfg.patch_time * cfg.mel_bins])?;
    let w = p(g, ps, "enc.coarse.patch.w")?;
    let b = p(g, ps, "enc.coarse.patch.b")?;
    let mut x = g.matmul(patches, w)?;
    x = g.add_row(x, b)?;

    let pe = g.constant(sinusoidal_pe(t_c, cfg.dim));
    x = g.add(x, pe)?;

    for i in 0..cfg.coarse_blocks {
        let pre = format!("enc.coarse.block{i}");
        let proj = attention_proj(g, ps, &format!("{pre}.attn"))?;
        let a = multi_head_attention(g, x, x, x, cfg.heads, None, &proj)?;
        let res = g.add(x, a)?;
        x = layer_norm_forward(g, ps, &format!("{pre}.ln1"), res)?;
        let f = ffn_forward(g, ps, &format!("{pre}.ffn"), x)?;
        let res = g.add(x, f)?;
        x = layer_norm_forward(g, ps, &format!("{pre}.ln2"), res)?;
    }
    Ok(x)
}

/// CNN branch: conv(3x3)-channelnorm-gelu blocks with frequency pooling and
/// one time pooling, then frequency collapse and projection to [T×dim].
pub fn fine_encode(
    g: &mut Graph,
    ps: &ParamSet,
    mel: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId, EncoderError> {
    let frames = g.shape(mel)[0];
    let tp = cfg.time_pool();
    if frames == 0 || frames % tp != 0 {
        return Err(EncoderError::Config(format!(
            "{frames} mel frames not divisible by time pool {tp}"
        )));
    }

    // [frames×mel] -> [1×mel×frames] feature map
    let fm = g.transpose(mel)?;
    let mut x = g.reshape(fm, &[1, cfg.mel_bins, frames])?;
    let mut f_now = cfg.mel_bins;

    for i in 0..cfg.fine_blocks {
        let pre = format!("enc.fine.block{i}");
        let w = p(g, ps, &format!("{pre}.conv.w"))?;
        let b = p(g, ps, &format!("{pre}.conv.b"))?;
        x = g.conv2d(x, w, b, (1, 1), (1, 1))?;
        let gamma = p(g, ps, &format!("{pre}.norm.gamma"))?;
        let beta = p(g, ps, &format!("{pre}.norm.beta"))?;
        x = g.channel_norm(x, gamma, beta, LN_EPS)?;
        x = g.gelu(x);

        let freq_pool = if f_now >= 8 && f_now % 2 == 0 { 2 } else { 1 };
        let time_pool = if i == 0 { tp } else { 1 };
        if freq_pool > 1 || time_pool > 1 {
            x = g.avg_pool2d(x, (freq_pool, time_pool))?;
            f_now /= freq_pool;
        }
    }

    // collapse frequency, project channels to dim
    let c_last = g.shape(x)[0];
    let t_out = g.shape(x)[2];
    x = g.avg_pool2d(x, (f_now, 1))?;
    x = g.reshape(x, &[c_last, t_out])?;
    x = g.transpose(x)?;
    let w = p(g, ps, "enc.fine.proj.w")?;
    let b = p(g, ps, "enc.fine.proj.b")?;
    x = g.matmul(x, w)?;
    Ok(g.add_row(x, b)?)
}

/// E = fine + Upsample(coarse), elementwise.
pub fn fuse(
    g: &mut Graph,
    fine: NodeId,
    coarse: NodeId,
    factor: usize,
) -> Result<NodeId, EncoderError> {
    let t = g.shape(fine)[0];
    let t_c = g.shape(coarse)[0];
    if t != t_c * factor {
        return Err(EncoderError::Config(format!(
            "fine rows {t} != coarse rows {t_c} x factor {factor}"
        )));
    }
    let up = g.upsample_rows(coarse, factor)?;
    Ok(g.add(fine, up)?)
}

/// Graph handles for the encoder forward pass.
pub struct EncoderNodes {
    pub fused: NodeId,
    pub coarse: NodeId,
    pub t: usize,
    pub t_c: usize,
}

/// Runs both branches on a mel node and fuses them.
pub fn encode(
    g: &mut Graph,
    ps: &ParamSet,
    mel: NodeId,
    cfg: &EncoderConfig,
) -> Result<EncoderNodes, EncoderError> {
    let coarse = coarse_encode(g, ps, mel, cfg)?;
    let fine = fine_encode(g, ps, mel, cfg)?;
    let fused = fuse(g, fine, coarse, cfg.upsample_factor)?;
    Ok(EncoderNodes {
        fused,
        coarse,
        t: g.shape(fused)[0],
        t_c: g.shape(coarse)[0],
    })
}

/// Convenience forward outside any training graph.
pub fn encode_features(
    ps: &ParamSet,
    mel: &MelSpectrogram,
    cfg: &EncoderConfig,
) -> Result<(FusedFeatures, CoarseFeatures), EncoderError> {
    let mut g = Graph::new();
    let x = g.constant(mel.values.clone());
    let nodes = encode(&mut g, ps, x, cfg)?;
    Ok((
        FusedFeatures {
            values: g.value(nodes.fused).clone(),
            frames_per_second: cfg.fused_fps(),
        },
        CoarseFeatures {
            values: g.value(nodes.coarse).clone(),
            frames_per_second: cfg.coarse_fps(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOpts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            mel_bins: 16,
            dim: 16,
            heads: 2,
            fine_blocks: 4,
            coarse_blocks: 2,
            patch_time: 8,
            upsample_factor: 4,
            mel_fps: 100.0,
        }
    }

    fn new_params(cfg: &EncoderConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_encoder_params(cfg, &mut ps, &mut rng).unwrap();
        ps
    }

    fn rand_mel(frames: usize, bins: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[frames, bins], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_follow_configured_rates() {
        let cfg = tiny_cfg();
        let ps = new_params(&cfg, 1);
        let mel = rand_mel(32, 16, 2);
        let mut g = Graph::new();
        let x = g.constant(mel);
        let nodes = encode(&mut g, &ps, x, &cfg).unwrap();
        // 32 mel frames: fine 32/2=16, coarse 32/8=4, fused 16
        assert_eq!(g.shape(nodes.coarse), &[4, 16]);
        assert_eq!(g.shape(nodes.fused), &[16, 16]);
        assert_eq!((cfg.fused_fps(), cfg.coarse_fps()), (50.0, 12.5));
    }

    #[test]
    fn ten_block_fine_branch_keeps_shape() {
        let mut cfg = tiny_cfg();
        cfg.fine_blocks = 10;
        let ps = new_params(&cfg, 3);
        let mel = rand_mel(16, 16, 4);
        let mut g = Graph::new();
        let x = g.constant(mel);
        let out = fine_encode(&mut g, &ps, x, &cfg).unwrap();
        assert_eq!(g.shape(out), &[8, 16]);
    }

    #[test]
    fn indivisible_patching_is_config_error() {
        let cfg = tiny_cfg();
        let ps = new_params(&cfg, 5);
        let mel = rand_mel(20, 16, 6);
        let mut g = Graph::new();
        let x = g.constant(mel);
        assert!(matches!(
            coarse_encode(&mut g, &ps, x, &cfg),
            Err(EncoderError::Config(_))
        ));
    }

    #[test]
    fn coarse_output_is_position_sensitive() {
        let cfg = tiny_cfg();
        let ps = new_params(&cfg, 7);
        let mel = rand_mel(32, 16, 8);
        // deterministic shuffle of frame rows
        let mut order: Vec<usize> = (0..32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = vec![0.0; 32 * 16];
        for (dst, &src) in order.iter().enumerate() {
            shuffled[dst * 16..(dst + 1) * 16].copy_from_slice(mel.row(src));
        }
        let shuffled = Tensor::from_values(&[32, 16], &shuffled).unwrap();

        let mut g = Graph::new();
        let a = g.constant(mel);
        let b = g.constant(shuffled);
        let ca = coarse_encode(&mut g, &ps, a, &cfg).unwrap();
        let cb = coarse_encode(&mut g, &ps, b, &cfg).unwrap();
        assert!(g.value(ca).max_abs_diff(g.value(cb)) > 1e-6);
    }

    #[test]
    fn zero_input_gives_finite_deterministic_output() {
        let cfg = tiny_cfg();
        let ps = new_params(&cfg, 10);
        let mel = Tensor::zeros(&[16, 16]);
        let mut g = Graph::new();
        let x = g.constant(mel.clone());
        let n1 = encode(&mut g, &ps, x, &cfg).unwrap();
        assert!(g.value(n1.fused).all_finite());
        let mut g2 = Graph::new();
        let x2 = g2.constant(mel);
        let n2 = encode(&mut g2, &ps, x2, &cfg).unwrap();
        assert_eq!(g.value(n1.fused), g2.value(n2.fused));
    }

    #[test]
    fn fine_perturbation_stays_within_receptive_radius() {
        let cfg = tiny_cfg();
        let ps = new_params(&cfg, 11);
        let mel = rand_mel(32, 16, 12);
        let mut poked = mel.clone();
        let tau = 16usize;
        poked.data_mut()[tau * 16 + 3] += 1.0;

        let mut g = Graph::new();
        let a = g.constant(mel);
        let b = g.constant(poked);
        let fa = fine_encode(&mut g, &ps, a, &cfg).unwrap();
        let fb = fine_encode(&mut g, &ps, b, &cfg).unwrap();

        // conv radius 1, pool 2, then one radius step per later block
        let blocks = cfg.fine_blocks;
        let lo = (tau.saturating_sub(1)) / 2 - (blocks - 1).min((tau - 1) / 2);
        let hi = (tau + 1) / 2 + (blocks - 1);
        let va = g.value(fa);
        let vb = g.value(fb);
        let mut changed_inside = false;
        for t in 0..16 {
            let row_diff: f64 = (0..16)
                .map(|j| (va.at2(t, j) - vb.at2(t, j)).abs())
                .fold(0.0, f64::max);
            if t < lo || t > hi {
                assert_eq!(row_diff, 0.0, "leak at output frame {t}");
            } else if row_diff > 0.0 {
                changed_inside = true;
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn fuse_identities_hold_exactly() {
        let mut g = Graph::new();
        let coarse = g.constant(Tensor::from_values(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let zero_fine = g.constant(Tensor::zeros(&[8, 3]));
        let fused = fuse(&mut g, zero_fine, coarse, 4).unwrap();
        let up = g.upsample_rows(coarse, 4).unwrap();
        assert_eq!(g.value(fused), g.value(up));

        let fine = g.constant(Tensor::from_fn(&[8, 3], |i| i as f64 * 0.1));
        let zero_coarse = g.constant(Tensor::zeros(&[2, 3]));
        let fused2 = fuse(&mut g, fine, zero_coarse, 4).unwrap();
        assert_eq!(g.value(fused2), g.value(fine));
    }

    #[test]
    fn fuse_with_factor_one_is_plain_addition() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_values(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::from_values(&[3, 2], &[0.5; 6]).unwrap());
        let fused = fuse(&mut g, a, b, 1).unwrap();
        let plain = g.add(a, b).unwrap();
        assert_eq!(g.value(fused), g.value(plain));
    }

    #[test]
    fn fuse_rejects_incompatible_extents() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[10, 2]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(fuse(&mut g, a, b, 4).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg();
        cfg.mel_bins = 8;
        cfg.dim = 8;
        cfg.fine_blocks = 3;
        cfg.coarse_blocks = 1;
        let ps = new_params(&cfg, 13);
        let mel = rand_mel(16, 8, 14);

        let report = grad_check(
            |params, g| {
                let x = g.constant(mel.clone());
                let nodes = encode(g, params, x, &cfg).map_err(|e| match e {
                    EncoderError::Numerics(n) => n,
                    EncoderError::Config(c) => NumericsError::ShapeMismatch {
                        op: "encode",
                        detail: c,
                    },
                })?;
                Ok(g.sum_all(nodes.fused))
            },
            &ps,
            &GradCheckOpts {
                max_coords_per_param: Some(3),
                seed: 15,
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
}
