//! Multi-modal fusion encoder.
//!
//! A five-stage residual CNN backbone whose later stages (3–5) receive
//! language: each builds the multi-modal map M from the encoder feature, the
//! sentence vector, and 8-D spatial coordinates; derives the per-position
//! linguistic map L by word attention against M; runs co-attention over
//! (M, L); and adds the standardized fused output back onto the stage
//! feature. A decoder-fusion (DFN) wiring keeps the backbone language-free
//! for ablation.

use rand_chacha::ChaCha8Rng;

use crate::coattn::{
    acm, bind_acm, bind_vcm, init_acm_params, init_vcm_params, vcm, AttentionArtifacts,
    AttentionVariant, PpmSpec,
};
use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Var};
use crate::text::LinguisticContext;

pub const STD_EPS: f64 = 1e-5;

/// Stages the language enters in encoder-fusion mode (1-based).
pub const FUSED_STAGES: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// encoder fusion: language injected after stages 3–5
    Efn,
    /// decoder fusion: language-free backbone, fusion at the decoder input
    Dfn,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Efn => write!(f, "efn"),
            FusionMode::Dfn => write!(f, "dfn"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// per-stage output channels
    pub channels: [usize; 5],
    /// per-stage strides (carried by the first conv); the last stage keeps
    /// stride 1 so stages 4 and 5 share a resolution
    pub strides: [usize; 5],
    /// shared width of the multi-modal maps M and L
    pub c_mm: usize,
    /// co-attention projection width
    pub c_attn: usize,
    /// fused-output width (the 3×3 fusion conv's channels)
    pub c_fuse: usize,
    /// word-embedding dim of the text encoder
    pub word_dim: usize,
    /// sentence-vector dim (2× GRU hidden)
    pub sent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 96, 128],
            strides: [1, 2, 2, 2, 1],
            c_mm: 128,
            c_attn: 32,
            c_fuse: 64,
            word_dim: 64,
            sent_dim: 128,
        }
    }
}

impl EncoderConfig {
    /// Channels of the co-attention output F entering the per-stage
    /// projection: the fusion conv's width with attention, C_mm without
    /// (F = M in the plain-fusion baseline).
    pub fn f_channels(&self, variant: Option<AttentionVariant>) -> usize {
        if variant.is_some() {
            self.c_fuse
        } else {
            self.c_mm
        }
    }
}

/// 8-D per-position coordinate features in [−1,1]:
/// [x_center, y_center, x_min, y_min, x_max, y_max, 1/W, 1/H].
/// Cell (y,x) covers [2x/W−1, 2(x+1)/W−1] × [2y/H−1, 2(y+1)/H−1].
pub fn spatial_coords(h: usize, w: usize) -> RawTensor {
    let hw = h * w;
    let mut data = vec![0.0; 8 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let x_min = 2.0 * x as f64 / w as f64 - 1.0;
            let x_max = 2.0 * (x + 1) as f64 / w as f64 - 1.0;
            let y_min = 2.0 * y as f64 / h as f64 - 1.0;
            let y_max = 2.0 * (y + 1) as f64 / h as f64 - 1.0;
            data[p] = 0.5 * (x_min + x_max);
            data[hw + p] = 0.5 * (y_min + y_max);
            data[2 * hw + p] = x_min;
            data[3 * hw + p] = y_min;
            data[4 * hw + p] = x_max;
            data[5 * hw + p] = y_max;
            data[6 * hw + p] = 1.0 / w as f64;
            data[7 * hw + p] = 1.0 / h as f64;
        }
    }
    RawTensor::from_vec(&[8, h, w], data)
}

// ── backbone ──────────────────────────────────────────────────────────

pub struct StageVars<'t> {
    pub conv1_w: Var<'t>,
    pub conv1_b: Var<'t>,
    pub conv2_w: Var<'t>,
    pub conv2_b: Var<'t>,
    /// 1×1 skip projection; absent when in/out channels and stride match
    pub proj_w: Option<Var<'t>>,
}

/// One residual stage: conv3×3(stride)+relu, conv3×3+relu, plus a skip
/// (1×1 strided projection when shape changes, identity otherwise).
pub fn backbone_stage<'t>(x: Var<'t>, p: &StageVars<'t>, stride: usize) -> Result<Var<'t>> {
    let h = x
        .conv2d(p.conv1_w, stride, 1)?
        .add_channel_bias(p.conv1_b)?
        .relu()?;
    let h = h
        .conv2d(p.conv2_w, 1, 1)?
        .add_channel_bias(p.conv2_b)?
        .relu()?;
    let skip = match p.proj_w {
        Some(w) => x.conv2d(w, stride, 0)?,
        None => x,
    };
    h.add(skip)
}

pub fn init_stage_params(
    in_c: usize,
    out_c: usize,
    stride: usize,
    prefix: &str,
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) {
    set.insert(
        format!("{prefix}.conv1.w"),
        RawTensor::uniform_fan_in(&[out_c, in_c, 3, 3], in_c * 9, rng),
    );
    set.insert(format!("{prefix}.conv1.b"), RawTensor::zeros(&[out_c]));
    set.insert(
        format!("{prefix}.conv2.w"),
        RawTensor::uniform_fan_in(&[out_c, out_c, 3, 3], out_c * 9, rng),
    );
    set.insert(format!("{prefix}.conv2.b"), RawTensor::zeros(&[out_c]));
    if in_c != out_c || stride != 1 {
        set.insert(
            format!("{prefix}.proj.w"),
            RawTensor::uniform_fan_in(&[out_c, in_c, 1, 1], in_c, rng),
        );
    }
}

pub fn bind_stage<'t>(
    binder: &Binder<'t, '_>,
    prefix: &str,
    has_proj: bool,
) -> Result<StageVars<'t>> {
    Ok(StageVars {
        conv1_w: binder.get(&format!("{prefix}.conv1.w"))?,
        conv1_b: binder.get(&format!("{prefix}.conv1.b"))?,
        conv2_w: binder.get(&format!("{prefix}.conv2.w"))?,
        conv2_b: binder.get(&format!("{prefix}.conv2.b"))?,
        proj_w: if has_proj {
            Some(binder.get(&format!("{prefix}.proj.w"))?)
        } else {
            None
        },
    })
}

// ── language fusion ───────────────────────────────────────────────────

/// The M map: L2-normalize the stage feature per position and the sentence
/// vector, broadcast the latter, concatenate with the coordinate channels,
/// and project to C_mm by a 1×1 convolution.
pub fn initial_fusion<'t>(
    e_i: Var<'t>,
    h_sent: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
) -> Result<Var<'t>> {
    let s = e_i.shape();
    if s.len() != 3 {
        return Err(invalid_arg("initial_fusion", format!("E_i {s:?}")));
    }
    let (height, width) = (s[1], s[2]);
    let e_n = e_i.l2_normalize_channels()?;
    let c_h = h_sent.numel();
    let h_n = h_sent
        .reshape(&[c_h, 1, 1])?
        .l2_normalize_channels()?
        .reshape(&[c_h])?
        .broadcast_to_map(height, width)?;
    let coords = spatial_coords(height, width);
    let coords = e_i.tape().leaf(&coords.shape, coords.data)?;
    Var::concat(0, &[e_n, h_n, coords])?
        .conv2d(w, 1, 0)?
        .add_channel_bias(b)
}

/// The L map: word attention against M. Each word embedding is projected
/// into M's space for the dot product; the attended word vector is
/// re-projected to C_mm.
///
/// l_p = Q · Σ_t e_t · softmax_t(m_pᵀ·(P·e_t))
pub fn adaptive_linguistic_context<'t>(
    m: Var<'t>,
    e_words: Var<'t>,
    p_proj: Var<'t>,
    q_proj: Var<'t>,
) -> Result<Var<'t>> {
    let s = m.shape();
    let sw = e_words.shape();
    if s.len() != 3 || sw.len() != 2 {
        return Err(invalid_arg(
            "adaptive_linguistic_context",
            format!("M {s:?}, words {sw:?}"),
        ));
    }
    if sw[0] == 0 {
        return Err(invalid_arg("adaptive_linguistic_context", "empty word sequence"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let m_flat = m.reshape(&[c, hw])?;
    let e_proj = p_proj.matmul(e_words.transpose2d()?)?; // C_mm×T
    let alpha = m_flat.transpose2d()?.matmul(e_proj)?.softmax_rows()?; // HW×T
    let l_raw = alpha.matmul(e_words)?; // HW×Ce
    q_proj.matmul(l_raw.transpose2d()?)?.reshape(&[c, h, w])
}

// ── full encoder ──────────────────────────────────────────────────────

pub struct FusionVars<'t> {
    pub m_w: Var<'t>,
    pub m_b: Var<'t>,
    pub p_proj: Var<'t>,
    pub q_proj: Var<'t>,
    pub proj_w: Var<'t>,
    pub proj_b: Var<'t>,
    pub scale: Var<'t>,
    pub shift: Var<'t>,
}

pub struct EncoderOut<'t> {
    /// backbone features before any language injection
    pub raw_stages: Vec<Var<'t>>,
    /// stage outputs the decoder consumes (fused in EFN mode, raw in DFN)
    pub stages: Vec<Var<'t>>,
    /// co-attention artifacts per fused stage, in stage order
    pub artifacts: Vec<AttentionArtifacts>,
}

pub fn init_encoder_params(
    cfg: &EncoderConfig,
    mode: FusionMode,
    variant: Option<AttentionVariant>,
    prefix: &str,
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) {
    let mut in_c = 3;
    for (i, (&out_c, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
        init_stage_params(in_c, out_c, stride, &format!("{prefix}.s{}", i + 1), set, rng);
        in_c = out_c;
    }
    if mode == FusionMode::Dfn {
        return;
    }
    let cat_c = |stage_c: usize| stage_c + cfg.sent_dim + 8;
    for &i in &FUSED_STAGES {
        let stage_c = cfg.channels[i - 1];
        let fp = format!("{prefix}.f{i}");
        set.insert(
            format!("{fp}.m.w"),
            RawTensor::uniform_fan_in(&[cfg.c_mm, cat_c(stage_c), 1, 1], cat_c(stage_c), rng),
        );
        set.insert(format!("{fp}.m.b"), RawTensor::zeros(&[cfg.c_mm]));
        set.insert(
            format!("{fp}.p"),
            RawTensor::uniform_fan_in(&[cfg.c_mm, cfg.word_dim], cfg.word_dim, rng),
        );
        set.insert(
            format!("{fp}.q"),
            RawTensor::uniform_fan_in(&[cfg.c_mm, cfg.word_dim], cfg.word_dim, rng),
        );
        match variant {
            Some(AttentionVariant::Vcm) => {
                init_vcm_params(cfg.c_mm, cfg.c_attn, cfg.c_fuse, &format!("{fp}.vcm"), set, rng)
            }
            Some(AttentionVariant::Acm) => {
                init_acm_params(cfg.c_mm, cfg.c_attn, cfg.c_fuse, &format!("{fp}.acm"), set, rng)
            }
            None => {}
        }
        let f_c = cfg.f_channels(variant);
        set.insert(
            format!("{fp}.proj.w"),
            RawTensor::uniform_fan_in(&[stage_c, f_c, 1, 1], f_c, rng),
        );
        set.insert(format!("{fp}.proj.b"), RawTensor::zeros(&[stage_c]));
        set.insert(format!("{fp}.scale"), RawTensor::from_vec(&[stage_c], vec![1.0; stage_c]));
        set.insert(format!("{fp}.shift"), RawTensor::zeros(&[stage_c]));
    }
}

fn bind_fusion<'t>(binder: &Binder<'t, '_>, fp: &str) -> Result<FusionVars<'t>> {
    Ok(FusionVars {
        m_w: binder.get(&format!("{fp}.m.w"))?,
        m_b: binder.get(&format!("{fp}.m.b"))?,
        p_proj: binder.get(&format!("{fp}.p"))?,
        q_proj: binder.get(&format!("{fp}.q"))?,
        proj_w: binder.get(&format!("{fp}.proj.w"))?,
        proj_b: binder.get(&format!("{fp}.proj.b"))?,
        scale: binder.get(&format!("{fp}.scale"))?,
        shift: binder.get(&format!("{fp}.shift"))?,
    })
}

/// One fused stage: M (initial fusion), L (adaptive context), co-attention,
/// projection of F back to stage channels, standardization, residual add.
#[allow(clippy::too_many_arguments)]
fn fuse_stage<'t>(
    e_i: Var<'t>,
    ling: &LinguisticContext<'t>,
    binder: &Binder<'t, '_>,
    fp: &str,
    variant: Option<AttentionVariant>,
    ppm_spec: &PpmSpec,
    retain: bool,
) -> Result<(Var<'t>, Option<AttentionArtifacts>)> {
    let fv = bind_fusion(binder, fp)?;
    let m = initial_fusion(e_i, ling.h_sent, fv.m_w, fv.m_b)?;
    let f;
    let mut art = None;
    match variant {
        Some(AttentionVariant::Vcm) => {
            let l = adaptive_linguistic_context(m, ling.e_words, fv.p_proj, fv.q_proj)?;
            let p = bind_vcm(binder, &format!("{fp}.vcm"))?;
            let (fv_out, _, _, a) = vcm(m, l, &p, retain)?;
            f = fv_out;
            art = Some(a);
        }
        Some(AttentionVariant::Acm) => {
            let l = adaptive_linguistic_context(m, ling.e_words, fv.p_proj, fv.q_proj)?;
            let p = bind_acm(binder, &format!("{fp}.acm"))?;
            let (fv_out, _, _, a) = acm(m, l, &p, ppm_spec, retain)?;
            f = fv_out;
            art = Some(a);
        }
        None => f = m,
    }
    let f = f
        .conv2d(fv.proj_w, 1, 0)?
        .add_channel_bias(fv.proj_b)?
        .channel_standardize(STD_EPS)?
        .mul_channel_scale(fv.scale)?
        .add_channel_bias(fv.shift)?;
    Ok((e_i.add(f)?, art))
}

/// Run the backbone, injecting language at stages 3–5 in EFN mode.
#[allow(clippy::too_many_arguments)]
pub fn efn_forward<'t>(
    image: Var<'t>,
    ling: &LinguisticContext<'t>,
    binder: &Binder<'t, '_>,
    cfg: &EncoderConfig,
    mode: FusionMode,
    variant: Option<AttentionVariant>,
    ppm_spec: &PpmSpec,
    prefix: &str,
    retain: bool,
) -> Result<EncoderOut<'t>> {
    if mode == FusionMode::Dfn && variant.is_some() {
        return Err(invalid_arg(
            "efn_forward",
            "decoder fusion only supports the plain-fusion baseline (no co-attention)",
        ));
    }
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
        return Err(invalid_arg(
            "efn_forward",
            format!("expected 3×H×W with H,W multiples of 8, got {s:?}"),
        ));
    }
    let mut raw_stages = Vec::with_capacity(5);
    let mut stages = Vec::with_capacity(5);
    let mut artifacts = Vec::new();
    let mut x = image;
    let mut in_c = 3;
    for (i, (&out_c, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
        let idx = i + 1;
        let has_proj = in_c != out_c || stride != 1;
        let sv = bind_stage(binder, &format!("{prefix}.s{idx}"), has_proj)?;
        let e_i = backbone_stage(x, &sv, stride)?;
        raw_stages.push(e_i);
        let fused = if mode == FusionMode::Efn && FUSED_STAGES.contains(&idx) {
            let (out, art) = fuse_stage(
                e_i,
                ling,
                binder,
                &format!("{prefix}.f{idx}"),
                variant,
                ppm_spec,
                retain,
            )?;
            if let Some(a) = art {
                artifacts.push(a);
            }
            out
        } else {
            e_i
        };
        stages.push(fused);
        x = fused;
        in_c = out_c;
    }
    Ok(EncoderOut {
        raw_stages,
        stages,
        artifacts,
    })
}
