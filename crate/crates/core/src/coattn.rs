//! Co-attention over the multi-modal map M and linguistic map L.
//!
//! Two variants share the interface: the vanilla module (VCM) builds the full
//! HW×HW affinity between positions of M and L; the asymmetric module (ACM)
//! pools each modality to N pyramid anchors first, so every affinity-shaped
//! matrix is N×HW (or HW×N) with N ≪ HW.
//!
//! Flattening is row-major (position p = y·W + x) and pyramid bins are
//! concatenated in listed order, each bin row-major.

use rand_chacha::ChaCha8Rng;

use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Vcm,
    Acm,
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionVariant::Vcm => write!(f, "vcm"),
            AttentionVariant::Acm => write!(f, "acm"),
        }
    }
}

/// Pyramid pooling bin sizes. Bins larger than the feature map are clamped
/// to its short side so toy-sized stages stay runnable.
#[derive(Debug, Clone)]
pub struct PpmSpec {
    pub bins: Vec<usize>,
}

impl Default for PpmSpec {
    fn default() -> Self {
        Self {
            bins: vec![1, 3, 6, 8],
        }
    }
}

impl PpmSpec {
    pub fn clamped_bins(&self, h: usize, w: usize) -> Vec<usize> {
        let cap = h.min(w);
        self.bins.iter().map(|&b| b.min(cap)).collect()
    }

    /// Anchor count N = Σ bin² after clamping.
    pub fn anchor_count(&self, h: usize, w: usize) -> usize {
        self.clamped_bins(h, w).iter().map(|&b| b * b).sum()
    }
}

/// Retained attention matrices (detached copies) plus exact element counts
/// of the affinity-shaped allocations, for the memory benchmark.
#[derive(Debug, Clone, Default)]
pub struct AttentionArtifacts {
    /// VCM: A (HW×HW)
    pub affinity: Option<RawTensor>,
    /// VCM: row-softmax(A), row-softmax(Aᵀ)
    pub a1: Option<RawTensor>,
    pub a2: Option<RawTensor>,
    /// ACM: SA_m, SA_l (N×HW) and A3 (HW×N)
    pub sa_m: Option<RawTensor>,
    pub sa_l: Option<RawTensor>,
    pub a3: Option<RawTensor>,
    /// Elements of the affinity matrices themselves: (HW)² for VCM,
    /// 3·N·HW for ACM.
    pub affinity_elems: u64,
}

pub struct VcmVars<'t> {
    pub w_m: Var<'t>,
    pub w_l: Var<'t>,
    pub fuse_w: Var<'t>,
    pub fuse_b: Var<'t>,
}

pub struct AcmVars<'t> {
    pub w1_m: Var<'t>,
    pub w2_m: Var<'t>,
    pub w3_m: Var<'t>,
    pub w1_l: Var<'t>,
    pub w2_l: Var<'t>,
    pub w3_l: Var<'t>,
    pub fuse_w: Var<'t>,
    pub fuse_b: Var<'t>,
}

fn check_pair(op: &'static str, m: &Var, l: &Var) -> Result<(usize, usize, usize)> {
    let sm = m.shape();
    let sl = l.shape();
    if sm.len() != 3 || sm != sl {
        return Err(invalid_arg(op, format!("M {sm:?} vs L {sl:?}")));
    }
    Ok((sm[0], sm[1], sm[2]))
}

/// Vanilla co-attention core: affinity, row/column normalization, and the
/// weighted-sum updates M̃ = M·A1ᵀ, L̃ = L·A2ᵀ. No fusion conv.
pub fn vcm_core<'t>(
    m: Var<'t>,
    l: Var<'t>,
    w_m: Var<'t>,
    w_l: Var<'t>,
    retain: bool,
) -> Result<(Var<'t>, Var<'t>, AttentionArtifacts)> {
    let (c, h, w) = check_pair("vcm", &m, &l)?;
    let hw = h * w;
    let m_flat = m.reshape(&[c, hw])?;
    let l_flat = l.reshape(&[c, hw])?;
    let mp = w_m.matmul(m_flat)?;
    let lp = w_l.matmul(l_flat)?;
    let a = mp.transpose2d()?.matmul(lp)?; // HW×HW
    let a1 = a.softmax_rows()?;
    let a2 = a.transpose2d()?.softmax_rows()?;
    let m_t = m_flat.matmul(a1.transpose2d()?)?.reshape(&[c, h, w])?;
    let l_t = l_flat.matmul(a2.transpose2d()?)?.reshape(&[c, h, w])?;
    let mut art = AttentionArtifacts {
        affinity_elems: (hw * hw) as u64,
        ..Default::default()
    };
    if retain {
        art.affinity = Some(RawTensor::from_vec(&[hw, hw], a.data()));
        art.a1 = Some(RawTensor::from_vec(&[hw, hw], a1.data()));
        art.a2 = Some(RawTensor::from_vec(&[hw, hw], a2.data()));
    }
    Ok((m_t, l_t, art))
}

/// Concatenate M̃ and L̃ on channels and fuse with a 3×3 convolution.
fn fuse<'t>(m_t: Var<'t>, l_t: Var<'t>, fuse_w: Var<'t>, fuse_b: Var<'t>) -> Result<Var<'t>> {
    Var::concat(0, &[m_t, l_t])?
        .conv2d(fuse_w, 1, 1)?
        .add_channel_bias(fuse_b)
}

pub fn vcm<'t>(
    m: Var<'t>,
    l: Var<'t>,
    p: &VcmVars<'t>,
    retain: bool,
) -> Result<(Var<'t>, Var<'t>, Var<'t>, AttentionArtifacts)> {
    let (m_t, l_t, art) = vcm_core(m, l, p.w_m, p.w_l, retain)?;
    let f = fuse(m_t, l_t, p.fuse_w, p.fuse_b)?;
    Ok((f, m_t, l_t, art))
}

/// Pyramid pooling: pool to each bin size, flatten row-major, concatenate
/// along the position axis. Output [C, N].
pub fn ppm<'t>(x: Var<'t>, spec: &PpmSpec) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(invalid_arg("ppm", format!("expected 3-D, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let parts: Vec<Var> = spec
        .clamped_bins(h, w)
        .into_iter()
        .map(|b| x.adaptive_avg_pool(b, b)?.reshape(&[c, b * b]))
        .collect::<Result<_>>()?;
    Var::concat(1, &parts)
}

/// Asymmetric co-attention core (no fusion conv):
/// SA_m = PPM(W¹M)ᵀ(W²M), SA_l likewise, A3 = softmax((SA_m+SA_l)ᵀ),
/// M̃ = A3·PPM(W³M)ᵀ reshaped back to C1×H×W.
#[allow(clippy::too_many_arguments)]
pub fn acm_core<'t>(
    m: Var<'t>,
    l: Var<'t>,
    p: &AcmVars<'t>,
    spec: &PpmSpec,
    retain: bool,
) -> Result<(Var<'t>, Var<'t>, AttentionArtifacts)> {
    let (c, h, w) = check_pair("acm", &m, &l)?;
    let hw = h * w;
    let c1 = p.w1_m.shape()[0];
    let n = spec.anchor_count(h, w);
    let m_flat = m.reshape(&[c, hw])?;
    let l_flat = l.reshape(&[c, hw])?;

    let proj_map = |wv: Var<'t>, flat: Var<'t>| -> Result<Var<'t>> {
        wv.matmul(flat)?.reshape(&[c1, h, w])
    };
    let ppm1_m = ppm(proj_map(p.w1_m, m_flat)?, spec)?; // C1×N
    let p2_m = p.w2_m.matmul(m_flat)?; // C1×HW
    let sa_m = ppm1_m.transpose2d()?.matmul(p2_m)?; // N×HW
    let ppm1_l = ppm(proj_map(p.w1_l, l_flat)?, spec)?;
    let p2_l = p.w2_l.matmul(l_flat)?;
    let sa_l = ppm1_l.transpose2d()?.matmul(p2_l)?;

    let a3 = sa_m.add(sa_l)?.transpose2d()?.softmax_rows()?; // HW×N

    let ppm3_m = ppm(proj_map(p.w3_m, m_flat)?, spec)?; // C1×N
    let m_t = a3.matmul(ppm3_m.transpose2d()?)?; // HW×C1
    let m_t = m_t.transpose2d()?.reshape(&[c1, h, w])?;
    let ppm3_l = ppm(proj_map(p.w3_l, l_flat)?, spec)?;
    let l_t = a3.matmul(ppm3_l.transpose2d()?)?;
    let l_t = l_t.transpose2d()?.reshape(&[c1, h, w])?;

    let mut art = AttentionArtifacts {
        affinity_elems: 3 * (n * hw) as u64,
        ..Default::default()
    };
    if retain {
        art.sa_m = Some(RawTensor::from_vec(&[n, hw], sa_m.data()));
        art.sa_l = Some(RawTensor::from_vec(&[n, hw], sa_l.data()));
        art.a3 = Some(RawTensor::from_vec(&[hw, n], a3.data()));
    }
    Ok((m_t, l_t, art))
}

pub fn acm<'t>(
    m: Var<'t>,
    l: Var<'t>,
    p: &AcmVars<'t>,
    spec: &PpmSpec,
    retain: bool,
) -> Result<(Var<'t>, Var<'t>, Var<'t>, AttentionArtifacts)> {
    let (m_t, l_t, art) = acm_core(m, l, p, spec, retain)?;
    let f = fuse(m_t, l_t, p.fuse_w, p.fuse_b)?;
    Ok((f, m_t, l_t, art))
}

// ── parameter plumbing ────────────────────────────────────────────────

pub fn init_vcm_params(c: usize, c1: usize, c2: usize, prefix: &str, set: &mut ParamSet, rng: &mut ChaCha8Rng) {
    set.insert(format!("{prefix}.w_m"), RawTensor::uniform_fan_in(&[c1, c], c, rng));
    set.insert(format!("{prefix}.w_l"), RawTensor::uniform_fan_in(&[c1, c], c, rng));
    set.insert(
        format!("{prefix}.fuse_w"),
        RawTensor::uniform_fan_in(&[c2, 2 * c, 3, 3], 2 * c * 9, rng),
    );
    set.insert(format!("{prefix}.fuse_b"), RawTensor::zeros(&[c2]));
}

pub fn bind_vcm<'t>(binder: &Binder<'t, '_>, prefix: &str) -> Result<VcmVars<'t>> {
    Ok(VcmVars {
        w_m: binder.get(&format!("{prefix}.w_m"))?,
        w_l: binder.get(&format!("{prefix}.w_l"))?,
        fuse_w: binder.get(&format!("{prefix}.fuse_w"))?,
        fuse_b: binder.get(&format!("{prefix}.fuse_b"))?,
    })
}

pub fn init_acm_params(c: usize, c1: usize, c2: usize, prefix: &str, set: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for name in ["w1_m", "w2_m", "w3_m", "w1_l", "w2_l", "w3_l"] {
        set.insert(
            format!("{prefix}.{name}"),
            RawTensor::uniform_fan_in(&[c1, c], c, rng),
        );
    }
    set.insert(
        format!("{prefix}.fuse_w"),
        RawTensor::uniform_fan_in(&[c2, 2 * c1, 3, 3], 2 * c1 * 9, rng),
    );
    set.insert(format!("{prefix}.fuse_b"), RawTensor::zeros(&[c2]));
}

pub fn bind_acm<'t>(binder: &Binder<'t, '_>, prefix: &str) -> Result<AcmVars<'t>> {
    Ok(AcmVars {
        w1_m: binder.get(&format!("{prefix}.w1_m"))?,
        w2_m: binder.get(&format!("{prefix}.w2_m"))?,
        w3_m: binder.get(&format!("{prefix}.w3_m"))?,
        w1_l: binder.get(&format!("{prefix}.w1_l"))?,
        w2_l: binder.get(&format!("{prefix}.w2_l"))?,
        w3_l: binder.get(&format!("{prefix}.w3_l"))?,
        fuse_w: binder.get(&format!("{prefix}.fuse_w"))?,
        fuse_b: binder.get(&format!("{prefix}.fuse_b"))?,
    })
}

// ── analytic cost model ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CostReport {
    pub variant: AttentionVariant,
    pub c: usize,
    pub c1: usize,
    pub h: usize,
    pub w: usize,
    /// anchor count for ACM, absent for VCM
    pub anchors: Option<usize>,
    /// elements of the affinity matrices: (HW)² resp. 3·N·HW
    pub affinity_elements: u64,
    /// matmul flops (2·m·k·n per product), projections included
    pub flops: u64,
    /// affinity_elements × 8 (f64)
    pub bytes: u64,
}

pub fn attention_cost(
    variant: AttentionVariant,
    c: usize,
    c1: usize,
    h: usize,
    w: usize,
    spec: &PpmSpec,
) -> CostReport {
    let hw = (h * w) as u64;
    let (cu, c1u) = (c as u64, c1 as u64);
    match variant {
        AttentionVariant::Vcm => {
            let affinity = hw * hw;
            let flops = 2 * (2 * c1u * cu * hw)      // W_m·M, W_l·L
                + 2 * hw * c1u * hw                  // A
                + 2 * (2 * cu * hw * hw); // M̃, L̃
            CostReport {
                variant,
                c,
                c1,
                h,
                w,
                anchors: None,
                affinity_elements: affinity,
                flops,
                bytes: affinity * 8,
            }
        }
        AttentionVariant::Acm => {
            let n = spec.anchor_count(h, w) as u64;
            let affinity = 3 * n * hw;
            let flops = 6 * (2 * c1u * cu * hw)      // six projections
                + 2 * (2 * n * c1u * hw)             // SA_m, SA_l
                + 2 * (2 * hw * n * c1u); // M̃, L̃
            CostReport {
                variant,
                c,
                c1,
                h,
                w,
                anchors: Some(n as usize),
                affinity_elements: affinity,
                flops,
                bytes: affinity * 8,
            }
        }
    }
}
