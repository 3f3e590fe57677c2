//! FPN-style decoder with boundary enhancement.
//!
//! Laterals D_1..D_5 form a top-down pathway. The semantic chain starts at
//! S_5 = D_5; each transition i → i−1 decomposes S_i into a spatially
//! transformed version and a boundary residual B_i = S_i − STN(S_i), builds
//! a boundary feature B̃_{i−1} = conv(cat(B_i, D_{i−1})), predicts a boundary
//! map from it, and refines S_{i−1} = conv(cat(B̃_{i−1} + STN(S_i), S_i))
//! with a sigmoid mask head. With the boundary module disabled the same
//! refine path runs with B̃ = 0 and an identity transform, which reduces it
//! to plain top-down fusion. The final prediction is SM_1 resized to the
//! input image.

use rand_chacha::ChaCha8Rng;

use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Var};

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// channels of the five incoming stage features
    pub in_channels: [usize; 5],
    /// decoder width (laterals, semantic and boundary features)
    pub c_d: usize,
    /// hidden width of the STN localization MLP
    pub stn_hidden: usize,
}

impl DecoderConfig {
    pub fn new(in_channels: [usize; 5]) -> Self {
        Self {
            in_channels,
            c_d: 8,
            stn_hidden: 8,
        }
    }
}

/// Localization network producing a 2×3 affine theta from a feature map.
/// The output layer is zero-initialized with an identity bias, so the
/// transform starts as the exact identity and B_i = 0.
pub struct StnVars<'t> {
    pub fc1_w: Var<'t>,
    pub fc1_b: Var<'t>,
    pub fc2_w: Var<'t>,
    pub fc2_b: Var<'t>,
}

/// theta = fc2·tanh(fc1·gap(S) + b1) + b2, reshaped to 2×3.
pub fn stn_theta<'t>(s: Var<'t>, p: &StnVars<'t>) -> Result<Var<'t>> {
    let c = s.shape()[0];
    let gap = s.adaptive_avg_pool(1, 1)?.reshape(&[c, 1])?;
    let h = p.fc1_w.matmul(gap)?.add(p.fc1_b)?.tanh()?;
    p.fc2_w.matmul(h)?.add(p.fc2_b)?.reshape(&[2, 3])
}

/// B_i = S_i − STN(S_i). Also returns the warped feature, which the refine
/// step reuses.
pub fn boundary_residual<'t>(s: Var<'t>, p: &StnVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let sh = s.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(invalid_arg(
            "boundary_residual",
            format!("expected square spatial dims, got {sh:?}"),
        ));
    }
    let theta = stn_theta(s, p)?;
    let warped = s.grid_sample_bilinear(theta)?;
    Ok((s.sub(warped)?, warped))
}

pub struct TransitionVars<'t> {
    pub stn: StnVars<'t>,
    /// 3×3 conv over cat(B_i, D_{i−1}) → B̃
    pub bt_w: Var<'t>,
    pub bt_b: Var<'t>,
    /// 1×1 boundary-map head
    pub bm_w: Var<'t>,
    pub bm_b: Var<'t>,
    /// 3×3 conv over cat(B̃ + STN(S_i), S_i) → S_{i−1}
    pub rf_w: Var<'t>,
    pub rf_b: Var<'t>,
    /// 1×1 mask head
    pub sm_w: Var<'t>,
    pub sm_b: Var<'t>,
}

/// B̃_{i−1} = relu(conv3×3(cat(up(B_i), D_{i−1}))); BM = sigmoid(conv1×1(B̃)).
pub fn predict_boundary<'t>(
    b_i: Var<'t>,
    d_prev: Var<'t>,
    p: &TransitionVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let sd = d_prev.shape();
    let b_up = b_i.bilinear_resize(sd[1], sd[2])?;
    let bt = Var::concat(0, &[b_up, d_prev])?
        .conv2d(p.bt_w, 1, 1)?
        .add_channel_bias(p.bt_b)?
        .relu()?;
    let bm = bt
        .conv2d(p.bm_w, 1, 0)?
        .add_channel_bias(p.bm_b)?
        .sigmoid()?;
    Ok((bt, bm))
}

/// S_{i−1} = conv3×3(cat(B̃ + up(STN(S_i)), up(S_i))); SM = sigmoid(conv1×1(S)).
pub fn refine_mask<'t>(
    bt: Var<'t>,
    s_i: Var<'t>,
    warped: Var<'t>,
    p: &TransitionVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let st = bt.shape();
    let s_up = s_i.bilinear_resize(st[1], st[2])?;
    let w_up = warped.bilinear_resize(st[1], st[2])?;
    let s_prev = Var::concat(0, &[bt.add(w_up)?, s_up])?
        .conv2d(p.rf_w, 1, 1)?
        .add_channel_bias(p.rf_b)?;
    let sm = s_prev
        .conv2d(p.sm_w, 1, 0)?
        .add_channel_bias(p.sm_b)?
        .sigmoid()?;
    Ok((s_prev, sm))
}

/// Everything `decode` produces, laid out per level (index = level − 1).
pub struct DecoderState<'t> {
    /// top-down features D_1..D_5
    pub d: Vec<Var<'t>>,
    /// semantic chain S_1..S_5 (S_5 = D_5)
    pub s: Vec<Var<'t>>,
    /// STN(S_i) for i = 5..2, stored at the source level (index i−1);
    /// absent with the boundary module disabled
    pub warped: Vec<Option<Var<'t>>>,
    /// boundary maps BM_1..BM_4 (none at level 5, none when disabled)
    pub bm: Vec<Option<Var<'t>>>,
    /// segmentation maps SM_1..SM_4 (none at level 5)
    pub sm: Vec<Option<Var<'t>>>,
    /// SM_1 bilinearly resized to the input image
    pub prediction: Var<'t>,
}

pub fn init_decoder_params(
    cfg: &DecoderConfig,
    prefix: &str,
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) {
    let c_d = cfg.c_d;
    for (i, &in_c) in cfg.in_channels.iter().enumerate() {
        set.insert(
            format!("{prefix}.l{}.w", i + 1),
            RawTensor::uniform_fan_in(&[c_d, in_c, 1, 1], in_c, rng),
        );
        set.insert(format!("{prefix}.l{}.b", i + 1), RawTensor::zeros(&[c_d]));
    }
    for i in (2..=5).rev() {
        let tp = format!("{prefix}.t{i}");
        set.insert(
            format!("{tp}.stn.fc1.w"),
            RawTensor::uniform_fan_in(&[cfg.stn_hidden, c_d], c_d, rng),
        );
        set.insert(format!("{tp}.stn.fc1.b"), RawTensor::zeros(&[cfg.stn_hidden, 1]));
        // exact identity at init: zero weights, identity bias
        set.insert(format!("{tp}.stn.fc2.w"), RawTensor::zeros(&[6, cfg.stn_hidden]));
        set.insert(
            format!("{tp}.stn.fc2.b"),
            RawTensor::from_vec(&[6, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        );
        set.insert(
            format!("{tp}.bt.w"),
            RawTensor::uniform_fan_in(&[c_d, 2 * c_d, 3, 3], 2 * c_d * 9, rng),
        );
        set.insert(format!("{tp}.bt.b"), RawTensor::zeros(&[c_d]));
        set.insert(
            format!("{tp}.bm.w"),
            RawTensor::uniform_fan_in(&[1, c_d, 1, 1], c_d, rng),
        );
        set.insert(format!("{tp}.bm.b"), RawTensor::zeros(&[1]));
        set.insert(
            format!("{tp}.rf.w"),
            RawTensor::uniform_fan_in(&[c_d, 2 * c_d, 3, 3], 2 * c_d * 9, rng),
        );
        set.insert(format!("{tp}.rf.b"), RawTensor::zeros(&[c_d]));
        set.insert(
            format!("{tp}.sm.w"),
            RawTensor::uniform_fan_in(&[1, c_d, 1, 1], c_d, rng),
        );
        set.insert(format!("{tp}.sm.b"), RawTensor::zeros(&[1]));
    }
    // shared 1×1 head supervising STN(S_i) against the ground-truth mask
    set.insert(
        format!("{prefix}.stnsup.w"),
        RawTensor::uniform_fan_in(&[1, c_d, 1, 1], c_d, rng),
    );
    set.insert(format!("{prefix}.stnsup.b"), RawTensor::zeros(&[1]));
}

fn bind_stn<'t>(binder: &Binder<'t, '_>, tp: &str) -> Result<StnVars<'t>> {
    Ok(StnVars {
        fc1_w: binder.get(&format!("{tp}.stn.fc1.w"))?,
        fc1_b: binder.get(&format!("{tp}.stn.fc1.b"))?,
        fc2_w: binder.get(&format!("{tp}.stn.fc2.w"))?,
        fc2_b: binder.get(&format!("{tp}.stn.fc2.b"))?,
    })
}

fn bind_transition<'t>(binder: &Binder<'t, '_>, tp: &str) -> Result<TransitionVars<'t>> {
    Ok(TransitionVars {
        stn: bind_stn(binder, tp)?,
        bt_w: binder.get(&format!("{tp}.bt.w"))?,
        bt_b: binder.get(&format!("{tp}.bt.b"))?,
        bm_w: binder.get(&format!("{tp}.bm.w"))?,
        bm_b: binder.get(&format!("{tp}.bm.b"))?,
        rf_w: binder.get(&format!("{tp}.rf.w"))?,
        rf_b: binder.get(&format!("{tp}.rf.b"))?,
        sm_w: binder.get(&format!("{tp}.sm.w"))?,
        sm_b: binder.get(&format!("{tp}.sm.b"))?,
    })
}

/// Run the top-down pathway and the boundary-enhanced semantic chain over
/// five stage features. `out_hw` is the input-image size the final
/// prediction is resized to.
pub fn decode<'t>(
    stages: &[Var<'t>],
    binder: &Binder<'t, '_>,
    cfg: &DecoderConfig,
    bem: bool,
    out_hw: (usize, usize),
    prefix: &str,
) -> Result<DecoderState<'t>> {
    if stages.len() != 5 {
        return Err(invalid_arg(
            "decode",
            format!("expected 5 stage features, got {}", stages.len()),
        ));
    }
    for (i, (st, &c)) in stages.iter().zip(&cfg.in_channels).enumerate() {
        let s = st.shape();
        if s.len() != 3 || s[0] != c {
            return Err(invalid_arg(
                "decode",
                format!("stage {} has shape {s:?}, expected {c} channels", i + 1),
            ));
        }
    }
    // laterals + top-down accumulation
    let mut d: Vec<Option<Var>> = vec![None; 5];
    for i in (0..5).rev() {
        let lat = stages[i]
            .conv2d(binder.get(&format!("{prefix}.l{}.w", i + 1))?, 1, 0)?
            .add_channel_bias(binder.get(&format!("{prefix}.l{}.b", i + 1))?)?;
        let acc = match d[i + 1..].iter().flatten().next() {
            Some(above) => {
                let s = lat.shape();
                lat.add(above.bilinear_resize(s[1], s[2])?)?
            }
            None => lat,
        };
        d[i] = Some(acc);
    }
    let d: Vec<Var> = d.into_iter().map(Option::unwrap).collect();

    let mut s: Vec<Option<Var>> = vec![None; 5];
    let mut warped: Vec<Option<Var>> = vec![None; 5];
    let mut bm: Vec<Option<Var>> = vec![None; 5];
    let mut sm: Vec<Option<Var>> = vec![None; 5];
    s[4] = Some(d[4]);
    for i in (2..=5).rev() {
        let tp = format!("{prefix}.t{i}");
        let tv = bind_transition(binder, &tp)?;
        let s_i = s[i - 1].unwrap();
        let d_prev = d[i - 2];
        let (s_prev, sm_prev) = if bem {
            let (b_i, w_i) = boundary_residual(s_i, &tv.stn)?;
            warped[i - 1] = Some(w_i);
            let (bt, bm_prev) = predict_boundary(b_i, d_prev, &tv)?;
            bm[i - 2] = Some(bm_prev);
            refine_mask(bt, s_i, w_i, &tv)?
        } else {
            // disabled module: B̃ = 0, identity transform
            let sd = d_prev.shape();
            let s_up = s_i.bilinear_resize(sd[1], sd[2])?;
            let s_prev = Var::concat(0, &[s_up, s_up])?
                .conv2d(tv.rf_w, 1, 1)?
                .add_channel_bias(tv.rf_b)?;
            let sm_prev = s_prev
                .conv2d(tv.sm_w, 1, 0)?
                .add_channel_bias(tv.sm_b)?
                .sigmoid()?;
            (s_prev, sm_prev)
        };
        s[i - 2] = Some(s_prev);
        sm[i - 2] = Some(sm_prev);
    }
    let prediction = sm[0].unwrap().bilinear_resize(out_hw.0, out_hw.1)?;
    Ok(DecoderState {
        d,
        s: s.into_iter().map(Option::unwrap).collect(),
        warped,
        bm,
        sm,
        prediction,
    })
}

/// Nearest-neighbor downsample of a binary map (preserves {0,1} labels).
pub fn nearest_resize_mask(mask: &RawTensor, out_h: usize, out_w: usize) -> RawTensor {
    let (h, w) = (mask.shape[0], mask.shape[1]);
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let sy = (y * h + h / 2) / out_h;
        for x in 0..out_w {
            let sx = (x * w + w / 2) / out_w;
            out[y * out_w + x] = mask.data[sy.min(h - 1) * w + sx.min(w - 1)];
        }
    }
    RawTensor::from_vec(&[out_h, out_w], out)
}

/// Per-term scalars of the supervision, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub mask: f64,
    pub boundary: f64,
    pub stn: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.mask + self.boundary + self.stn
    }
}

/// Sum over supervised levels of mask, boundary, and STN-supervision BCE
/// terms with unit weights, with the per-term breakdown. Ground truth is
/// resized (nearest) to each level's resolution.
pub fn total_loss_terms<'t>(
    state: &DecoderState<'t>,
    binder: &Binder<'t, '_>,
    gt_mask: &RawTensor,
    gt_boundary: &RawTensor,
    prefix: &str,
) -> Result<(Var<'t>, LossTerms)> {
    for t in [gt_mask, gt_boundary] {
        if t.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid_arg("total_loss", "ground truth must be binary"));
        }
    }
    let tape = state.prediction.tape();
    let mut breakdown = LossTerms::default();
    let mut terms: Vec<Var> = Vec::new();
    let leaf_at = |v: Var<'t>, gt: &RawTensor| -> Result<Var<'t>> {
        let s = v.shape();
        let g = nearest_resize_mask(gt, s[1], s[2]);
        tape.leaf(&[1, s[1], s[2]], g.data)
    };
    for i in 0..5 {
        if let Some(sm) = state.sm[i] {
            let t = sm.bce_loss(leaf_at(sm, gt_mask)?)?;
            breakdown.mask += t.scalar();
            terms.push(t);
        }
        if let Some(bm) = state.bm[i] {
            let t = bm.bce_loss(leaf_at(bm, gt_boundary)?)?;
            breakdown.boundary += t.scalar();
            terms.push(t);
        }
        if let Some(w) = state.warped[i] {
            let logit = w
                .conv2d(binder.get(&format!("{prefix}.stnsup.w"))?, 1, 0)?
                .add_channel_bias(binder.get(&format!("{prefix}.stnsup.b"))?)?
                .sigmoid()?;
            let t = logit.bce_loss(leaf_at(logit, gt_mask)?)?;
            breakdown.stn += t.scalar();
            terms.push(t);
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok((total, breakdown))
}

pub fn total_loss<'t>(
    state: &DecoderState<'t>,
    binder: &Binder<'t, '_>,
    gt_mask: &RawTensor,
    gt_boundary: &RawTensor,
    prefix: &str,
) -> Result<Var<'t>> {
    Ok(total_loss_terms(state, binder, gt_mask, gt_boundary, prefix)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rand_leaf<'tp>(tape: &'tp Tape, shape: &[usize], rng: &mut ChaCha8Rng) -> Var<'tp> {
        let n: usize = shape.iter().product();
        tape.leaf(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
            .unwrap()
    }

    fn identity_stn<'tp>(tape: &'tp Tape, c: usize, hidden: usize, rng: &mut ChaCha8Rng) -> StnVars<'tp> {
        StnVars {
            fc1_w: rand_leaf(tape, &[hidden, c], rng),
            fc1_b: tape.leaf(&[hidden, 1], vec![0.0; hidden]).unwrap(),
            fc2_w: tape.leaf(&[6, hidden], vec![0.0; 6 * hidden]).unwrap(),
            fc2_b: tape
                .leaf(&[6, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
                .unwrap(),
        }
    }

    #[test]
    fn identity_stn_gives_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let s = rand_leaf(&tape, &[3, 4, 4], &mut rng);
        let p = identity_stn(&tape, 3, 4, &mut rng);
        let (b, warped) = boundary_residual(s, &p).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert_eq!(warped.data(), s.data());
    }

    #[test]
    fn constant_field_residual_vanishes_inside_borders() {
        // a constant map is invariant under any in-range warp; borders can
        // pick up zero padding, so only interior cells are asserted
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let (c, n) = (2, 6);
        let s = tape.leaf(&[c, n, n], vec![0.8; c * n * n]).unwrap();
        // small random perturbation of the identity transform
        let mut theta = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        for v in theta.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let th = tape.leaf(&[2, 3], theta).unwrap();
        let warped = s.grid_sample_bilinear(th).unwrap();
        let b = s.sub(warped).unwrap();
        let d = b.data();
        for ch in 0..c {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    assert!(d[(ch * n + y) * n + x].abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_cell_shift_isolates_step_edge() {
        // step edge between columns 1 and 2 on a 4×4 map; shifting sampling
        // one cell right makes the residual nonzero exactly where the
        // sampled value differs: the last column inside the step region
        let tape = Tape::new();
        let n = 4;
        let mut img = vec![0.0; n * n];
        for row in img.chunks_mut(n) {
            row[2] = 1.0;
            row[3] = 1.0;
        }
        let s = tape.leaf(&[1, n, n], img).unwrap();
        // x' = x + one cell in normalized units: 2/(n−1)
        let dx = 2.0 / (n - 1) as f64;
        let th = tape.leaf(&[2, 3], vec![1.0, 0.0, dx, 0.0, 1.0, 0.0]).unwrap();
        let warped = s.grid_sample_bilinear(th).unwrap();
        let b = s.sub(warped).unwrap();
        let d = b.data();
        for y in 0..n {
            for x in 0..n {
                let v = d[y * n + x];
                if x == 1 || x == 3 {
                    // col 1 samples the step's rise; col 3 samples zero pad
                    assert!(v.abs() > 0.1, "expected edge response at ({y},{x})");
                } else {
                    assert!(v.abs() <= 1e-12, "expected zero at ({y},{x}), got {v}");
                }
            }
        }
    }

    fn rand_transition<'tp>(
        tape: &'tp Tape,
        c_d: usize,
        rng: &mut ChaCha8Rng,
    ) -> TransitionVars<'tp> {
        TransitionVars {
            stn: identity_stn(tape, c_d, 4, rng),
            bt_w: rand_leaf(tape, &[c_d, 2 * c_d, 3, 3], rng),
            bt_b: rand_leaf(tape, &[c_d], rng),
            bm_w: rand_leaf(tape, &[1, c_d, 1, 1], rng),
            bm_b: rand_leaf(tape, &[1], rng),
            rf_w: rand_leaf(tape, &[c_d, 2 * c_d, 3, 3], rng),
            rf_b: rand_leaf(tape, &[c_d], rng),
            sm_w: rand_leaf(tape, &[1, c_d, 1, 1], rng),
            sm_b: rand_leaf(tape, &[1], rng),
        }
    }

    #[test]
    fn zero_inputs_give_half_boundary_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let c_d = 3;
        let mut tv = rand_transition(&tape, c_d, &mut rng);
        tv.bm_b = tape.leaf(&[1], vec![0.0]).unwrap();
        tv.bt_b = tape.leaf(&[c_d], vec![0.0; c_d]).unwrap();
        let b = tape.leaf(&[c_d, 2, 2], vec![0.0; c_d * 4]).unwrap();
        let d_prev = tape.leaf(&[c_d, 4, 4], vec![0.0; c_d * 16]).unwrap();
        let (_, bm) = predict_boundary(b, d_prev, &tv).unwrap();
        assert!(bm.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn map_ranges_are_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let c_d = 3;
        let tv = rand_transition(&tape, c_d, &mut rng);
        let s_i = rand_leaf(&tape, &[c_d, 4, 4], &mut rng);
        let d_prev = rand_leaf(&tape, &[c_d, 8, 8], &mut rng);
        let (b, w) = boundary_residual(s_i, &tv.stn).unwrap();
        let (bt, bm) = predict_boundary(b, d_prev, &tv).unwrap();
        let (_, sm) = refine_mask(bt, s_i, w, &tv).unwrap();
        for m in [bm, sm] {
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn refine_degenerates_to_duplicated_concat() {
        // identity STN and zero B̃: S_prev = conv(cat(up(S), up(S)))
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let c_d = 3;
        let tv = rand_transition(&tape, c_d, &mut rng);
        let s_i = rand_leaf(&tape, &[c_d, 4, 4], &mut rng);
        let bt = tape.leaf(&[c_d, 8, 8], vec![0.0; c_d * 64]).unwrap();
        let (_, warped) = boundary_residual(s_i, &tv.stn).unwrap();
        let (s_prev, _) = refine_mask(bt, s_i, warped, &tv).unwrap();
        let s_up = s_i.bilinear_resize(8, 8).unwrap();
        let direct = Var::concat(0, &[s_up, s_up])
            .unwrap()
            .conv2d(tv.rf_w, 1, 1)
            .unwrap()
            .add_channel_bias(tv.rf_b)
            .unwrap();
        let (a, b) = (s_prev.data(), direct.data());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transition_gradcheck() {
        use crate::gradcheck::{max_rel_err, InputKind};
        let c_d = 2;
        let shapes: &[&[usize]] = &[
            &[c_d, 4, 4],            // S_i
            &[c_d, 4, 4],            // D_prev
            &[2, c_d],               // stn fc1 w
            &[2, 1],                 // stn fc1 b
            &[6, 2],                 // stn fc2 w
            &[6, 1],                 // stn fc2 b
            &[c_d, 2 * c_d, 3, 3],   // bt w
            &[c_d],                  // bt b
            &[1, c_d, 1, 1],         // bm w
            &[1],                    // bm b
            &[c_d, 2 * c_d, 3, 3],   // rf w
            &[c_d],                  // rf b
            &[1, c_d, 1, 1],         // sm w
            &[1],                    // sm b
        ];
        let err = max_rel_err(shapes, InputKind::AwayFromZero, 41, |_t, xs| {
            // scale the raw fc2 down so sampling stays differentiable
            // (away from the padding boundary's kinks)
            let tv = TransitionVars {
                stn: StnVars {
                    fc1_w: xs[2],
                    fc1_b: xs[3],
                    fc2_w: xs[4].affine(0.05, 0.0)?,
                    fc2_b: xs[5].affine(0.1, 0.0)?,
                },
                bt_w: xs[6],
                bt_b: xs[7],
                bm_w: xs[8],
                bm_b: xs[9],
                rf_w: xs[10],
                rf_b: xs[11],
                sm_w: xs[12],
                sm_b: xs[13],
            };
            let (b, w) = boundary_residual(xs[0], &tv.stn)?;
            let (bt, bm) = predict_boundary(b, xs[1], &tv)?;
            let (s_prev, sm) = refine_mask(bt, xs[0], w, &tv)?;
            s_prev.sum()?.add(sm.sum()?)?.add(bm.sum()?)
        })
        .unwrap();
        assert!(err <= 1e-4, "transition gradcheck rel err {err}");
    }

    fn toy_decoder_setup(seed: u64) -> (DecoderConfig, ParamSet) {
        let cfg = DecoderConfig {
            in_channels: [4, 5, 6, 7, 8],
            c_d: 3,
            stn_hidden: 4,
        };
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_decoder_params(&cfg, "dec", &mut set, &mut rng);
        (cfg, set)
    }

    fn toy_stages<'tp>(tape: &'tp Tape, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Vec<Var<'tp>> {
        let dims = [32, 16, 8, 4, 4];
        cfg.in_channels
            .iter()
            .zip(dims)
            .map(|(&c, n)| rand_leaf(tape, &[c, n, n], rng))
            .collect()
    }

    #[test]
    fn zero_parameters_give_half_prediction() {
        let (cfg, mut set) = toy_decoder_setup(6);
        for (_, t) in set.iter_mut() {
            t.data.fill(0.0);
        }
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stages = toy_stages(&tape, &cfg, &mut rng);
        let binder = Binder::new(&tape, &set, false);
        let state = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();
        assert_eq!(state.prediction.shape(), vec![1, 32, 32]);
        assert!(state.prediction.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn prediction_matches_requested_size_and_masks_cover_levels() {
        let (cfg, set) = toy_decoder_setup(8);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stages = toy_stages(&tape, &cfg, &mut rng);
        let binder = Binder::new(&tape, &set, false);
        let state = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();
        assert_eq!(state.prediction.shape(), vec![1, 32, 32]);
        for i in 0..4 {
            assert!(state.sm[i].is_some());
            assert!(state.bm[i].is_some());
        }
        assert!(state.sm[4].is_none());
        assert!(state.bm[4].is_none());
        // bem off: no boundary maps, no warps
        let state = decode(&stages, &binder, &cfg, false, (32, 32), "dec").unwrap();
        assert!(state.bm.iter().all(Option::is_none));
        assert!(state.warped.iter().all(Option::is_none));
        assert!(state.sm[0].is_some());
    }

    #[test]
    fn bem_off_equals_bem_on_with_zeroed_boundary_path() {
        // zero bt conv (B̃ ≡ 0) + identity-initialized STN ⇒ the enabled
        // path collapses onto the disabled one
        let (cfg, mut set) = toy_decoder_setup(10);
        for i in 2..=5 {
            set.get_mut(&format!("dec.t{i}.bt.w")).unwrap().data.fill(0.0);
            set.get_mut(&format!("dec.t{i}.bt.b")).unwrap().data.fill(0.0);
        }
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stages = toy_stages(&tape, &cfg, &mut rng);
        let binder = Binder::new(&tape, &set, false);
        let on = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();
        let off = decode(&stages, &binder, &cfg, false, (32, 32), "dec").unwrap();
        let (a, b) = (on.prediction.data(), off.prediction.data());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn coarse_maps_ignore_finer_stages() {
        // SM_4 comes from the 5→4 transition; perturbing stages 1–3 must
        // not change it (no information leak upward)
        let (cfg, set) = toy_decoder_setup(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = [32, 16, 8, 4, 4];
        let data: Vec<Vec<f64>> = cfg
            .in_channels
            .iter()
            .zip(dims)
            .map(|(&c, n)| (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = |perturb: bool| {
            let tape = Tape::new();
            let stages: Vec<Var> = cfg
                .in_channels
                .iter()
                .zip(dims)
                .zip(&data)
                .enumerate()
                .map(|(i, ((&c, n), d))| {
                    let mut d = d.clone();
                    if perturb && i < 3 {
                        for v in d.iter_mut() {
                            *v += 0.37;
                        }
                    }
                    tape.leaf(&[c, n, n], d).unwrap()
                })
                .collect();
            let binder = Binder::new(&tape, &set, false);
            let state = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();
            state.sm[3].unwrap().data()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn four_level_toy_decode_matches_hand_composition() {
        // trace the 5→4 transition of a full decode by composing the three
        // ops directly on the same bound parameters
        let (cfg, set) = toy_decoder_setup(14);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let stages = toy_stages(&tape, &cfg, &mut rng);
        let binder = Binder::new(&tape, &set, false);
        let state = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();

        let tv = bind_transition(&binder, "dec.t5").unwrap();
        let s5 = state.s[4];
        let (b5, w5) = boundary_residual(s5, &tv.stn).unwrap();
        let (bt, bm4) = predict_boundary(b5, state.d[3], &tv).unwrap();
        let (s4, sm4) = refine_mask(bt, s5, w5, &tv).unwrap();
        assert_eq!(state.s[3].data(), s4.data());
        assert_eq!(state.sm[3].unwrap().data(), sm4.data());
        assert_eq!(state.bm[3].unwrap().data(), bm4.data());
    }

    #[test]
    fn half_maps_cost_ln2_per_supervised_map() {
        let (cfg, mut set) = toy_decoder_setup(16);
        for (_, t) in set.iter_mut() {
            t.data.fill(0.0);
        }
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let stages = toy_stages(&tape, &cfg, &mut rng);
        let binder = Binder::new(&tape, &set, false);
        let state = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();
        let gt = RawTensor::from_vec(&[32, 32], vec![1.0; 32 * 32]);
        let gtb = RawTensor::zeros(&[32, 32]);
        let loss = total_loss(&state, &binder, &gt, &gtb, "dec").unwrap();
        // 4 mask + 4 boundary + 4 stn terms, each a mean bce of 0.5-maps
        let expect = 12.0 * std::f64::consts::LN_2;
        assert!((loss.scalar() - expect).abs() <= 1e-9, "{}", loss.scalar());
    }

    #[test]
    fn loss_rejects_nonbinary_ground_truth() {
        let (cfg, set) = toy_decoder_setup(18);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let stages = toy_stages(&tape, &cfg, &mut rng);
        let binder = Binder::new(&tape, &set, false);
        let state = decode(&stages, &binder, &cfg, true, (32, 32), "dec").unwrap();
        let gt = RawTensor::from_vec(&[32, 32], vec![0.4; 32 * 32]);
        let gtb = RawTensor::zeros(&[32, 32]);
        assert!(total_loss(&state, &binder, &gt, &gtb, "dec").is_err());
    }

    #[test]
    fn total_loss_gradcheck_through_params() {
        use crate::gradcheck::max_rel_err_params;
        let cfg = DecoderConfig {
            in_channels: [2, 2, 2, 2, 2],
            c_d: 2,
            stn_hidden: 2,
        };
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        init_decoder_params(&cfg, "dec", &mut set, &mut rng);
        // nudge the STN off the exact identity: at identity, sampling sits
        // on pixel centers, a kink of bilinear interpolation where central
        // differences straddle two linear pieces
        for i in 2..=5 {
            for name in ["fc2.w", "fc2.b"] {
                for v in &mut set
                    .get_mut(&format!("dec.t{i}.stn.{name}"))
                    .unwrap()
                    .data
                {
                    *v += rng.gen_range(0.01..0.04);
                }
            }
        }
        let dims = [16, 8, 4, 4, 4];
        let stage_data: Vec<Vec<f64>> = cfg
            .in_channels
            .iter()
            .zip(dims)
            .map(|(&c, n)| (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gt = RawTensor::from_vec(
            &[16, 16],
            (0..256).map(|i| f64::from(i % 3 == 0)).collect(),
        );
        let gtb = RawTensor::from_vec(
            &[16, 16],
            (0..256).map(|i| f64::from(i % 5 == 0)).collect(),
        );
        let err = max_rel_err_params(&set, |binder| {
            let tape = binder.tape;
            let stages: Vec<Var> = cfg
                .in_channels
                .iter()
                .zip(dims)
                .zip(&stage_data)
                .map(|((&c, n), d)| tape.leaf(&[c, n, n], d.clone()))
                .collect::<Result<_>>()?;
            let state = decode(&stages, binder, &cfg, true, (16, 16), "dec")?;
            total_loss(&state, binder, &gt, &gtb, "dec")
        })
        .unwrap();
        assert!(err <= 1e-4, "total_loss gradcheck rel err {err}");
    }
}
