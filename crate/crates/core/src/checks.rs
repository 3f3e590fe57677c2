//! Registry of named gradient checks.
//!
//! Each entry verifies one op's backward rule or one composed module
//! (text encoder, initial fusion + adaptive context, VCM, ACM, BEM chain,
//! total loss) against central finite differences over several seeds. A
//! hidden negative-control entry routes a deliberately corrupted backward
//! rule through the same harness; it must come out failing.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coattn::{acm, bind_acm, bind_vcm, init_acm_params, init_vcm_params, vcm, PpmSpec};
use crate::decoder::{
    boundary_residual, decode, init_decoder_params, predict_boundary, refine_mask, total_loss,
    DecoderConfig, StnVars, TransitionVars,
};
use crate::encoder::{adaptive_linguistic_context, initial_fusion};
use crate::gradcheck::{max_rel_err_params, max_rel_err_seeds, InputKind};
use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Tape, Var};
use crate::text::{self, TextEncoderCfg, TokenSequence};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

struct Entry {
    name: &'static str,
    /// hidden entries only run when a filter names them (negative controls)
    hidden: bool,
    run: Box<dyn Fn(u64, u64) -> Result<f64>>,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// y = 2x elementwise, but the backward rule claims dy/dx = 1. Exists only
/// so the harness can prove it catches a wrong rule.
fn corrupted_double<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let data: Vec<f64> = x.with_data(|_, v| v.iter().map(|&e| 2.0 * e).collect());
    let xid = x.id;
    x.tape().push(
        "corrupted_double",
        shape,
        data,
        false,
        Some(Box::new(move |_, g, sink| {
            let slot = sink.slot(xid);
            for i in 0..g.len() {
                slot[i] += g[i]; // wrong on purpose: should be 2·g[i]
            }
        })),
        &[xid],
    )
}

fn text_encoder_check(seed: u64) -> Result<f64> {
    let cfg = TextEncoderCfg {
        vocab_size: 6,
        embed_dim: 3,
        hidden: 2,
        max_len: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    text::init_text_params(&cfg, "t", &mut set, &mut rng);
    let seq = TokenSequence {
        ids: vec![1, 3, 2],
    };
    let w_words = rand_vec(&mut rng, 3 * 2 * cfg.hidden, -1.0, 1.0);
    let w_sent = rand_vec(&mut rng, 2 * cfg.hidden, -1.0, 1.0);
    max_rel_err_params(&set, move |binder| {
        let ling = text::encode(binder, &cfg, &seq, "t")?;
        let ww = binder.tape.leaf(&[3, 2 * cfg.hidden], w_words.clone())?;
        let ws = binder.tape.leaf(&[2 * cfg.hidden, 1], w_sent.clone())?;
        ling.h_words
            .mul(ww)?
            .sum()?
            .add(ling.h_sent.mul(ws)?.sum()?)
    })
}

fn fusion_check(seed: u64) -> Result<f64> {
    // initial fusion feeding the adaptive linguistic context
    let (c, c_mm, sent, ce, t_len, h, w) = (2usize, 2usize, 3usize, 3usize, 3usize, 2usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    set.insert(
        "f.m.w",
        RawTensor::uniform_fan_in(&[c_mm, c + sent + 8, 1, 1], c + sent + 8, &mut rng),
    );
    set.insert(
        "f.m.b",
        RawTensor::from_vec(&[c_mm], rand_vec(&mut rng, c_mm, -0.3, 0.3)),
    );
    set.insert("f.p", RawTensor::uniform_fan_in(&[c_mm, ce], ce, &mut rng));
    set.insert("f.q", RawTensor::uniform_fan_in(&[c_mm, ce], ce, &mut rng));
    let e_i = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let h_sent = rand_vec(&mut rng, sent, 0.2, 1.0);
    let e_words = rand_vec(&mut rng, t_len * ce, -1.0, 1.0);
    let wt = rand_vec(&mut rng, c_mm * h * w, -1.0, 1.0);
    max_rel_err_params(&set, move |binder| {
        let e = binder.tape.leaf(&[c, h, w], e_i.clone())?;
        let hs = binder.tape.leaf(&[sent], h_sent.clone())?;
        let ew = binder.tape.leaf(&[t_len, ce], e_words.clone())?;
        let weight = binder.tape.leaf(&[c_mm, h, w], wt.clone())?;
        let m = initial_fusion(e, hs, binder.get("f.m.w")?, binder.get("f.m.b")?)?;
        let l = adaptive_linguistic_context(m, ew, binder.get("f.p")?, binder.get("f.q")?)?;
        l.mul(weight)?.sum()?.add(m.sum()?)
    })
}

fn vcm_check(seed: u64) -> Result<f64> {
    let (c, c1, c2, h, w) = (3usize, 2usize, 2usize, 3usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    init_vcm_params(c, c1, c2, "v", &mut set, &mut rng);
    let m = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let l = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let wt = rand_vec(&mut rng, c2 * h * w, -1.0, 1.0);
    max_rel_err_params(&set, move |binder| {
        let mv = binder.tape.leaf(&[c, h, w], m.clone())?;
        let lv = binder.tape.leaf(&[c, h, w], l.clone())?;
        let weight = binder.tape.leaf(&[c2, h, w], wt.clone())?;
        let vars = bind_vcm(binder, "v")?;
        let (f, m_t, l_t, _) = vcm(mv, lv, &vars, false)?;
        f.mul(weight)?.sum()?.add(m_t.sum()?)?.add(l_t.sum()?)
    })
}

fn acm_check(seed: u64) -> Result<f64> {
    let (c, c1, c2, h, w) = (3usize, 2usize, 2usize, 3usize, 3usize);
    let spec = PpmSpec { bins: vec![1, 2] };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    init_acm_params(c, c1, c2, "a", &mut set, &mut rng);
    let m = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let l = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    let wt = rand_vec(&mut rng, c2 * h * w, -1.0, 1.0);
    max_rel_err_params(&set, move |binder| {
        let mv = binder.tape.leaf(&[c, h, w], m.clone())?;
        let lv = binder.tape.leaf(&[c, h, w], l.clone())?;
        let weight = binder.tape.leaf(&[c2, h, w], wt.clone())?;
        let vars = bind_acm(binder, "a")?;
        let (f, m_t, l_t, _) = acm(mv, lv, &vars, &spec, false)?;
        f.mul(weight)?.sum()?.add(m_t.sum()?)?.add(l_t.sum()?)
    })
}

fn bind_bem<'t>(binder: &Binder<'t, '_>) -> Result<TransitionVars<'t>> {
    Ok(TransitionVars {
        stn: StnVars {
            fc1_w: binder.get("b.stn.fc1.w")?,
            fc1_b: binder.get("b.stn.fc1.b")?,
            fc2_w: binder.get("b.stn.fc2.w")?,
            fc2_b: binder.get("b.stn.fc2.b")?,
        },
        bt_w: binder.get("b.bt.w")?,
        bt_b: binder.get("b.bt.b")?,
        bm_w: binder.get("b.bm.w")?,
        bm_b: binder.get("b.bm.b")?,
        rf_w: binder.get("b.rf.w")?,
        rf_b: binder.get("b.rf.b")?,
        sm_w: binder.get("b.sm.w")?,
        sm_b: binder.get("b.sm.b")?,
    })
}

fn bem_chain_check(seed: u64) -> Result<f64> {
    // boundary_residual → predict_boundary → refine_mask with the STN nudged
    // off identity: at the exact identity the warp samples on pixel centers,
    // a kink of bilinear interpolation where finite differences are invalid.
    let (c, hid) = (2usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    set.insert(
        "b.stn.fc1.w",
        RawTensor::uniform_fan_in(&[hid, c], c, &mut rng),
    );
    set.insert(
        "b.stn.fc1.b",
        RawTensor::from_vec(&[hid, 1], rand_vec(&mut rng, hid, -0.3, 0.3)),
    );
    set.insert(
        "b.stn.fc2.w",
        RawTensor::from_vec(&[6, hid], rand_vec(&mut rng, 6 * hid, -0.05, 0.05)),
    );
    let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let fc2_b: Vec<f64> = identity
        .iter()
        .map(|&v| v + rng.gen_range(0.01..0.04) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    set.insert("b.stn.fc2.b", RawTensor::from_vec(&[6, 1], fc2_b));
    set.insert(
        "b.bt.w",
        RawTensor::uniform_fan_in(&[c, 2 * c, 3, 3], 2 * c * 9, &mut rng),
    );
    set.insert("b.bt.b", RawTensor::from_vec(&[c], rand_vec(&mut rng, c, 0.05, 0.3)));
    set.insert("b.bm.w", RawTensor::uniform_fan_in(&[1, c, 1, 1], c, &mut rng));
    set.insert("b.bm.b", RawTensor::zeros(&[1]));
    set.insert(
        "b.rf.w",
        RawTensor::uniform_fan_in(&[c, 2 * c, 3, 3], 2 * c * 9, &mut rng),
    );
    set.insert("b.rf.b", RawTensor::zeros(&[c]));
    set.insert("b.sm.w", RawTensor::uniform_fan_in(&[1, c, 1, 1], c, &mut rng));
    set.insert("b.sm.b", RawTensor::zeros(&[1]));

    let s_i = rand_vec(&mut rng, c * 4 * 4, -1.0, 1.0);
    let d_prev = rand_vec(&mut rng, c * 8 * 8, -1.0, 1.0);
    let w_sm = rand_vec(&mut rng, 64, -1.0, 1.0);
    let w_bm = rand_vec(&mut rng, 64, -1.0, 1.0);
    max_rel_err_params(&set, move |binder| {
        let s = binder.tape.leaf(&[c, 4, 4], s_i.clone())?;
        let d = binder.tape.leaf(&[c, 8, 8], d_prev.clone())?;
        let wsm = binder.tape.leaf(&[1, 8, 8], w_sm.clone())?;
        let wbm = binder.tape.leaf(&[1, 8, 8], w_bm.clone())?;
        let p = bind_bem(binder)?;
        let (b, warped) = boundary_residual(s, &p.stn)?;
        let (bt, bm) = predict_boundary(b, d, &p)?;
        let (s_prev, sm) = refine_mask(bt, s, warped, &p)?;
        sm.mul(wsm)?
            .sum()?
            .add(bm.mul(wbm)?.sum()?)?
            .add(s_prev.sum()?)
    })
}

fn total_loss_check(seed: u64) -> Result<f64> {
    let cfg = DecoderConfig {
        in_channels: [2; 5],
        c_d: 2,
        stn_hidden: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    init_decoder_params(&cfg, "d", &mut set, &mut rng);
    // push each STN off the exact-identity bilinear kink (see bem_chain_check)
    for i in 2..=5 {
        for suffix in ["w", "b"] {
            let t = set
                .get_mut(&format!("d.t{i}.stn.fc2.{suffix}"))
                .expect("decoder params were just initialized");
            for v in &mut t.data {
                *v += rng.gen_range(0.01..0.04) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }
    let sizes = [4usize, 2, 2, 2, 2];
    let stage_data: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&s| rand_vec(&mut rng, 2 * s * s, -1.0, 1.0))
        .collect();
    let gt_mask = RawTensor::from_vec(
        &[4, 4],
        vec![
            0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, 0.0, //
            0.0, 1.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ],
    );
    let gt_boundary = RawTensor::from_vec(
        &[4, 4],
        vec![
            0.0, 1.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, 1.0, //
            1.0, 0.0, 0.0, 1.0, //
            0.0, 1.0, 1.0, 0.0,
        ],
    );
    max_rel_err_params(&set, move |binder| {
        let stages: Vec<Var> = sizes
            .iter()
            .zip(&stage_data)
            .map(|(&s, d)| binder.tape.leaf(&[2, s, s], d.clone()))
            .collect::<Result<_>>()?;
        let state = decode(&stages, binder, &cfg, true, (4, 4), "d")?;
        total_loss(&state, binder, &gt_mask, &gt_boundary, "d")
    })
}

fn over_seeds(base: u64, n: u64, f: impl Fn(u64) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..n {
        worst = worst.max(f(base + s)?);
    }
    Ok(worst)
}

fn registry() -> Vec<Entry> {
    use InputKind::{AwayFromZero, Uniform};
    let mut entries: Vec<Entry> = Vec::new();
    let op = |name: &'static str,
                  shapes: &'static [&'static [usize]],
                  kind: InputKind,
                  f: for<'a> fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>| {
        Entry {
            name,
            hidden: false,
            run: Box::new(move |seed, n| max_rel_err_seeds(shapes, kind, seed, n, f)),
        }
    };

    entries.push(op("op.add-sub-mul-affine", &[&[2, 3], &[2, 3]], Uniform, |_, v| {
        v[0].add(v[1])?.mul(v[0])?.sub(v[1].affine(1.3, 0.2)?)?.sum()
    }));
    entries.push(op("op.relu", &[&[2, 4], &[2, 4]], AwayFromZero, |_, v| {
        v[0].relu()?.mul(v[1])?.sum()
    }));
    entries.push(op("op.sigmoid", &[&[6], &[6]], Uniform, |_, v| {
        v[0].sigmoid()?.mul(v[1])?.sum()
    }));
    entries.push(op("op.tanh", &[&[6], &[6]], Uniform, |_, v| {
        v[0].tanh()?.mul(v[1])?.sum()
    }));
    entries.push(op("op.matmul", &[&[3, 4], &[4, 2]], Uniform, |_, v| {
        v[0].matmul(v[1])?.sum()
    }));
    entries.push(op("op.transpose-reshape", &[&[3, 4], &[4, 3]], Uniform, |_, v| {
        v[0].transpose2d()?.mul(v[1])?.reshape(&[2, 6])?.sum()
    }));
    entries.push(op("op.softmax-rows", &[&[3, 4], &[3, 4]], Uniform, |_, v| {
        v[0].softmax_rows()?.mul(v[1])?.sum()
    }));
    entries.push(op("op.concat-slice", &[&[2, 3], &[1, 3], &[2, 3]], Uniform, |_, v| {
        Var::concat(0, &[v[0], v[1]])?.slice_rows(1, 2)?.mul(v[2])?.sum()
    }));
    entries.push(op("op.gather-rows", &[&[5, 3], &[4, 3]], Uniform, |_, v| {
        v[0].gather_rows(&[0, 2, 2, 4])?.mul(v[1])?.sum()
    }));
    entries.push(op("op.broadcast-mean", &[&[4], &[4, 2, 3]], Uniform, |_, v| {
        v[0].broadcast_to_map(2, 3)?.mul(v[1])?.mean()
    }));
    entries.push(op("op.l2-normalize", &[&[3, 2, 2], &[3, 2, 2]], AwayFromZero, |_, v| {
        v[0].l2_normalize_channels()?.mul(v[1])?.sum()
    }));
    entries.push(op(
        "op.channel-standardize",
        &[&[3, 2, 3], &[3, 2, 3]],
        Uniform,
        |_, v| v[0].channel_standardize(1e-5)?.mul(v[1])?.sum(),
    ));
    entries.push(op("op.bce-loss", &[&[2, 3]], Uniform, |tape, v| {
        let target = tape.leaf(&[2, 3], vec![0.1, 0.9, 0.3, 0.7, 0.5, 0.25])?;
        v[0].sigmoid()?.bce_loss(target)
    }));
    entries.push(op(
        "op.conv2d",
        &[&[2, 4, 4], &[3, 2, 3, 3], &[3], &[3]],
        Uniform,
        |_, v| {
            v[0].conv2d(v[1], 2, 1)?
                .add_channel_bias(v[2])?
                .mul_channel_scale(v[3])?
                .sum()
        },
    ));
    entries.push(op(
        "op.pool-resize",
        &[&[2, 5, 5], &[2, 7, 9]],
        Uniform,
        |_, v| {
            let pooled = v[0].adaptive_avg_pool(2, 3)?.sum()?;
            v[0].bilinear_resize(7, 9)?.mul(v[1])?.sum()?.add(pooled)
        },
    ));
    entries.push(op(
        "op.grid-sample",
        &[&[1, 4, 4], &[2, 3], &[1, 4, 4]],
        Uniform,
        |tape, v| {
            // keep the warp near — but never exactly at — identity so every
            // sample point stays off the bilinear kinks at pixel centers
            let identity = tape.leaf(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
            let theta = identity.add(v[1].affine(0.07, 0.013)?)?;
            v[0].grid_sample_bilinear(theta)?.mul(v[2])?.sum()
        },
    ));

    entries.push(Entry {
        name: "module.text-encoder",
        hidden: false,
        run: Box::new(|seed, n| over_seeds(seed, n, text_encoder_check)),
    });
    entries.push(Entry {
        name: "module.initial-fusion-context",
        hidden: false,
        run: Box::new(|seed, n| over_seeds(seed, n, fusion_check)),
    });
    entries.push(Entry {
        name: "module.vcm",
        hidden: false,
        run: Box::new(|seed, n| over_seeds(seed, n, vcm_check)),
    });
    entries.push(Entry {
        name: "module.acm",
        hidden: false,
        run: Box::new(|seed, n| over_seeds(seed, n, acm_check)),
    });
    entries.push(Entry {
        name: "module.bem-chain",
        hidden: false,
        run: Box::new(|seed, n| over_seeds(seed, n, bem_chain_check)),
    });
    entries.push(Entry {
        name: "module.total-loss",
        hidden: false,
        run: Box::new(|seed, n| over_seeds(seed, n, total_loss_check)),
    });
    entries.push(Entry {
        name: "negative-control",
        hidden: true,
        run: Box::new(|seed, n| {
            max_rel_err_seeds(&[&[5]], InputKind::Uniform, seed, n, |_, v| {
                corrupted_double(v[0])?.sum()
            })
        }),
    });
    entries
}

pub fn check_names() -> Vec<&'static str> {
    registry().iter().map(|e| e.name).collect()
}

/// Run every (non-hidden) check whose name contains `filter`, worst error
/// over `n_seeds` seeds each. A filter that matches nothing is an error.
pub fn run_checks(
    filter: Option<&str>,
    base_seed: u64,
    n_seeds: u64,
) -> Result<Vec<CheckResult>> {
    let entries = registry();
    let selected: Vec<&Entry> = match filter {
        None => entries.iter().filter(|e| !e.hidden).collect(),
        Some(f) => entries.iter().filter(|e| e.name.contains(f)).collect(),
    };
    if selected.is_empty() {
        return Err(invalid_arg(
            "gradcheck",
            format!("filter {:?} matches no registered check", filter.unwrap_or("")),
        ));
    }
    let mut out = Vec::with_capacity(selected.len());
    for e in selected {
        let err = (e.run)(base_seed, n_seeds)?;
        out.push(CheckResult {
            name: e.name,
            max_rel_err: err,
            pass: err <= TOLERANCE,
        });
    }
    Ok(out)
}
