//! Brute-force oracles and gradient checks for the co-attention variants.
//!
//! The asymmetric-module oracle below recomputes M̃ with nothing but nested
//! loops over plain `Vec<f64>` buffers, so it shares no linear-algebra code
//! with the implementation under test.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refseg_core::coattn::{acm_core, vcm, vcm_core, AcmVars, PpmSpec, VcmVars};
use refseg_core::gradcheck::{max_rel_err, InputKind};
use refseg_core::tensor::{Tape, Var};

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Loop-nest reference for the asymmetric module. Inputs are row-major
/// buffers: maps are C×H×W, projections are C1×C. Returns M̃ as C1×H×W.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn acm_oracle(
    m: &[f64],
    l: &[f64],
    w1m: &[f64],
    w2m: &[f64],
    w3m: &[f64],
    w1l: &[f64],
    w2l: &[f64],
    c: usize,
    c1: usize,
    h: usize,
    w: usize,
    bins: &[usize],
) -> Vec<f64> {
    let hw = h * w;
    // project a map with a C1×C matrix: out[o][p] = Σ_i wt[o][i]·x[i][p]
    let project = |wt: &[f64], x: &[f64]| {
        let mut out = vec![0.0; c1 * hw];
        for o in 0..c1 {
            for p in 0..hw {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += wt[o * c + i] * x[i * hw + p];
                }
                out[o * hw + p] = acc;
            }
        }
        out
    };
    // adaptive-average-pool a C1×H×W buffer over the pyramid bins and
    // flatten to C1×N (bins in listed order, each row-major)
    let pool = |x: &[f64]| {
        let cap = h.min(w);
        let n: usize = bins.iter().map(|&b| b.min(cap) * b.min(cap)).sum();
        let mut out = vec![0.0; c1 * n];
        for ch in 0..c1 {
            let mut col = 0;
            for &b in bins {
                let b = b.min(cap);
                for by in 0..b {
                    let y0 = by * h / b;
                    let y1 = ((by + 1) * h).div_ceil(b).min(h);
                    for bx in 0..b {
                        let x0 = bx * w / b;
                        let x1 = ((bx + 1) * w).div_ceil(b).min(w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc += x[(ch * h + y) * w + xx];
                            }
                        }
                        out[ch * n + col] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                        col += 1;
                    }
                }
            }
        }
        out
    };

    let n: usize = {
        let cap = h.min(w);
        bins.iter().map(|&b| b.min(cap) * b.min(cap)).sum()
    };
    let pooled1m = pool(&project(w1m, m));
    let p2m = project(w2m, m);
    let pooled1l = pool(&project(w1l, l));
    let p2l = project(w2l, l);

    // SA[a][p] = Σ_o pooled1[o][a]·p2[o][p], summed over both modalities
    let mut sa = vec![0.0; n * hw];
    for a in 0..n {
        for p in 0..hw {
            let mut acc = 0.0;
            for o in 0..c1 {
                acc += pooled1m[o * n + a] * p2m[o * hw + p];
                acc += pooled1l[o * n + a] * p2l[o * hw + p];
            }
            sa[a * hw + p] = acc;
        }
    }

    // A3 = softmax over anchors of SAᵀ: A3[p][a] row-stochastic in a
    let mut a3 = vec![0.0; hw * n];
    for p in 0..hw {
        let mut mx = f64::NEG_INFINITY;
        for a in 0..n {
            mx = mx.max(sa[a * hw + p]);
        }
        let mut z = 0.0;
        for a in 0..n {
            let e = (sa[a * hw + p] - mx).exp();
            a3[p * n + a] = e;
            z += e;
        }
        for a in 0..n {
            a3[p * n + a] /= z;
        }
    }

    // M̃[o][p] = Σ_a A3[p][a]·pooled3m[o][a]
    let pooled3m = pool(&project(w3m, m));
    let mut m_t = vec![0.0; c1 * hw];
    for o in 0..c1 {
        for p in 0..hw {
            let mut acc = 0.0;
            for a in 0..n {
                acc += a3[p * n + a] * pooled3m[o * n + a];
            }
            m_t[o * hw + p] = acc;
        }
    }
    m_t
}

#[test]
fn acm_matches_loop_nest_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (c, c1, h, w) = (4, 3, 8, 8);
    let hw = h * w;
    let m = rand_vec(c * hw, &mut rng);
    let l = rand_vec(c * hw, &mut rng);
    let ws: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(c1 * c, &mut rng)).collect();

    let spec = PpmSpec::default();
    assert_eq!(spec.anchor_count(h, w), 110);

    let tape = Tape::new();
    let leaf = |shape: &[usize], data: &Vec<f64>| tape.leaf(shape, data.clone()).unwrap();
    let p = AcmVars {
        w1_m: leaf(&[c1, c], &ws[0]),
        w2_m: leaf(&[c1, c], &ws[1]),
        w3_m: leaf(&[c1, c], &ws[2]),
        w1_l: leaf(&[c1, c], &ws[3]),
        w2_l: leaf(&[c1, c], &ws[4]),
        w3_l: leaf(&[c1, c], &ws[5]),
        // fuse weights are unused by the core path
        fuse_w: leaf(&[1, 2 * c1, 3, 3], &vec![0.0; 2 * c1 * 9]),
        fuse_b: leaf(&[1], &vec![0.0]),
    };
    let mv = tape.leaf(&[c, h, w], m.clone()).unwrap();
    let lv = tape.leaf(&[c, h, w], l.clone()).unwrap();
    let (m_t, _, _) = acm_core(mv, lv, &p, &spec, false).unwrap();

    let expect = acm_oracle(
        &m, &l, &ws[0], &ws[1], &ws[2], &ws[3], &ws[4], c, c1, h, w, &spec.bins,
    );
    let got = m_t.data();
    assert_eq!(got.len(), expect.len());
    let worst = got
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-10, "max abs deviation {worst}");
}

#[test]
fn vcm_is_equivariant_under_spatial_permutation() {
    // permuting the shared spatial layout of M and L permutes M̃ and L̃
    // the same way (flattening is row-major, so a cell shuffle is a
    // flat-position shuffle)
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (c, h, w) = (3, 2, 3);
    let hw = h * w;
    let m = rand_vec(c * hw, &mut rng);
    let l = rand_vec(c * hw, &mut rng);
    let wm = rand_vec(2 * c, &mut rng);
    let wl = rand_vec(2 * c, &mut rng);
    let perm: Vec<usize> = vec![4, 0, 5, 2, 1, 3];
    let permute = |x: &[f64]| {
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            for (p, &src) in perm.iter().enumerate() {
                out[ch * hw + p] = x[ch * hw + src];
            }
        }
        out
    };

    let run = |mdat: Vec<f64>, ldat: Vec<f64>| {
        let tape = Tape::new();
        let mv = tape.leaf(&[c, h, w], mdat).unwrap();
        let lv = tape.leaf(&[c, h, w], ldat).unwrap();
        let wmv = tape.leaf(&[2, c], wm.clone()).unwrap();
        let wlv = tape.leaf(&[2, c], wl.clone()).unwrap();
        let (m_t, l_t, _) = vcm_core(mv, lv, wmv, wlv, false).unwrap();
        (m_t.data(), l_t.data())
    };
    let (base_m, base_l) = run(m.clone(), l.clone());
    let (perm_m, perm_l) = run(permute(&m), permute(&l));
    for (got, base) in [(perm_m, base_m), (perm_l, base_l)] {
        let expect = permute(&base);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn vcm_full_path_gradcheck() {
    let (c, c1, c2, h, w) = (2, 2, 2, 3, 3);
    let shapes: &[&[usize]] = &[
        &[c, h, w],
        &[c, h, w],
        &[c1, c],
        &[c1, c],
        &[c2, 2 * c, 3, 3],
        &[c2],
    ];
    let err = max_rel_err(shapes, InputKind::Uniform, 17, |_tape, xs| {
        let p = VcmVars {
            w_m: xs[2],
            w_l: xs[3],
            fuse_w: xs[4],
            fuse_b: xs[5],
        };
        let (f, m_t, l_t, _) = vcm(xs[0], xs[1], &p, false)?;
        // fold every output into the scalar so all paths carry gradient
        f.sum()?.add(m_t.sum()?)?.add(l_t.sum()?)
    })
    .unwrap();
    assert!(err <= 1e-4, "vcm gradcheck rel err {err}");
}

#[test]
fn acm_core_gradcheck() {
    let (c, c1, h, w) = (2, 2, 4, 4);
    let shapes: &[&[usize]] = &[
        &[c, h, w],
        &[c, h, w],
        &[c1, c],
        &[c1, c],
        &[c1, c],
        &[c1, c],
        &[c1, c],
        &[c1, c],
    ];
    let spec = PpmSpec {
        bins: vec![1, 2, 3],
    };
    let err = max_rel_err(shapes, InputKind::Uniform, 19, |tape, xs| {
        let p = AcmVars {
            w1_m: xs[2],
            w2_m: xs[3],
            w3_m: xs[4],
            w1_l: xs[5],
            w2_l: xs[6],
            w3_l: xs[7],
            fuse_w: tape.leaf(&[1, 2 * c1, 3, 3], vec![0.0; 2 * c1 * 9])?,
            fuse_b: tape.leaf(&[1], vec![0.0])?,
        };
        let (m_t, l_t, _) = acm_core(xs[0], xs[1], &p, &spec, false)?;
        m_t.sum()?.add(l_t.sum()?)
    })
    .unwrap();
    assert!(err <= 1e-4, "acm gradcheck rel err {err}");
}

#[test]
fn ppm_pool_preserves_global_mean_for_bin_one() {
    // the 1×1 bin of the pyramid is exactly the global average
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (c, h, w) = (2, 5, 7);
    let data = rand_vec(c * h * w, &mut rng);
    let tape = Tape::new();
    let x = tape.leaf(&[c, h, w], data.clone()).unwrap();
    let pooled = refseg_core::coattn::ppm(x, &PpmSpec::default()).unwrap();
    let n = PpmSpec::default().anchor_count(h, w);
    let out = pooled.data();
    for ch in 0..c {
        let mean: f64 = data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        assert!((out[ch * n] - mean).abs() <= 1e-12);
    }
}

#[test]
fn concat_order_sanity() {
    // guard the artifact layout the oracle assumes: Var data round-trips
    let tape = Tape::new();
    let a = tape.leaf(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.leaf(&[1, 2], vec![3.0, 4.0]).unwrap();
    let cat = Var::concat(1, &[a, b]).unwrap();
    assert_eq!(cat.data(), vec![1.0, 2.0, 3.0, 4.0]);
}
