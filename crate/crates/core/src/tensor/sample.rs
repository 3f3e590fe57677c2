//! Spatial resampling ops: adaptive average pooling, bilinear resize, and
//! affine grid sampling (the differentiable warp behind the STN).

use super::error::{invalid, Result, TensorError};
use super::tape::Var;

/// floor/ceil bin partition: bin `i` of `out` over `inp` spans
/// [floor(i·inp/out), ceil((i+1)·inp/out)).
fn bin_bounds(i: usize, out: usize, inp: usize) -> (usize, usize) {
    let lo = i * inp / out;
    let hi = ((i + 1) * inp).div_ceil(out);
    (lo, hi.min(inp))
}

/// Normalized [−1,1] coordinate of pixel `i` on an axis of length `n`
/// (align-corners convention; a single pixel sits at 0).
fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

impl<'t> Var<'t> {
    pub fn adaptive_avg_pool(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid("adaptive_avg_pool", format!("expected 3-D, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if out_h == 0 || out_w == 0 {
            return Err(invalid("adaptive_avg_pool", "zero output dims"));
        }
        if out_h > h || out_w > w {
            return Err(invalid(
                "adaptive_avg_pool",
                format!("output {out_h}×{out_w} exceeds input {h}×{w}"),
            ));
        }
        let data = self.with_data(|_, x| {
            let mut out = vec![0.0; c * out_h * out_w];
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1) = bin_bounds(oy, out_h, h);
                    for ox in 0..out_w {
                        let (x0, x1) = bin_bounds(ox, out_w, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += plane[y * w + x];
                            }
                        }
                        out[(ch * out_h + oy) * out_w + ox] =
                            acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
            out
        });
        let xid = self.id;
        self.tape.push(
            "adaptive_avg_pool",
            vec![c, out_h, out_w],
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                let slot = sink.slot(xid);
                for ch in 0..c {
                    for oy in 0..out_h {
                        let (y0, y1) = bin_bounds(oy, out_h, h);
                        for ox in 0..out_w {
                            let (x0, x1) = bin_bounds(ox, out_w, w);
                            let gv = g[(ch * out_h + oy) * out_w + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    slot[(ch * h + y) * w + x] += gv;
                                }
                            }
                        }
                    }
                }
            })),
            &[xid],
        )
    }

    /// Align-corners bilinear resize of a [C,H,W] tensor.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid("bilinear_resize", format!("expected 3-D, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", "zero output dims"));
        }
        let map = |o: usize, on: usize, n: usize| -> f64 {
            if on <= 1 {
                0.0
            } else {
                o as f64 * (n - 1) as f64 / (on - 1) as f64
            }
        };
        let data = self.with_data(|_, x| {
            let mut out = vec![0.0; c * out_h * out_w];
            for oy in 0..out_h {
                let sy = map(oy, out_h, h);
                let y0 = (sy.floor() as usize).min(h - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fy = sy - y0 as f64;
                for ox in 0..out_w {
                    let sx = map(ox, out_w, w);
                    let x0 = (sx.floor() as usize).min(w - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = sx - x0 as f64;
                    for ch in 0..c {
                        let plane = &x[ch * h * w..(ch + 1) * h * w];
                        let v = (1.0 - fy) * (1.0 - fx) * plane[y0 * w + x0]
                            + (1.0 - fy) * fx * plane[y0 * w + x1]
                            + fy * (1.0 - fx) * plane[y1 * w + x0]
                            + fy * fx * plane[y1 * w + x1];
                        out[(ch * out_h + oy) * out_w + ox] = v;
                    }
                }
            }
            out
        });
        let xid = self.id;
        self.tape.push(
            "bilinear_resize",
            vec![c, out_h, out_w],
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                let slot = sink.slot(xid);
                for oy in 0..out_h {
                    let sy = map(oy, out_h, h);
                    let y0 = (sy.floor() as usize).min(h - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let fy = sy - y0 as f64;
                    for ox in 0..out_w {
                        let sx = map(ox, out_w, w);
                        let x0 = (sx.floor() as usize).min(w - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        let fx = sx - x0 as f64;
                        for ch in 0..c {
                            let gv = g[(ch * out_h + oy) * out_w + ox];
                            let base = ch * h * w;
                            slot[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            slot[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            slot[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            slot[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            })),
            &[xid],
        )
    }

    /// Sample `self` [C,H,W] at the affine warp given by `theta` [2,3] in
    /// normalized [−1,1] coordinates. Out-of-range samples read as zero.
    /// Differentiable with respect to both the input and `theta`.
    pub fn grid_sample_bilinear(self, theta: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let st = theta.shape();
        if s.len() != 3 || st != [2, 3] {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample_bilinear",
                lhs: s,
                rhs: st,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let forward = |x: &[f64], t: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; c * h * w];
            for oy in 0..h {
                let yn = norm_coord(oy, h);
                for ox in 0..w {
                    let xn = norm_coord(ox, w);
                    let xs_n = t[0] * xn + t[1] * yn + t[2];
                    let ys_n = t[3] * xn + t[4] * yn + t[5];
                    let xs = (xs_n + 1.0) * (w - 1) as f64 / 2.0;
                    let ys = (ys_n + 1.0) * (h - 1) as f64 / 2.0;
                    let x0 = xs.floor() as isize;
                    let y0 = ys.floor() as isize;
                    let fx = xs - x0 as f64;
                    let fy = ys - y0 as f64;
                    let at = |xi: isize, yi: isize, plane: &[f64]| -> f64 {
                        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                            0.0
                        } else {
                            plane[yi as usize * w + xi as usize]
                        }
                    };
                    for ch in 0..c {
                        let plane = &x[ch * h * w..(ch + 1) * h * w];
                        let v = (1.0 - fy) * (1.0 - fx) * at(x0, y0, plane)
                            + (1.0 - fy) * fx * at(x0 + 1, y0, plane)
                            + fy * (1.0 - fx) * at(x0, y0 + 1, plane)
                            + fy * fx * at(x0 + 1, y0 + 1, plane);
                        out[(ch * h + oy) * w + ox] = v;
                    }
                }
            }
            out
        };
        let data = self.with_data(|_, x| theta.with_data(|_, t| forward(x, t)));
        let (xid, tid) = (self.id, theta.id);
        self.tape.push(
            "grid_sample_bilinear",
            vec![c, h, w],
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[xid].data;
                let t = &vals[tid].data;
                let mut dtheta = [0.0; 6];
                {
                    let dx = sink.slot(xid);
                    for oy in 0..h {
                        let yn = norm_coord(oy, h);
                        for ox in 0..w {
                            let xn = norm_coord(ox, w);
                            let xs_n = t[0] * xn + t[1] * yn + t[2];
                            let ys_n = t[3] * xn + t[4] * yn + t[5];
                            let xs = (xs_n + 1.0) * (w - 1) as f64 / 2.0;
                            let ys = (ys_n + 1.0) * (h - 1) as f64 / 2.0;
                            let x0 = xs.floor() as isize;
                            let y0 = ys.floor() as isize;
                            let fx = xs - x0 as f64;
                            let fy = ys - y0 as f64;
                            let inb = |xi: isize, yi: isize| {
                                xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h
                            };
                            let mut dvdxs = 0.0;
                            let mut dvdys = 0.0;
                            for ch in 0..c {
                                let gv = g[(ch * h + oy) * w + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                let base = ch * h * w;
                                let at = |xi: isize, yi: isize| -> f64 {
                                    if inb(xi, yi) {
                                        x[base + yi as usize * w + xi as usize]
                                    } else {
                                        0.0
                                    }
                                };
                                let (v00, v10, v01, v11) =
                                    (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
                                // input gradient: bilinear weights scatter
                                let mut put = |xi: isize, yi: isize, wgt: f64| {
                                    if inb(xi, yi) {
                                        dx[base + yi as usize * w + xi as usize] += gv * wgt;
                                    }
                                };
                                put(x0, y0, (1.0 - fy) * (1.0 - fx));
                                put(x0 + 1, y0, (1.0 - fy) * fx);
                                put(x0, y0 + 1, fy * (1.0 - fx));
                                put(x0 + 1, y0 + 1, fy * fx);
                                // continuous-coordinate gradient for theta
                                dvdxs += gv * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                                dvdys += gv * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                            }
                            let dxs_n = dvdxs * (w - 1) as f64 / 2.0;
                            let dys_n = dvdys * (h - 1) as f64 / 2.0;
                            dtheta[0] += dxs_n * xn;
                            dtheta[1] += dxs_n * yn;
                            dtheta[2] += dxs_n;
                            dtheta[3] += dys_n * xn;
                            dtheta[4] += dys_n * yn;
                            dtheta[5] += dys_n;
                        }
                    }
                }
                let slot = sink.slot(tid);
                for i in 0..6 {
                    slot[i] += dtheta[i];
                }
            })),
            &[xid, tid],
        )
    }
}
