//! Direct 2-D convolution over [C,H,W] tensors plus per-channel broadcasts.

// the strided fallback loops index several row slices by output position;
// iterator rewrites obscure the stride arithmetic for no gain
#![allow(clippy::needless_range_loop)]

use super::error::{invalid, Result, TensorError};
use super::kernels;
use super::tape::Var;

fn conv_out_dim(op: &'static str, inp: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = inp + 2 * pad;
    if span < k {
        return Err(invalid(
            op,
            format!("empty output for input {inp}, kernel {k}, stride {stride}, pad {pad}"),
        ));
    }
    // floor division: positions whose receptive field would overhang are dropped
    Ok((span - k) / stride + 1)
}

fn conv_forward(
    x: &[f64],
    w: &[f64],
    (c_in, h, wd): (usize, usize, usize),
    (c_out, k): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * oh * ow];
    for ko in 0..c_out {
        for ci in 0..c_in {
            let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((ko * c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let out_row = &mut out[(ko * oh + oy) * ow..(ko * oh + oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let (ox0, ox1) = clip_range(shift, ow, wd);
                            if ox0 < ox1 {
                                let src = &x_row[(ox0 as isize + shift) as usize
                                    ..(ox1 as isize - 1 + shift) as usize + 1];
                                kernels::axpy(wv, src, &mut out_row[ox0..ox1]);
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    out_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `ox` for which `ox + shift` lies inside `0..in_w`.
fn clip_range(shift: isize, out_w: usize, in_w: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = ((in_w as isize - shift).max(0) as usize).min(out_w);
    (lo.min(out_w), hi)
}

impl<'t> Var<'t> {
    /// Direct convolution of `self` [C,H,W] with weights [K,C,k,k].
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let sx = self.shape();
        let sw = weight.shape();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let oh = conv_out_dim("conv2d", h, k, stride, pad)?;
        let ow = conv_out_dim("conv2d", wd, k, stride, pad)?;
        let data = self.with_data(|_, x| {
            weight.with_data(|_, w| {
                conv_forward(x, w, (c_in, h, wd), (c_out, k), stride, pad, (oh, ow))
            })
        });
        let (xid, wid) = (self.id, weight.id);
        self.tape.push(
            "conv2d",
            vec![c_out, oh, ow],
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[xid].data;
                let w = &vals[wid].data;
                // dX: scatter each output gradient row through the kernel
                {
                    let dx = sink.slot(xid);
                    for ko in 0..c_out {
                        for ci in 0..c_in {
                            let dx_plane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = w[((ko * c_in + ci) * k + ky) * k + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let g_row = &g[(ko * oh + oy) * ow..(ko * oh + oy + 1) * ow];
                                        let dx_row = &mut dx_plane
                                            [iy as usize * wd..(iy as usize + 1) * wd];
                                        if stride == 1 {
                                            let shift = kx as isize - pad as isize;
                                            let (ox0, ox1) = clip_range(shift, ow, wd);
                                            if ox0 < ox1 {
                                                let dst = &mut dx_row[(ox0 as isize + shift)
                                                    as usize
                                                    ..(ox1 as isize - 1 + shift) as usize + 1];
                                                kernels::axpy(wv, &g_row[ox0..ox1], dst);
                                            }
                                        } else {
                                            for ox in 0..ow {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix >= 0 && ix < wd as isize {
                                                    dx_row[ix as usize] += wv * g_row[ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                // dW: correlate input with output gradient
                let dw = sink.slot(wid);
                for ko in 0..c_out {
                    for ci in 0..c_in {
                        let x_plane = &x[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let g_row = &g[(ko * oh + oy) * ow..(ko * oh + oy + 1) * ow];
                                    let x_row =
                                        &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                                    if stride == 1 {
                                        let shift = kx as isize - pad as isize;
                                        let (ox0, ox1) = clip_range(shift, ow, wd);
                                        if ox0 < ox1 {
                                            let src = &x_row[(ox0 as isize + shift) as usize
                                                ..(ox1 as isize - 1 + shift) as usize + 1];
                                            acc += kernels::dot(&g_row[ox0..ox1], src);
                                        }
                                    } else {
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix >= 0 && ix < wd as isize {
                                                acc += g_row[ox] * x_row[ix as usize];
                                            }
                                        }
                                    }
                                }
                                dw[((ko * c_in + ci) * k + ky) * k + kx] += acc;
                            }
                        }
                    }
                }
            })),
            &[xid, wid],
        )
    }

    /// y[c,h,w] = x[c,h,w] + b[c]
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || bias.numel() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: s,
                rhs: bias.shape(),
            });
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let data = self.with_data(|_, x| {
            bias.with_data(|_, b| {
                let mut out = x.to_vec();
                for ch in 0..c {
                    let bv = b[ch];
                    for v in &mut out[ch * hw..(ch + 1) * hw] {
                        *v += bv;
                    }
                }
                out
            })
        });
        let (xid, bid) = (self.id, bias.id);
        self.tape.push(
            "add_channel_bias",
            s,
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                kernels::axpy(1.0, g, sink.slot(xid));
                let slot = sink.slot(bid);
                for ch in 0..c {
                    slot[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                }
            })),
            &[xid, bid],
        )
    }

    /// y[c,h,w] = x[c,h,w] * s[c]
    pub fn mul_channel_scale(self, scale: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || scale.numel() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel_scale",
                lhs: s,
                rhs: scale.shape(),
            });
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let data = self.with_data(|_, x| {
            scale.with_data(|_, sc| {
                let mut out = x.to_vec();
                for ch in 0..c {
                    let sv = sc[ch];
                    for v in &mut out[ch * hw..(ch + 1) * hw] {
                        *v *= sv;
                    }
                }
                out
            })
        });
        let (xid, sid) = (self.id, scale.id);
        self.tape.push(
            "mul_channel_scale",
            s,
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                {
                    let sc = &vals[sid].data;
                    let slot = sink.slot(xid);
                    for ch in 0..c {
                        kernels::axpy(sc[ch], &g[ch * hw..(ch + 1) * hw], &mut slot[ch * hw..(ch + 1) * hw]);
                    }
                }
                let x = &vals[xid].data;
                let slot = sink.slot(sid);
                for ch in 0..c {
                    slot[ch] += kernels::dot(&g[ch * hw..(ch + 1) * hw], &x[ch * hw..(ch + 1) * hw]);
                }
            })),
            &[xid, sid],
        )
    }
}
