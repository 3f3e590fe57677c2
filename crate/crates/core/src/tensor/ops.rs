//! Forward ops and their backward rules.

use super::error::{invalid, Result, TensorError};
use super::kernels;
use super::tape::Var;

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<Vec<usize>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(sa)
}

fn unary<'t>(
    op: &'static str,
    x: Var<'t>,
    fwd: fn(f64) -> f64,
    // derivative dy/dx expressed from (x, y)
    dfdx: fn(f64, f64) -> f64,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let data: Vec<f64> = x.with_data(|_, d| d.iter().map(|&v| fwd(v)).collect());
    let xid = x.id;
    x.tape.push(
        op,
        shape,
        data,
        false,
        Some(Box::new(move |vals, g, sink| {
            let xv = &vals[xid];
            let slot = sink.slot(xid);
            for i in 0..g.len() {
                let xi = xv.data[i];
                slot[i] += g[i] * dfdx(xi, fwd(xi));
            }
        })),
        &[x.id],
    )
}

// the arithmetic methods return Result (shape checks), so the operator
// traits do not apply
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = same_shape("add", &self, &other)?;
        let data = self.with_data(|_, a| other.with_data(|_, b| {
            a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>()
        }));
        let (aid, bid) = (self.id, other.id);
        self.tape.push(
            "add",
            shape,
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                kernels::axpy(1.0, g, sink.slot(aid));
                kernels::axpy(1.0, g, sink.slot(bid));
            })),
            &[aid, bid],
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = same_shape("sub", &self, &other)?;
        let data = self.with_data(|_, a| other.with_data(|_, b| {
            a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()
        }));
        let (aid, bid) = (self.id, other.id);
        self.tape.push(
            "sub",
            shape,
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                kernels::axpy(1.0, g, sink.slot(aid));
                kernels::axpy(-1.0, g, sink.slot(bid));
            })),
            &[aid, bid],
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = same_shape("mul", &self, &other)?;
        let data = self.with_data(|_, a| other.with_data(|_, b| {
            a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>()
        }));
        let (aid, bid) = (self.id, other.id);
        self.tape.push(
            "mul",
            shape,
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                {
                    let b = &vals[bid].data;
                    let slot = sink.slot(aid);
                    for i in 0..g.len() {
                        slot[i] += g[i] * b[i];
                    }
                }
                let a = &vals[aid].data;
                let slot = sink.slot(bid);
                for i in 0..g.len() {
                    slot[i] += g[i] * a[i];
                }
            })),
            &[aid, bid],
        )
    }

    /// y = a·x + b, elementwise with scalar constants.
    pub fn affine(self, a: f64, b: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let data: Vec<f64> = self.with_data(|_, d| d.iter().map(|&v| a * v + b).collect());
        let xid = self.id;
        self.tape.push(
            "affine",
            shape,
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                kernels::axpy(a, g, sink.slot(xid));
            })),
            &[xid],
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        unary("relu", self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        unary("sigmoid", self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        unary("tanh", self, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Standard matrix product for 2-D operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.with_data(|_, a| other.with_data(|_, b| kernels::mm(a, b, m, k, n)));
        let (aid, bid) = (self.id, other.id);
        self.tape.push(
            "matmul",
            vec![m, n],
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                // dA = dC · Bᵀ
                {
                    let b = &vals[bid].data;
                    kernels::mm_a_bt_acc(g, b, m, n, k, sink.slot(aid));
                }
                // dB = Aᵀ · dC
                let a = &vals[aid].data;
                kernels::mm_at_b_acc(a, g, m, k, n, sink.slot(bid));
            })),
            &[aid, bid],
        )
    }

    pub fn transpose2d(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("transpose2d", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.with_data(|_, d| kernels::transpose(d, r, c));
        let xid = self.id;
        self.tape.push(
            "transpose2d",
            vec![c, r],
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                let gt = kernels::transpose(g, c, r);
                kernels::axpy(1.0, &gt, sink.slot(xid));
            })),
            &[xid],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data();
        let xid = self.id;
        self.tape.push(
            "reshape",
            shape.to_vec(),
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                kernels::axpy(1.0, g, sink.slot(xid));
            })),
            &[xid],
        )
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("softmax_rows", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.with_data(|_, d| {
            let mut out = vec![0.0; d.len()];
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * c..(i + 1) * c];
                let mut z = 0.0;
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            out
        });
        let xid = self.id;
        let yid = self.tape.len();
        self.tape.push(
            "softmax_rows",
            vec![r, c],
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[yid].data;
                let slot = sink.slot(xid);
                for i in 0..r {
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let gy = kernels::dot(grow, yrow);
                    let srow = &mut slot[i * c..(i + 1) * c];
                    for j in 0..c {
                        srow[j] += yrow[j] * (grow[j] - gy);
                    }
                }
            })),
            &[xid],
        )
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(axis: usize, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for p in parts {
            let pa = p.shape()[axis];
            offsets.push((p.id, off, pa));
            p.with_data(|_, d| {
                for o in 0..outer {
                    let src = &d[o * pa * inner..(o + 1) * pa * inner];
                    let dst_start = (o * total_axis + off) * inner;
                    data[dst_start..dst_start + pa * inner].copy_from_slice(src);
                }
            });
            off += pa;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].tape.push(
            "concat",
            out_shape,
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                for &(pid, off, pa) in &offsets {
                    let slot = sink.slot(pid);
                    for o in 0..outer {
                        let src = &g[(o * total_axis + off) * inner..][..pa * inner];
                        kernels::axpy(1.0, src, &mut slot[o * pa * inner..(o + 1) * pa * inner]);
                    }
                }
            })),
            &ids,
        )
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || start + len > s[0] {
            return Err(invalid(
                "slice_rows",
                format!("rows {start}..{} out of {s:?}", start + len),
            ));
        }
        let c = s[1];
        let data = self.with_data(|_, d| d[start * c..(start + len) * c].to_vec());
        let xid = self.id;
        self.tape.push(
            "slice_rows",
            vec![len, c],
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                let slot = sink.slot(xid);
                kernels::axpy(1.0, g, &mut slot[start * c..(start + len) * c]);
            })),
            &[xid],
        )
    }

    /// Embedding-style lookup: selected rows of `self` ([V×C]) in `ids` order.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("gather_rows", format!("expected 2-D, got {s:?}")));
        }
        let (v, c) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("gather_rows", format!("row id {bad} out of range {v}")));
        }
        let data = self.with_data(|_, d| {
            let mut out = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                out.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
            out
        });
        let xid = self.id;
        let ids_owned = ids.to_vec();
        self.tape.push(
            "gather_rows",
            vec![ids.len(), c],
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                let slot = sink.slot(xid);
                for (t, &i) in ids_owned.iter().enumerate() {
                    kernels::axpy(1.0, &g[t * c..(t + 1) * c], &mut slot[i * c..(i + 1) * c]);
                }
            })),
            &[xid],
        )
    }

    /// Tile a per-channel vector ([C] or [C,1]) into a [C,H,W] map.
    pub fn broadcast_to_map(self, h: usize, w: usize) -> Result<Var<'t>> {
        let c = self.numel();
        let hw = h * w;
        let data = self.with_data(|_, d| {
            let mut out = vec![0.0; c * hw];
            for (ch, &v) in d.iter().enumerate() {
                out[ch * hw..(ch + 1) * hw].fill(v);
            }
            out
        });
        let xid = self.id;
        self.tape.push(
            "broadcast_to_map",
            vec![c, h, w],
            data,
            false,
            Some(Box::new(move |_, g, sink| {
                let slot = sink.slot(xid);
                for ch in 0..c {
                    slot[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                }
            })),
            &[xid],
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total: f64 = self.with_data(|_, d| d.iter().sum());
        let n = self.numel();
        let xid = self.id;
        self.tape.push(
            "sum",
            vec![1],
            vec![total],
            false,
            Some(Box::new(move |_, g, sink| {
                let slot = sink.slot(xid);
                for s in slot.iter_mut().take(n) {
                    *s += g[0];
                }
            })),
            &[xid],
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel() as f64;
        self.sum()?.affine(1.0 / n, 0.0)
    }

    /// L2-normalize along the channel axis at every spatial position of a
    /// [C,H,W] tensor (vectors reshaped to [C,1,1] work too).
    pub fn l2_normalize_channels(self) -> Result<Var<'t>> {
        const EPS: f64 = 1e-12;
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid("l2_normalize_channels", format!("expected 3-D, got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let data = self.with_data(|_, d| {
            let mut out = vec![0.0; d.len()];
            for p in 0..hw {
                let mut sq = 0.0;
                for ch in 0..c {
                    let v = d[ch * hw + p];
                    sq += v * v;
                }
                let inv = 1.0 / (sq + EPS).sqrt();
                for ch in 0..c {
                    out[ch * hw + p] = d[ch * hw + p] * inv;
                }
            }
            out
        });
        let xid = self.id;
        self.tape.push(
            "l2_normalize_channels",
            s,
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[xid].data;
                let slot = sink.slot(xid);
                for p in 0..hw {
                    let mut sq = 0.0;
                    let mut gx = 0.0;
                    for ch in 0..c {
                        let v = x[ch * hw + p];
                        sq += v * v;
                        gx += g[ch * hw + p] * v;
                    }
                    let n = (sq + EPS).sqrt();
                    let n3 = n * n * n;
                    for ch in 0..c {
                        slot[ch * hw + p] += g[ch * hw + p] / n - x[ch * hw + p] * gx / n3;
                    }
                }
            })),
            &[xid],
        )
    }

    /// Per-channel standardization over spatial positions of a [C,H,W]
    /// tensor: zero mean, unit variance per channel.
    pub fn channel_standardize(self, eps: f64) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid("channel_standardize", format!("expected 3-D, got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let data = self.with_data(|_, d| {
            let mut out = vec![0.0; d.len()];
            for ch in 0..c {
                let row = &d[ch * hw..(ch + 1) * hw];
                let mu = row.iter().sum::<f64>() / hw as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(row) {
                    *o = (v - mu) * inv;
                }
            }
            out
        });
        let xid = self.id;
        let yid = self.tape.len();
        self.tape.push(
            "channel_standardize",
            s,
            data,
            false,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[xid].data;
                let y = &vals[yid].data;
                let slot = sink.slot(xid);
                let n = hw as f64;
                for ch in 0..c {
                    let xrow = &x[ch * hw..(ch + 1) * hw];
                    let yrow = &y[ch * hw..(ch + 1) * hw];
                    let grow = &g[ch * hw..(ch + 1) * hw];
                    let mu = xrow.iter().sum::<f64>() / n;
                    let var = xrow.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / n;
                    let gymean = kernels::dot(grow, yrow) / n;
                    let srow = &mut slot[ch * hw..(ch + 1) * hw];
                    for j in 0..hw {
                        srow[j] += inv * (grow[j] - gmean - yrow[j] * gymean);
                    }
                }
            })),
            &[xid],
        )
    }

    /// Mean binary cross entropy with predictions clamped to [ε, 1−ε].
    pub fn bce_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        const EPS: f64 = 1e-7;
        same_shape("bce_loss", &self, &target)?;
        if target.with_data(|_, t| t.iter().any(|&v| !(0.0..=1.0).contains(&v))) {
            return Err(invalid("bce_loss", "target values outside [0,1]"));
        }
        let n = self.numel() as f64;
        let loss = self.with_data(|_, p| {
            target.with_data(|_, t| {
                p.iter()
                    .zip(t)
                    .map(|(&pi, &ti)| {
                        let pc = pi.clamp(EPS, 1.0 - EPS);
                        -(ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln())
                    })
                    .sum::<f64>()
                    / n
            })
        });
        let (pid, tid) = (self.id, target.id);
        self.tape.push(
            "bce_loss",
            vec![1],
            vec![loss],
            false,
            Some(Box::new(move |vals, g, sink| {
                let p = &vals[pid].data;
                let t = &vals[tid].data;
                let slot = sink.slot(pid);
                for i in 0..p.len() {
                    // clamp has zero derivative outside [ε, 1−ε]
                    if p[i] <= EPS || p[i] >= 1.0 - EPS {
                        continue;
                    }
                    slot[i] += g[0] * (p[i] - t[i]) / (p[i] * (1.0 - p[i])) / n;
                }
            })),
            &[pid, tid],
        )
    }
}
