//! Forward kernels and their adjoints.

use super::{AutodiffError, Node, Op, Result, Tensor, Var};

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::Shape(msg)
}

pub(super) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in) = x.dims2()?;
    let (wi, d_out) = w.dims2()?;
    if wi != d_in {
        return Err(shape_err(format!("[{n},{d_in}] x [{wi},{d_out}]")));
    }
    if let Some(b) = b {
        if b.len() != d_out {
            return Err(shape_err(format!("bias {:?} for {d_out} outputs", b.shape())));
        }
    }
    let mut y = vec![0.0; n * d_out];
    let (xd, wd) = (x.data(), w.data());
    for i in 0..n {
        let row = &mut y[i * d_out..(i + 1) * d_out];
        if let Some(b) = b {
            row.copy_from_slice(b.data());
        }
        for k in 0..d_in {
            let a = xd[i * d_in + k];
            if a == 0.0 {
                continue;
            }
            for (o, wv) in row.iter_mut().zip(&wd[k * d_out..(k + 1) * d_out]) {
                *o += a * wv;
            }
        }
    }
    Tensor::new(vec![n, d_out], y)
}

pub(super) fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (m, kb) = b.dims2()?;
    if k != kb {
        return Err(shape_err(format!("[{n},{k}] x [{m},{kb}]ᵀ")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            y[i * m + j] = ar.iter().zip(&bd[j * k..(j + 1) * k]).map(|(p, q)| p * q).sum();
        }
    }
    Tensor::new(vec![n, m], y)
}

pub(super) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let mut y = x.data().to_vec();
    for row in y.chunks_exact_mut(m.max(1)).take(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![n, m], y)
}

pub(super) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
    let (n, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != n {
            return Err(shape_err(format!("concat rows {r} vs {n}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut y = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &c) in parts.iter().zip(&widths) {
            y.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(vec![n, total], y)
}

pub(super) fn conv2d(x: &Tensor, k: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (h, w, cin) = x.dims3()?;
    let [kh, kw, kc, cout] = match k.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => return Err(shape_err(format!("kernel must be rank 4, got {s:?}"))),
    };
    if kc != cin || kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(shape_err(format!("kernel {:?} on input {:?}", k.shape(), x.shape())));
    }
    if let Some(b) = b {
        if b.len() != cout {
            return Err(shape_err(format!("conv bias {:?} for {cout} filters", b.shape())));
        }
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, kd) = (x.data(), k.data());
    let mut y = vec![0.0; oh * ow * cout];
    for r in 0..oh {
        for c in 0..ow {
            let out = &mut y[(r * ow + c) * cout..(r * ow + c + 1) * cout];
            if let Some(b) = b {
                out.copy_from_slice(b.data());
            }
            for a in 0..kh {
                for bb in 0..kw {
                    let xbase = ((r + a) * w + (c + bb)) * cin;
                    for ci in 0..cin {
                        let xv = xd[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let kbase = ((a * kw + bb) * cin + ci) * cout;
                        for (o, kv) in out.iter_mut().zip(&kd[kbase..kbase + cout]) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], y)
}

pub(super) fn maxpool2d(x: &Tensor, window: [usize; 2], stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = x.dims3()?;
    let [ph, pw] = window;
    if ph == 0 || pw == 0 || stride == 0 || ph > h || pw > w {
        return Err(shape_err(format!("pool {window:?}/{stride} on {:?}", x.shape())));
    }
    let (oh, ow) = ((h - ph) / stride + 1, (w - pw) / stride + 1);
    let xd = x.data();
    let mut y = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for r in 0..oh {
        for q in 0..ow {
            for ch in 0..c {
                let mut best = ((r * stride) * w + q * stride) * c + ch;
                for a in 0..ph {
                    for b in 0..pw {
                        let idx = ((r * stride + a) * w + (q * stride + b)) * c + ch;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], y)?, arg))
}

/// Block `i` of `n` items split into `parts` partitioning blocks.
#[inline]
pub(super) fn block(i: usize, n: usize, parts: usize) -> std::ops::Range<usize> {
    (i * n / parts)..((i + 1) * n / parts)
}

pub(super) fn adaptive_avgpool(x: &Tensor, out: [usize; 2]) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let [p, q] = out;
    if p == 0 || q == 0 || p > h || q > w {
        return Err(shape_err(format!("adaptive pool to {out:?} from {:?}", x.shape())));
    }
    let xd = x.data();
    let mut y = vec![0.0; p * q * c];
    for i in 0..p {
        let rows = block(i, h, p);
        for j in 0..q {
            let cols = block(j, w, q);
            let n = (rows.len() * cols.len()) as f64;
            let o = &mut y[(i * q + j) * c..(i * q + j + 1) * c];
            for r in rows.clone() {
                for s in cols.clone() {
                    for (ov, xv) in o.iter_mut().zip(&xd[(r * w + s) * c..(r * w + s + 1) * c]) {
                        *ov += xv;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::new(vec![p, q, c], y)
}

pub(super) fn rmse(pred: &[f64], label: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    (s / pred.len() as f64).sqrt()
}

/// Adds into the gradient slot of `v` when it leads to a parameter.
fn acc<'n>(nodes: &[Node<'n>], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

pub(super) fn backprop<'n>(
    nodes: &[Node<'n>],
    op: &Op,
    y: &Tensor,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match op {
        Op::Constant | Op::Param => {}
        Op::Linear { x, w, .. } | Op::MatMul { a: x, b: w } => {
            let b = if let Op::Linear { b, .. } = op { *b } else { None };
            let (n, d_in) = val(*x).dims2()?;
            let d_out = val(*w).dims2()?.1;
            let (xd, wd) = (val(*x).data(), val(*w).data());
            // dx = g · Wᵀ
            acc(nodes, grads, *x, |dx| {
                for i in 0..n {
                    let gr = &g[i * d_out..(i + 1) * d_out];
                    for k in 0..d_in {
                        dx[i * d_in + k] +=
                            gr.iter().zip(&wd[k * d_out..(k + 1) * d_out]).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            });
            // dW = xᵀ · g
            acc(nodes, grads, *w, |dw| {
                for i in 0..n {
                    let gr = &g[i * d_out..(i + 1) * d_out];
                    for k in 0..d_in {
                        let a = xd[i * d_in + k];
                        if a == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw[k * d_out..(k + 1) * d_out].iter_mut().zip(gr) {
                            *d += a * gv;
                        }
                    }
                }
            });
            if let Some(b) = b {
                acc(nodes, grads, b, |db| {
                    for i in 0..n {
                        for (d, gv) in db.iter_mut().zip(&g[i * d_out..(i + 1) * d_out]) {
                            *d += gv;
                        }
                    }
                });
            }
        }
        Op::MatMulNt { a, b } => {
            let (n, k) = val(*a).dims2()?;
            let m = val(*b).dims2()?.0;
            let (ad, bd) = (val(*a).data(), val(*b).data());
            // dA = g · B
            acc(nodes, grads, *a, |da| {
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, bv) in da[i * k..(i + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                            *d += gv * bv;
                        }
                    }
                }
            });
            // dB = gᵀ · A
            acc(nodes, grads, *b, |db| {
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                            *d += gv * av;
                        }
                    }
                }
            });
        }
        Op::Scale { x, s } => acc(nodes, grads, *x, |dx| {
            dx.iter_mut().zip(g).for_each(|(d, gv)| *d += s * gv);
        }),
        Op::Add { a, b } => {
            acc(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
        }
        Op::Softmax { x } => {
            let (_, m) = y.dims2()?;
            let yd = y.data();
            acc(nodes, grads, *x, |dx| {
                for ((dr, yr), gr) in dx.chunks_exact_mut(m).zip(yd.chunks_exact(m)).zip(g.chunks_exact(m)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - inner);
                    }
                }
            });
        }
        Op::ConcatCols { parts } => {
            let total = y.dims2()?.1;
            let mut off = 0;
            for p in parts {
                let (n, c) = val(*p).dims2()?;
                acc(nodes, grads, *p, |d| {
                    for i in 0..n {
                        for (dv, gv) in d[i * c..(i + 1) * c].iter_mut().zip(&g[i * total + off..i * total + off + c]) {
                            *dv += gv;
                        }
                    }
                });
                off += c;
            }
        }
        Op::Conv2d { x, k, b } => {
            let (_, w, cin) = val(*x).dims3()?;
            let (kh, kw, cout) = {
                let s = val(*k).shape();
                (s[0], s[1], s[3])
            };
            let (oh, ow, _) = y.dims3()?;
            let (xd, kd) = (val(*x).data(), val(*k).data());
            acc(nodes, grads, *x, |dx| {
                for r in 0..oh {
                    for c in 0..ow {
                        let gr = &g[(r * ow + c) * cout..(r * ow + c + 1) * cout];
                        for a in 0..kh {
                            for bb in 0..kw {
                                let xbase = ((r + a) * w + (c + bb)) * cin;
                                for ci in 0..cin {
                                    let kbase = ((a * kw + bb) * cin + ci) * cout;
                                    dx[xbase + ci] +=
                                        gr.iter().zip(&kd[kbase..kbase + cout]).map(|(p, q)| p * q).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            });
            acc(nodes, grads, *k, |dk| {
                for r in 0..oh {
                    for c in 0..ow {
                        let gr = &g[(r * ow + c) * cout..(r * ow + c + 1) * cout];
                        for a in 0..kh {
                            for bb in 0..kw {
                                let xbase = ((r + a) * w + (c + bb)) * cin;
                                for ci in 0..cin {
                                    let xv = xd[xbase + ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let kbase = ((a * kw + bb) * cin + ci) * cout;
                                    for (d, gv) in dk[kbase..kbase + cout].iter_mut().zip(gr) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
            if let Some(b) = b {
                acc(nodes, grads, *b, |db| {
                    for gr in g.chunks_exact(cout) {
                        db.iter_mut().zip(gr).for_each(|(d, gv)| *d += gv);
                    }
                });
            }
        }
        Op::Relu { x } => {
            let xd = val(*x).data();
            acc(nodes, grads, *x, |dx| {
                for ((d, xv), gv) in dx.iter_mut().zip(xd).zip(g) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            });
        }
        Op::MaxPool { x, argmax } => acc(nodes, grads, *x, |dx| {
            for (i, gv) in argmax.iter().zip(g) {
                dx[*i] += gv;
            }
        }),
        Op::AdaptiveAvgPool { x, out } => {
            let (h, w, c) = val(*x).dims3()?;
            let [p, q] = *out;
            acc(nodes, grads, *x, |dx| {
                for i in 0..p {
                    let rows = block(i, h, p);
                    for j in 0..q {
                        let cols = block(j, w, q);
                        let n = (rows.len() * cols.len()) as f64;
                        let gr = &g[(i * q + j) * c..(i * q + j + 1) * c];
                        for r in rows.clone() {
                            for s in cols.clone() {
                                for (d, gv) in dx[(r * w + s) * c..(r * w + s + 1) * c].iter_mut().zip(gr) {
                                    *d += gv / n;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Reshape { x } => acc(nodes, grads, *x, |dx| {
            dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
        }),
        Op::Affine { x, scale } => acc(nodes, grads, *x, |dx| {
            dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv);
        }),
        Op::Rmse { pred, label } => {
            let loss = y.data()[0];
            let (pd, ld) = (val(*pred).data(), val(*label).data());
            let n = pd.len() as f64;
            // zero loss maps to a zero gradient
            let coef = if loss == 0.0 { 0.0 } else { g[0] / (n * loss) };
            acc(nodes, grads, *pred, |d| {
                for ((dv, p), l) in d.iter_mut().zip(pd).zip(ld) {
                    *dv += coef * (p - l);
                }
            });
            acc(nodes, grads, *label, |d| {
                for ((dv, p), l) in d.iter_mut().zip(pd).zip(ld) {
                    *dv -= coef * (p - l);
                }
            });
        }
        Op::Mean { xs } => {
            let share = g[0] / xs.len() as f64;
            for x in xs {
                acc(nodes, grads, *x, |d| d[0] += share);
            }
        }
    }
    Ok(())
}
