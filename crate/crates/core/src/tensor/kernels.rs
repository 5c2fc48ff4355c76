//! Forward and backward kernels of a GPT-2 style transformer, following the
//! reference C implementation in llm.c. Backward kernels accumulate (`+=`)
//! into their gradient buffers.
//!
//! Layouts: activations are `(B, T, C)` row-major, attention scores
//! `(B, NH, T, T)`, fused query/key/value `(B, T, 3C)`.

use super::{softmax_twopass, ContainerKind};

const LN_EPS: f64 = 1e-5;
const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn encoder_forward(out: &mut [f64], tokens: &[u32], wte: &[f64], wpe: &[f64], t_len: usize, c: usize) {
    for (bt, (o, &ix)) in out.chunks_mut(c).zip(tokens).enumerate() {
        let t = bt % t_len;
        let (w, p) = (&wte[ix as usize * c..][..c], &wpe[t * c..][..c]);
        for i in 0..c {
            o[i] = w[i] + p[i];
        }
    }
}

pub fn encoder_backward(dwte: &mut [f64], dwpe: &mut [f64], dout: &[f64], tokens: &[u32], t_len: usize, c: usize) {
    for (bt, (d, &ix)) in dout.chunks(c).zip(tokens).enumerate() {
        let t = bt % t_len;
        let dw = &mut dwte[ix as usize * c..][..c];
        dw.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        let dp = &mut dwpe[t * c..][..c];
        dp.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
}

pub fn layernorm_forward(
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
    inp: &[f64],
    weight: &[f64],
    bias: &[f64],
    c: usize,
) {
    for (n, (o, x)) in out.chunks_mut(c).zip(inp.chunks(c)).enumerate() {
        let m = x.iter().sum::<f64>() / c as f64;
        let v = x.iter().map(|xi| (xi - m) * (xi - m)).sum::<f64>() / c as f64;
        let s = 1.0 / (v + LN_EPS).sqrt();
        for i in 0..c {
            o[i] = (x[i] - m) * s * weight[i] + bias[i];
        }
        mean[n] = m;
        rstd[n] = s;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dinp: &mut [f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    weight: &[f64],
    mean: &[f64],
    rstd: &[f64],
    c: usize,
) {
    for (n, ((di, d), x)) in dinp.chunks_mut(c).zip(dout.chunks(c)).zip(inp.chunks(c)).enumerate() {
        let (m, s) = (mean[n], rstd[n]);
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = weight[i] * d[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= c as f64;
        dnorm_norm_mean /= c as f64;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = weight[i] * d[i];
            dbias[i] += d[i];
            dweight[i] += norm * d[i];
            di[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

/// Shape parameters of the attention kernels.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    pub nh: usize,
}

impl AttnShape {
    fn head_size(&self) -> usize {
        self.c / self.nh
    }

    fn att_row(&self, b: usize, h: usize, t: usize) -> usize {
        ((b * self.nh + h) * self.t + t) * self.t
    }

    fn qkv(&self, b: usize, t: usize) -> usize {
        (b * self.t + t) * 3 * self.c
    }
}

/// Causal multi-head attention. Scores past the current position are zero.
pub fn attention_forward(out: &mut [f64], preatt: &mut [f64], att: &mut [f64], inp: &[f64], s: AttnShape) {
    let (c, hs) = (s.c, s.head_size());
    let scale = 1.0 / (hs as f64).sqrt();
    for b in 0..s.b {
        for t in 0..s.t {
            for h in 0..s.nh {
                let q = &inp[s.qkv(b, t) + h * hs..][..hs];
                let row = s.att_row(b, h, t);
                let mut maxval = f64::NEG_INFINITY;
                for t2 in 0..=t {
                    let k = &inp[s.qkv(b, t2) + c + h * hs..][..hs];
                    let v = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                    maxval = maxval.max(v);
                    preatt[row + t2] = v;
                }
                softmax_twopass(&preatt[row..=row + t], maxval, &mut att[row..=row + t], &ContainerKind::Wide);
                att[row + t + 1..row + s.t].fill(0.0);
                let o = &mut out[(b * s.t + t) * c + h * hs..][..hs];
                o.fill(0.0);
                for t2 in 0..=t {
                    let v = &inp[s.qkv(b, t2) + 2 * c + h * hs..][..hs];
                    let a = att[row + t2];
                    o.iter_mut().zip(v).for_each(|(oi, vi)| *oi += a * vi);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dinp: &mut [f64],
    dpreatt: &mut [f64],
    datt: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    att: &[f64],
    s: AttnShape,
) {
    let (c, hs) = (s.c, s.head_size());
    let scale = 1.0 / (hs as f64).sqrt();
    for b in 0..s.b {
        for t in 0..s.t {
            for h in 0..s.nh {
                let row = s.att_row(b, h, t);
                let d = &dout[(b * s.t + t) * c + h * hs..][..hs];
                for t2 in 0..=t {
                    let vi = s.qkv(b, t2) + 2 * c + h * hs;
                    let a = att[row + t2];
                    for i in 0..hs {
                        datt[row + t2] += inp[vi + i] * d[i];
                        dinp[vi + i] += a * d[i];
                    }
                }
                for t2 in 0..=t {
                    for t3 in 0..=t {
                        let indicator = if t2 == t3 { 1.0 } else { 0.0 };
                        let local = att[row + t2] * (indicator - att[row + t3]);
                        dpreatt[row + t3] += local * datt[row + t2];
                    }
                }
                let qi = s.qkv(b, t) + h * hs;
                for t2 in 0..=t {
                    let ki = s.qkv(b, t2) + c + h * hs;
                    let g = dpreatt[row + t2] * scale;
                    for i in 0..hs {
                        dinp[qi + i] += inp[ki + i] * g;
                        dinp[ki + i] += inp[qi + i] * g;
                    }
                }
            }
        }
    }
}

/// Tanh approximation of GELU.
pub fn gelu_forward(out: &mut [f64], inp: &[f64]) {
    for (o, &x) in out.iter_mut().zip(inp) {
        let cube = 0.044715 * x * x * x;
        *o = 0.5 * x * (1.0 + (GELU_SCALE * (x + cube)).tanh());
    }
}

pub fn gelu_backward(dinp: &mut [f64], inp: &[f64], dout: &[f64]) {
    for ((di, &x), &d) in dinp.iter_mut().zip(inp).zip(dout) {
        let cube = 0.044715 * x * x * x;
        let arg = GELU_SCALE * (x + cube);
        let th = arg.tanh();
        let ch = arg.cosh();
        let sech2 = 1.0 / (ch * ch);
        let local = 0.5 * (1.0 + th) + x * 0.5 * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x);
        *di += local * d;
    }
}

pub fn residual_forward(out: &mut [f64], a: &[f64], b: &[f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

pub fn residual_backward(da: &mut [f64], db: &mut [f64], dout: &[f64]) {
    for ((x, y), d) in da.iter_mut().zip(db.iter_mut()).zip(dout) {
        *x += d;
        *y += d;
    }
}

/// Row-wise softmax over vocabulary logits, stored through `kind`.
pub fn softmax_forward(probs: &mut [f64], logits: &[f64], v: usize, kind: &ContainerKind) {
    for (p, l) in probs.chunks_mut(v).zip(logits.chunks(v)) {
        let maxval = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        softmax_twopass(l, maxval, p, kind);
    }
}

/// Negative log-likelihood of each target.
pub fn crossentropy_forward(losses: &mut [f64], probs: &[f64], targets: &[u32], v: usize) {
    for ((l, p), &ix) in losses.iter_mut().zip(probs.chunks(v)).zip(targets) {
        *l = -p[ix as usize].ln();
    }
}

/// Gradient of the mean-reduced loss through softmax and cross-entropy.
pub fn crossentropy_softmax_backward(dlogits: &mut [f64], dlosses: &[f64], probs: &[f64], targets: &[u32], v: usize) {
    for (((dl, p), &ix), &dloss) in dlogits.chunks_mut(v).zip(probs.chunks(v)).zip(targets).zip(dlosses) {
        for (i, (d, &pi)) in dl.iter_mut().zip(p).enumerate() {
            let indicator = if i == ix as usize { 1.0 } else { 0.0 };
            *d += (pi - indicator) * dloss;
        }
    }
}
