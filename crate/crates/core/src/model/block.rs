//! One pre-norm transformer block with LoRA on the query and value
//! projections, plus its hand-written backward pass.

use nalgebra::{DMatrix, DVector};

use super::params::{BlockAdapter, BlockWeights, LoraPair};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &DMatrix<f64>,
    gain: &DVector<f64>,
    bias: &DVector<f64>,
) -> (DMatrix<f64>, LnCache) {
    let (rows, d) = x.shape();
    let mut xhat = DMatrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            xhat[(i, j)] = (x[(i, j)] - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    for j in 0..d {
        for i in 0..rows {
            y[(i, j)] = y[(i, j)] * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(dy: &DMatrix<f64>, gain: &DVector<f64>, c: &LnCache) -> DMatrix<f64> {
    let (rows, d) = dy.shape();
    let mut dx = DMatrix::zeros(rows, d);
    let n = d as f64;
    for i in 0..rows {
        let mut sum = 0.0;
        let mut sum_xhat = 0.0;
        for j in 0..d {
            let g = dy[(i, j)] * gain[j];
            sum += g;
            sum_xhat += g * c.xhat[(i, j)];
        }
        for j in 0..d {
            let g = dy[(i, j)] * gain[j];
            dx[(i, j)] = c.inv_std[i] / n * (n * g - sum - c.xhat[(i, j)] * sum_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            m[(i, j)] += b[j];
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    ln1: LnCache,
    n1: DMatrix<f64>,
    tq: DMatrix<f64>,
    tv: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    ln2: LnCache,
    pre_act: DMatrix<f64>,
}

fn lora_project(
    n: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lora: &LoraPair,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = n * lora.a.transpose();
    let out = n * w + &t * lora.b.transpose();
    (out, t)
}

/// Forward through one block. `mask[j] == false` removes key `j` from every
/// query's attention.
pub(crate) fn forward(
    x: &DMatrix<f64>,
    mask: &[bool],
    w: &BlockWeights,
    ad: &BlockAdapter,
    n_heads: usize,
) -> (DMatrix<f64>, BlockCache) {
    let (mu, d) = x.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (n1, ln1) = layer_norm(x, &w.ln1_gain, &w.ln1_bias);
    let (q, tq) = lora_project(&n1, &w.wq, &ad.query);
    let k = &n1 * &w.wk;
    let (v, tv) = lora_project(&n1, &w.wv, &ad.value);

    let mut heads_out = DMatrix::zeros(mu, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let mut s = qh * kh.transpose() * scale;
        for i in 0..mu {
            let mut max = f64::NEG_INFINITY;
            for j in 0..mu {
                if mask[j] && s[(i, j)] > max {
                    max = s[(i, j)];
                }
            }
            let mut z = 0.0;
            for j in 0..mu {
                let e = if mask[j] { (s[(i, j)] - max).exp() } else { 0.0 };
                s[(i, j)] = e;
                z += e;
            }
            for j in 0..mu {
                s[(i, j)] /= z;
            }
        }
        let oh = &s * vh;
        heads_out.columns_mut(h * dh, dh).copy_from(&oh);
        probs.push(s);
    }
    let x2 = x + &heads_out * &w.wo;

    let (n2, ln2) = layer_norm(&x2, &w.ln2_gain, &w.ln2_bias);
    let mut pre_act = &n2 * &w.w1;
    add_row_bias(&mut pre_act, &w.b1);
    let act = pre_act.map(gelu);
    let mut mlp = &act * &w.w2;
    add_row_bias(&mut mlp, &w.b2);
    let out = x2 + mlp;

    (
        out,
        BlockCache {
            ln1,
            n1,
            tq,
            tv,
            q,
            k,
            v,
            probs,
            ln2,
            pre_act,
        },
    )
}

/// Backward through one block. Returns the gradient w.r.t. the block input
/// and the adapter gradients; frozen weights receive nothing.
pub(crate) fn backward(
    d_out: &DMatrix<f64>,
    c: &BlockCache,
    w: &BlockWeights,
    ad: &BlockAdapter,
    n_heads: usize,
) -> (DMatrix<f64>, BlockAdapter) {
    let (mu, d) = d_out.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch
    let d_act = d_out * w.w2.transpose();
    let d_pre = d_act.zip_map(&c.pre_act, |g, z| g * gelu_grad(z));
    let d_n2 = &d_pre * w.w1.transpose();
    let d_x2 = d_out + layer_norm_backward(&d_n2, &w.ln2_gain, &c.ln2);

    // attention branch
    let d_heads = &d_x2 * w.wo.transpose();
    let mut dq = DMatrix::zeros(mu, d);
    let mut dk = DMatrix::zeros(mu, d);
    let mut dv = DMatrix::zeros(mu, d);
    for h in 0..n_heads {
        let p = &c.probs[h];
        let doh = d_heads.columns(h * dh, dh);
        let vh = c.v.columns(h * dh, dh);
        let qh = c.q.columns(h * dh, dh);
        let kh = c.k.columns(h * dh, dh);
        let dp = doh * vh.transpose();
        let dvh = p.transpose() * doh;
        let mut ds = DMatrix::zeros(mu, mu);
        for i in 0..mu {
            let dot: f64 = (0..mu).map(|j| dp[(i, j)] * p[(i, j)]).sum();
            for j in 0..mu {
                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot);
            }
        }
        let dqh = &ds * kh * scale;
        let dkh = ds.transpose() * qh * scale;
        dq.columns_mut(h * dh, dh).copy_from(&dqh);
        dk.columns_mut(h * dh, dh).copy_from(&dkh);
        dv.columns_mut(h * dh, dh).copy_from(&dvh);
    }

    let d_tq = &dq * &ad.query.b;
    let d_tv = &dv * &ad.value.b;
    let grad = BlockAdapter {
        query: LoraPair {
            a: d_tq.transpose() * &c.n1,
            b: dq.transpose() * &c.tq,
        },
        value: LoraPair {
            a: d_tv.transpose() * &c.n1,
            b: dv.transpose() * &c.tv,
        },
    };
    let d_n1 = &dq * w.wq.transpose()
        + &d_tq * &ad.query.a
        + &dk * w.wk.transpose()
        + &dv * w.wv.transpose()
        + &d_tv * &ad.value.a;
    let dx = d_x2 + layer_norm_backward(&d_n1, &w.ln1_gain, &c.ln1);
    (dx, grad)
}
