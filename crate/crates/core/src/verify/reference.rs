//! Straight-line double-precision re-implementations used as oracles. They
//! share no code with the tape kernels: every quantity is computed with
//! explicit loops over plain vectors, one image at a time.

use crate::embednet::BLOCKS;
use crate::episodes::Episode;
use crate::model::{ModelParams, ModelStats};
use crate::numcore::BN_EPS;

/// Zero-padded stride-1 cross-correlation of `[b, c, h, w]` with
/// `[o, c, k, k]` weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    o: usize,
    k: usize,
    bias: Option<&[f64]>,
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * c + ic) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling over `planes` planes of `h × w`.
pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(p * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum()).collect()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Slot list `(key, label)` updated by the write rule.
pub fn write(slots: &mut Vec<(Vec<f64>, usize)>, capacity: usize, zk: &[f64], label: usize) {
    let u = normalize(zk);
    let mut nearest: Option<usize> = None;
    for i in 0..slots.len() {
        if nearest.is_none_or(|j| dot(&slots[i].0, &u) > dot(&slots[j].0, &u)) {
            nearest = Some(i);
        }
    }
    match nearest {
        Some(i) if slots[i].1 == label || slots.len() >= capacity => {
            let sum: Vec<f64> = slots[i].0.iter().zip(&u).map(|(a, b)| a + b).collect();
            slots[i].0 = normalize(&sum);
        }
        _ => slots.push((u, label)),
    }
}

/// Attention weights and the weighted key sum, two explicit loops.
pub fn read(keys: &[Vec<f64>], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = keys.iter().map(|k| dot(k, q)).collect();
    let total: f64 = scores.iter().map(|s| s.exp()).sum();
    let a: Vec<f64> = scores.iter().map(|s| s.exp() / total).collect();
    let mut c = vec![0.0; q.len()];
    for (ai, k) in a.iter().zip(keys) {
        for d in 0..c.len() {
            c[d] += ai * k[d];
        }
    }
    (a, c)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step with gate rows `[input; forget; candidate; output]`.
pub fn lstm_cell(x: &[f64], h: &[f64], c: &[f64], w_ih: &[f64], w_hh: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let gx = matvec(w_ih, 4 * hidden, x.len(), x);
    let gh = matvec(w_hh, 4 * hidden, hidden, h);
    let pre: Vec<f64> = (0..4 * hidden).map(|r| gx[r] + gh[r] + bias[r]).collect();
    let mut h2 = vec![0.0; hidden];
    let mut c2 = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sigmoid(pre[j]);
        let f = sigmoid(pre[hidden + j]);
        let g = pre[2 * hidden + j].tanh();
        let o = sigmoid(pre[3 * hidden + j]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// `−Σ_j Σ_{n: y_n = ŷ_j} log(exp(l_jn) / Σ_t exp(l_jt))`, no stabilization.
pub fn matching_loss(logits: &[f64], support_labels: &[usize], query_labels: &[usize]) -> f64 {
    let n = support_labels.len();
    let mut loss = 0.0;
    for (j, &y) in query_labels.iter().enumerate() {
        let row = &logits[j * n..(j + 1) * n];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        for (t, &l) in support_labels.iter().enumerate() {
            if l == y {
                loss -= (row[t].exp() / denom).ln();
            }
        }
    }
    loss
}

fn bn_eval_relu(x: &mut [f64], c: usize, plane: usize, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) {
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        for v in &mut x[ch * plane..(ch + 1) * plane] {
            *v = (gamma[ch] * (*v - mean[ch]) * inv + beta[ch]).max(0.0);
        }
    }
}

/// Eval-mode embedding of one image; with `factorized_w` block 4's
/// convolution is the factorized one.
fn embed_one(
    params: &ModelParams<f64>,
    stats: &ModelStats<f64>,
    image: &[f64],
    factorized_w: Option<&[f64]>,
) -> Vec<f64> {
    let cfg = &params.config;
    let (mut c, mut h, mut w) = (cfg.in_channels, cfg.image_height, cfg.image_width);
    let mut x = image.to_vec();
    for (i, blk) in params.backbone.blocks.iter().enumerate() {
        let f = cfg.filters;
        let (gamma, beta, st) = match (i, factorized_w) {
            (3, Some(wv)) => {
                let fz = &params.factorized;
                let d_w = fz.m_in.shape()[0];
                let inner = conv2d(&x, 1, c, h, w, fz.m_in.data(), d_w, 1, None, 0);
                let scaled: Vec<f64> = inner.iter().enumerate().map(|(p, v)| v * wv[p / (h * w)]).collect();
                x = conv2d(&scaled, 1, d_w, h, w, fz.m_out.data(), f, 1, Some(fz.bias.data()), 0);
                (fz.gamma.data(), fz.beta.data(), &stats.layers[BLOCKS])
            }
            _ => {
                x = conv2d(&x, 1, c, h, w, blk.weight.data(), f, 3, Some(blk.bias.data()), 1);
                (blk.gamma.data(), blk.beta.data(), &stats.layers[i])
            }
        };
        c = f;
        bn_eval_relu(&mut x, c, h * w, gamma, beta, &st.mean, &st.var);
        x = maxpool2(&x, c, h, w);
        h /= 2;
        w /= 2;
    }
    x
}

/// Eval-mode `[Q, N]` logits of an episode, computed per image.
pub fn episode_logits(params: &ModelParams<f64>, stats: &ModelStats<f64>, episode: &Episode) -> Vec<f64> {
    let cfg = &params.config;
    let d_z = cfg.embed_dim();
    let (t_z, t_c) = (params.projections.t_z.data(), params.projections.t_c.data());
    let pixels = |img: &crate::episodes::Image| img.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();

    let z: Vec<Vec<f64>> = episode.support.iter().map(|s| embed_one(params, stats, &pixels(&s.image), None)).collect();
    let capacity = cfg.memory_capacity.unwrap_or(z.len());
    let mut slots = Vec::new();
    for &n in &episode.write_order {
        write(&mut slots, capacity, &matvec(t_z, cfg.key_dim, d_z, &z[n]), episode.support[n].label);
    }
    let keys: Vec<Vec<f64>> = slots.iter().map(|(k, _)| k.clone()).collect();
    let g: Vec<Vec<f64>> = z
        .iter()
        .map(|zn| {
            let (_, c) = read(&keys, &matvec(t_z, cfg.key_dim, d_z, zn));
            matvec(t_c, d_z, cfg.key_dim, &c).iter().zip(zn).map(|(a, b)| a + b).collect()
        })
        .collect();

    let run = |lp: &crate::ctxlearner::LstmParams<f64>, seq: &mut dyn Iterator<Item = &Vec<f64>>| {
        let hidden = lp.hidden();
        let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
        for k in seq {
            (h, c) = lstm_cell(k, &h, &c, lp.w_ih.data(), lp.w_hh.data(), lp.bias.data());
        }
        h
    };
    let fwd = run(&params.learner.forward, &mut keys.iter());
    let bwd = run(&params.learner.backward, &mut keys.iter().rev());
    let both: Vec<f64> = fwd.iter().zip(&bwd).map(|(a, b)| a + b).collect();
    let w = matvec(params.learner.t_p.data(), cfg.predicted, cfg.hidden, &both);

    let mut logits = Vec::with_capacity(episode.query.len() * g.len());
    for q in &episode.query {
        let f = embed_one(params, stats, &pixels(&q.image), Some(&w));
        logits.extend(g.iter().map(|gn| dot(&f, gn)));
    }
    logits
}
