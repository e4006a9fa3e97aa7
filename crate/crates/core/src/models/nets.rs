//! Graph builders for the four networks. Sequences are stored sample-major:
//! row `i * k + t` holds step `t` of sequence `i`.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelKind, N_CLASSES};
use crate::error::Result;
use crate::features::Sample;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

const HOURS: usize = 24;
const WEEKDAYS: usize = 7;

pub(crate) struct Params<'a> {
    store: &'a ParamStore,
    vars: &'a [Var],
}

impl<'a> Params<'a> {
    pub(crate) fn new(store: &'a ParamStore, vars: &'a [Var]) -> Self {
        Params { store, vars }
    }

    fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        self.vars[i]
    }
}

fn lstm_bias(h: usize) -> Tensor {
    // forget gate starts open
    let mut data = vec![0.0; 4 * h];
    data[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
    Tensor::raw(1, 4 * h, data)
}

pub(crate) fn init_params(cfg: &ModelConfig, k: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let (h, kern) = (cfg.hidden, cfg.kernel);
    p.push_glorot("emb_hour", HOURS, cfg.embed_dim, rng);
    p.push_glorot("emb_weekday", WEEKDAYS, cfg.embed_dim, rng);
    let f = cfg.input_dim();
    let rep = match cfg.kind {
        ModelKind::Birnn => {
            for l in 0..cfg.layers {
                let d = if l == 0 { f } else { 2 * h };
                for dir in ["fwd", "bwd"] {
                    p.push_glorot(format!("l{l}_{dir}_wih"), d, 4 * h, rng);
                    p.push_glorot(format!("l{l}_{dir}_whh"), h, 4 * h, rng);
                    p.push(format!("l{l}_{dir}_b"), lstm_bias(h));
                }
            }
            2 * h
        }
        ModelKind::Tcn => {
            p.push_glorot("in_w", f, h, rng);
            p.push_zeros("in_b", 1, h);
            for i in 0..cfg.dilations.len() {
                p.push_glorot(format!("conv{i}_w"), kern * h, h, rng);
                p.push_zeros(format!("conv{i}_b"), 1, h);
            }
            h
        }
        ModelKind::StgcnLite => {
            p.push_glorot("in_w", f, h, rng);
            p.push_zeros("in_b", 1, h);
            for l in 0..cfg.layers {
                p.push_glorot(format!("l{l}_t1_w"), kern * h, h, rng);
                p.push_zeros(format!("l{l}_t1_b"), 1, h);
                p.push_glorot(format!("l{l}_g_w"), h, h, rng);
                p.push_zeros(format!("l{l}_g_b"), 1, h);
                p.push_glorot(format!("l{l}_t2_w"), kern * h, h, rng);
                p.push_zeros(format!("l{l}_t2_b"), 1, h);
            }
            h
        }
        ModelKind::PdformerLite => {
            p.push_glorot("in_w", f, h, rng);
            p.push_zeros("in_b", 1, h);
            p.push_glorot("pos", k, h, rng);
            for l in 0..cfg.layers {
                for m in ["q", "k", "v", "o"] {
                    p.push_glorot(format!("l{l}_w{m}"), h, h, rng);
                }
                p.push_filled(format!("l{l}_ln_g"), 1, h, 1.0);
                p.push_zeros(format!("l{l}_ln_b"), 1, h);
            }
            for head in ["geo", "sem"] {
                for m in ["q", "k", "v"] {
                    p.push_glorot(format!("{head}_w{m}"), h, h, rng);
                }
            }
            3 * h
        }
    };
    p.push_glorot("out_w", rep, N_CLASSES, rng);
    p.push_zeros("out_b", 1, N_CLASSES);
    p
}

/// Per-slot inputs `[batch * k, input_dim]`.
pub(crate) fn inputs(g: &mut Graph, p: &Params, cfg: &ModelConfig, batch: &[&Sample]) -> Result<Var> {
    let width = N_CLASSES + cfg.use_counts as usize;
    let rows = batch.len() * batch[0].labels.len();
    let mut base = Vec::with_capacity(rows * width);
    let mut hours = Vec::with_capacity(rows);
    let mut days = Vec::with_capacity(rows);
    for s in batch {
        for (t, (&label, enc)) in s.labels.iter().zip(&s.encodings).enumerate() {
            let mut onehot = [0.0; N_CLASSES];
            onehot[label.min(2) as usize] = 1.0;
            base.extend_from_slice(&onehot);
            if cfg.use_counts {
                base.push((s.counts[t] as f64).ln_1p());
            }
            hours.push(enc.hour as usize % HOURS);
            days.push(enc.weekday as usize % WEEKDAYS);
        }
    }
    let base = g.input(Tensor::raw(rows, width, base));
    let eh = g.embedding(p.get("emb_hour"), hours)?;
    let ew = g.embedding(p.get("emb_weekday"), days)?;
    g.concat_cols(&[base, eh, ew])
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Rows holding the last step of every sequence.
fn last_steps(g: &mut Graph, x: Var, n_seq: usize, k: usize) -> Result<Var> {
    g.gather_rows(x, (0..n_seq).map(|i| i * k + k - 1).collect())
}

/// Dense layer to class probabilities, with inverted dropout when `rng` is given.
pub(crate) fn head(g: &mut Graph, p: &Params, rep: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let rep = match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = (g.value(rep).rows(), g.value(rep).cols());
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..r * c)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let m = g.input(Tensor::raw(r, c, mask));
            g.mul(rep, m)?
        }
        _ => rep,
    };
    let logits = dense(g, rep, p.get("out_w"), p.get("out_b"))?;
    g.softmax(logits)
}

/// Hidden state of every step, in step order.
fn lstm_pass(g: &mut Graph, p: &Params, prefix: &str, seq: Var, b: usize, k: usize, h: usize, reverse: bool) -> Result<Vec<Var>> {
    let xp = dense(g, seq, p.get(&format!("{prefix}_wih")), p.get(&format!("{prefix}_b")))?;
    let whh = p.get(&format!("{prefix}_whh"));
    let mut hs = vec![None; k];
    let (mut h_prev, mut c_prev): (Option<Var>, Option<Var>) = (None, None);
    let order: Vec<usize> = if reverse { (0..k).rev().collect() } else { (0..k).collect() };
    for t in order {
        let mut z = g.gather_rows(xp, (0..b).map(|i| i * k + t).collect())?;
        if let Some(hp) = h_prev {
            let r = g.matmul(hp, whh)?;
            z = g.add(z, r)?;
        }
        let s = g.sigmoid(z)?;
        let i = g.slice_cols(s, 0, h)?;
        let f = g.slice_cols(s, h, h)?;
        let o = g.slice_cols(s, 3 * h, h)?;
        let cand = g.slice_cols(z, 2 * h, h)?;
        let cand = g.tanh(cand)?;
        let ic = g.mul(i, cand)?;
        let c = match c_prev {
            Some(cp) => {
                let fc = g.mul(f, cp)?;
                g.add(fc, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(c)?;
        let hn = g.mul(o, tc)?;
        hs[t] = Some(hn);
        h_prev = Some(hn);
        c_prev = Some(c);
    }
    Ok(hs.into_iter().map(|v| v.expect("every step visited")).collect())
}

/// Final forward state joined with the final backward state, `[b, 2h]`.
pub(crate) fn birnn(g: &mut Graph, p: &Params, cfg: &ModelConfig, x: Var, b: usize, k: usize) -> Result<Var> {
    let h = cfg.hidden;
    let mut seq = x;
    for l in 0..cfg.layers {
        let fwd = lstm_pass(g, p, &format!("l{l}_fwd"), seq, b, k, h, false)?;
        let bwd = lstm_pass(g, p, &format!("l{l}_bwd"), seq, b, k, h, true)?;
        if l + 1 == cfg.layers {
            return g.concat_cols(&[fwd[k - 1], bwd[0]]);
        }
        let parts: Vec<Var> = (0..k).flat_map(|t| [fwd[t], bwd[t]]).collect();
        let wide = g.concat_cols(&parts)?;
        seq = g.reshape(wide, b * k, 2 * h)?;
    }
    unreachable!("layers validated to be at least 1")
}

/// Residual dilated causal convolution stack, every step `[b * k, h]`.
pub(crate) fn tcn_sequence(g: &mut Graph, p: &Params, cfg: &ModelConfig, x: Var, k: usize) -> Result<Var> {
    let mut h = dense(g, x, p.get("in_w"), p.get("in_b"))?;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let y = g.conv1d(h, p.get(&format!("conv{i}_w")), cfg.kernel, d, k)?;
        let y = g.add_row(y, p.get(&format!("conv{i}_b")))?;
        let y = g.relu(y)?;
        let sum = g.add(y, h)?;
        h = g.relu(sum)?;
    }
    Ok(h)
}

pub(crate) fn tcn(g: &mut Graph, p: &Params, cfg: &ModelConfig, x: Var, b: usize, k: usize) -> Result<Var> {
    let h = tcn_sequence(g, p, cfg, x, k)?;
    last_steps(g, h, b, k)
}

fn conv_relu(g: &mut Graph, x: Var, w: Var, b: Var, kernel: usize, d: usize, k: usize) -> Result<Var> {
    let y = g.conv1d(x, w, kernel, d, k)?;
    let y = g.add_row(y, b)?;
    g.relu(y)
}

/// Temporal conv, graph propagation with `mix` (skipped when `None`), channel
/// mixing, temporal conv, residual; last step of each cell.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stgcn(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    x: Var,
    b: usize,
    k: usize,
    n: usize,
    mix: Option<Rc<Vec<f64>>>,
) -> Result<Var> {
    let snaps = b / n;
    // (snapshot, cell, step) rows to (snapshot, step, cell) rows and back
    let mut to_time = Vec::with_capacity(b * k);
    for s in 0..snaps {
        for t in 0..k {
            for c in 0..n {
                to_time.push((s * n + c) * k + t);
            }
        }
    }
    let mut back = vec![0; b * k];
    for (i, &src) in to_time.iter().enumerate() {
        back[src] = i;
    }
    let (d1, d2) = cfg.stgcn_dilations();
    let mut h = dense(g, x, p.get("in_w"), p.get("in_b"))?;
    for l in 0..cfg.layers {
        let name = |s: &str| format!("l{l}_{s}");
        let t1 = conv_relu(g, h, p.get(&name("t1_w")), p.get(&name("t1_b")), cfg.kernel, d1, k)?;
        let spread = match &mix {
            Some(m) => {
                let tm = g.gather_rows(t1, to_time.clone())?;
                let mixed = g.node_mix(tm, m.clone(), n)?;
                g.gather_rows(mixed, back.clone())?
            }
            None => t1,
        };
        let gc = dense(g, spread, p.get(&name("g_w")), p.get(&name("g_b")))?;
        let gc = g.relu(gc)?;
        let t2 = conv_relu(g, gc, p.get(&name("t2_w")), p.get(&name("t2_b")), cfg.kernel, d2, k)?;
        let sum = g.add(t2, h)?;
        h = g.relu(sum)?;
    }
    last_steps(g, h, b, k)
}

/// Spatial attention weights of one batch, `[b, n]` each.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct SpatialWeights {
    pub geo: Var,
    pub sem: Var,
}

/// Temporal self-attention per cell, then geographic and semantic attention
/// across the cells of each snapshot (zeros when `masks` is `None`). Returns
/// `[b, 3h]`: last temporal state, geographic and semantic summaries.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pdformer(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    x: Var,
    b: usize,
    k: usize,
    n: usize,
    masks: Option<(Rc<Vec<bool>>, Rc<Vec<bool>>)>,
) -> Result<(Var, Option<SpatialWeights>)> {
    let hd = cfg.hidden;
    let dh = hd / cfg.heads;
    let mut h = dense(g, x, p.get("in_w"), p.get("in_b"))?;
    let pe = g.embedding(p.get("pos"), (0..b * k).map(|i| i % k).collect())?;
    h = g.add(h, pe)?;
    for l in 0..cfg.layers {
        let name = |s: &str| format!("l{l}_{s}");
        let q = g.matmul(h, p.get(&name("wq")))?;
        let kk = g.matmul(h, p.get(&name("wk")))?;
        let v = g.matmul(h, p.get(&name("wv")))?;
        let mut outs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, kk, v)
            } else {
                (
                    g.slice_cols(q, head * dh, dh)?,
                    g.slice_cols(kk, head * dh, dh)?,
                    g.slice_cols(v, head * dh, dh)?,
                )
            };
            outs.push(g.attention(qh, kh, vh, b, None)?.0);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let proj = g.matmul(cat, p.get(&name("wo")))?;
        let res = g.add(h, proj)?;
        h = g.layer_norm(res, p.get(&name("ln_g")), p.get(&name("ln_b")))?;
    }
    let z = last_steps(g, h, b, k)?;
    let snaps = b / n;
    let (geo, sem, weights) = match masks {
        Some((geo_mask, sem_mask)) => {
            let spatial = |g: &mut Graph, head: &str, mask: Rc<Vec<bool>>| -> Result<(Var, Var)> {
                let q = g.matmul(z, p.get(&format!("{head}_wq")))?;
                let kk = g.matmul(z, p.get(&format!("{head}_wk")))?;
                let v = g.matmul(z, p.get(&format!("{head}_wv")))?;
                g.attention(q, kk, v, snaps, Some(mask))
            };
            let (geo, wg) = spatial(g, "geo", geo_mask)?;
            let (sem, ws) = spatial(g, "sem", sem_mask)?;
            (geo, sem, Some(SpatialWeights { geo: wg, sem: ws }))
        }
        None => {
            let zg = g.input(Tensor::zeros(b, hd));
            let zs = g.input(Tensor::zeros(b, hd));
            (zg, zs, None)
        }
    };
    Ok((g.concat_cols(&[z, geo, sem])?, weights))
}
