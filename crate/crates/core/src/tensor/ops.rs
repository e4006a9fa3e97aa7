use super::{Graph, Op, Tensor, Var};
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

pub(super) fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::SliceCols(a, _, _)
        | Op::GatherRows(a, _)
        | Op::Reshape(a, _, _)
        | Op::Transpose(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Softmax(a, _)
        | Op::Log(a)
        | Op::Embedding(a, _)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Conv1d { x, w, .. } => vec![*x, *w],
        Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        Op::BlockMatMul { a, b, .. } => vec![*a, *b],
        Op::NodeMix { x, .. } => vec![*x],
        Op::WeightedNll { probs, .. } => vec![*probs],
    }
}

fn dims(g: &Graph, v: Var) -> Result<(usize, usize)> {
    let t = g
        .nodes
        .get(v.0)
        .ok_or_else(|| Error::Shape(format!("node {} does not exist", v.0)))?;
    Ok((t.value.rows(), t.value.cols()))
}

fn mismatch(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

pub(super) fn check_shapes(g: &Graph, op: &Op) -> Result<()> {
    for v in inputs(op) {
        dims(g, v)?;
    }
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (da, db) = (dims(g, *a)?, dims(g, *b)?);
            if da.1 != db.0 {
                return Err(mismatch("matmul", da, db));
            }
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (da, db) = (dims(g, *a)?, dims(g, *b)?);
            if da != db {
                return Err(mismatch("elementwise", da, db));
            }
        }
        Op::AddRow(a, b) => {
            let (da, db) = (dims(g, *a)?, dims(g, *b)?);
            if db.0 != 1 || da.1 != db.1 {
                return Err(mismatch("row broadcast", da, db));
            }
        }
        Op::ConcatCols(parts) => {
            if parts.is_empty() {
                return Err(Error::Shape("concat of nothing".into()));
            }
            let r = dims(g, parts[0])?.0;
            for p in parts {
                if dims(g, *p)?.0 != r {
                    return Err(Error::Shape("concat rows differ".into()));
                }
            }
        }
        Op::SliceCols(a, start, len) => {
            if start + len > dims(g, *a)?.1 {
                return Err(Error::Shape(format!("slice {start}+{len} out of range")));
            }
        }
        Op::GatherRows(a, rows) => {
            let r = dims(g, *a)?.0;
            if rows.iter().any(|&i| i >= r) {
                return Err(Error::Shape("gather row out of range".into()));
            }
        }
        Op::Reshape(a, r, c) => {
            let d = dims(g, *a)?;
            if d.0 * d.1 != r * c {
                return Err(mismatch("reshape", d, (*r, *c)));
            }
        }
        Op::Conv1d {
            x,
            w,
            kernel,
            dilation,
            seg_len,
        } => {
            let (dx, dw) = (dims(g, *x)?, dims(g, *w)?);
            if *kernel == 0 || *dilation == 0 || *seg_len == 0 {
                return Err(Error::Shape("conv parameters must be positive".into()));
            }
            if dx.0 % seg_len != 0 || dw.0 != kernel * dx.1 {
                return Err(mismatch("conv1d", dx, dw));
            }
        }
        Op::Softmax(a, Some(mask)) => {
            let d = dims(g, *a)?;
            if mask.len() != d.0 * d.1 {
                return Err(Error::Shape("mask size differs from scores".into()));
            }
        }
        Op::Embedding(table, ids) => {
            let r = dims(g, *table)?.0;
            if ids.iter().any(|&i| i >= r) {
                return Err(Error::Shape("embedding id out of range".into()));
            }
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (dx, dg, db) = (dims(g, *x)?, dims(g, *gamma)?, dims(g, *beta)?);
            if dg != (1, dx.1) || db != (1, dx.1) {
                return Err(mismatch("layer norm", dx, dg));
            }
        }
        Op::BlockMatMul {
            a,
            b,
            blocks,
            transpose_b,
        } => {
            let (da, db) = (dims(g, *a)?, dims(g, *b)?);
            if *blocks == 0 || da.0 % blocks != 0 || db.0 % blocks != 0 {
                return Err(mismatch("block matmul blocks", da, db));
            }
            let inner_b = if *transpose_b { db.1 } else { db.0 / blocks };
            if da.1 != inner_b {
                return Err(mismatch("block matmul", da, db));
            }
        }
        Op::NodeMix { x, mix, n } => {
            let d = dims(g, *x)?;
            if *n == 0 || d.0 % n != 0 || mix.len() != n * n {
                return Err(Error::Shape(format!("node mix of {n} nodes over {} rows", d.0)));
            }
        }
        Op::WeightedNll { probs, targets, coef } => {
            let d = dims(g, *probs)?;
            if targets.len() != d.0 || coef.len() != d.0 || targets.iter().any(|&t| t >= d.1) {
                return Err(Error::Shape("nll targets do not match probabilities".into()));
            }
        }
        Op::Scale(..) | Op::Transpose(_) | Op::Sigmoid(_) | Op::Tanh(_) | Op::Relu(_) | Op::Softmax(_, None) => {}
        Op::Log(_) | Op::Sum(_) | Op::Mean(_) => {}
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(t.rows(), t.cols(), t.data.iter().map(|&v| f(v)).collect())
}

/// `out[n x m] += a[n x k] * b[k x m]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n x m] += a[n x k] * b[m x k]^T`
fn gemm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x m] += a[n x k]^T * b[n x m]`
fn gemm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn forward(g: &Graph, op: &Op) -> Tensor {
    let val = |v: &Var| &g.nodes[v.0].value;
    match op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; n * m];
            gemm_acc(&a.data, &b.data, &mut out, n, k, m);
            Tensor::raw(n, m, out)
        }
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            Tensor::raw(a.rows(), a.cols(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            Tensor::raw(a.rows(), a.cols(), a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
        }
        Op::AddRow(a, r) => {
            let (a, r) = (val(a), val(r));
            let c = a.cols();
            let data = a.data.iter().enumerate().map(|(i, &x)| x + r.data[i % c]).collect();
            Tensor::raw(a.rows(), c, data)
        }
        Op::Scale(a, s) => map(val(a), |x| x * s),
        Op::ConcatCols(parts) => {
            let rows = val(&parts[0]).rows();
            let cols: usize = parts.iter().map(|p| val(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(p).row(r));
                }
            }
            Tensor::raw(rows, cols, data)
        }
        Op::SliceCols(a, start, len) => {
            let a = val(a);
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[*start..start + len]);
            }
            Tensor::raw(a.rows(), *len, data)
        }
        Op::GatherRows(a, rows) => {
            let a = val(a);
            let mut data = Vec::with_capacity(rows.len() * a.cols());
            for &r in rows.iter() {
                data.extend_from_slice(a.row(r));
            }
            Tensor::raw(rows.len(), a.cols(), data)
        }
        Op::Reshape(a, r, c) => Tensor::raw(*r, *c, val(a).data.clone()),
        Op::Transpose(a) => {
            let a = val(a);
            let (n, m) = (a.rows(), a.cols());
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    data[j * n + i] = a.data[i * m + j];
                }
            }
            Tensor::raw(m, n, data)
        }
        Op::Conv1d {
            x,
            w,
            kernel,
            dilation,
            seg_len,
        } => {
            let (x, w) = (val(x), val(w));
            let (rows, cin, cout) = (x.rows(), x.cols(), w.cols());
            let mut out = vec![0.0; rows * cout];
            for r in 0..rows {
                let t = r % seg_len;
                for k in 0..*kernel {
                    let lag = dilation * (kernel - 1 - k);
                    if lag > t {
                        continue;
                    }
                    let src = &x.data[(r - lag) * cin..(r - lag + 1) * cin];
                    let wk = &w.data[k * cin * cout..(k + 1) * cin * cout];
                    gemm_acc(src, wk, &mut out[r * cout..(r + 1) * cout], 1, cin, cout);
                }
            }
            Tensor::raw(rows, cout, out)
        }
        Op::Sigmoid(a) => map(val(a), sigmoid),
        Op::Tanh(a) => map(val(a), f64::tanh),
        Op::Relu(a) => map(val(a), |x| x.max(0.0)),
        Op::Softmax(a, mask) => {
            let a = val(a);
            let (n, m) = (a.rows(), a.cols());
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                let on = |j: usize| mask.as_ref().is_none_or(|mk| mk[r * m + j]);
                let row = a.row(r);
                let mx = (0..m).filter(|&j| on(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..m {
                    if on(j) {
                        let e = (row[j] - mx).exp();
                        out[r * m + j] = e;
                        z += e;
                    }
                }
                for j in 0..m {
                    out[r * m + j] /= z;
                }
            }
            Tensor::raw(n, m, out)
        }
        Op::Log(a) => map(val(a), |x| x.max(LOG_FLOOR).ln()),
        Op::Embedding(table, ids) => {
            let t = val(table);
            let mut data = Vec::with_capacity(ids.len() * t.cols());
            for &i in ids.iter() {
                data.extend_from_slice(t.row(i));
            }
            Tensor::raw(ids.len(), t.cols(), data)
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (x, gm, bt) = (val(x), val(gamma), val(beta));
            let (n, m) = (x.rows(), x.cols());
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                let row = x.row(r);
                let (mu, inv) = row_stats(row);
                for j in 0..m {
                    out[r * m + j] = gm.data[j] * (row[j] - mu) * inv + bt.data[j];
                }
            }
            Tensor::raw(n, m, out)
        }
        Op::BlockMatMul {
            a,
            b,
            blocks,
            transpose_b,
        } => {
            let (a, b) = (val(a), val(b));
            let p = a.rows() / blocks;
            let q = a.cols();
            let rb = b.rows() / blocks;
            let m = if *transpose_b { rb } else { b.cols() };
            let mut out = vec![0.0; blocks * p * m];
            for gi in 0..*blocks {
                let ab = &a.data[gi * p * q..(gi + 1) * p * q];
                let bb = &b.data[gi * rb * b.cols()..(gi + 1) * rb * b.cols()];
                let ob = &mut out[gi * p * m..(gi + 1) * p * m];
                if *transpose_b {
                    gemm_bt_acc(ab, bb, ob, p, q, m);
                } else {
                    gemm_acc(ab, bb, ob, p, q, m);
                }
            }
            Tensor::raw(blocks * p, m, out)
        }
        Op::NodeMix { x, mix, n } => {
            let x = val(x);
            let groups = x.rows() / n;
            let width = x.cols();
            let mut out = vec![0.0; x.len()];
            for gi in 0..groups {
                let off = gi * n * width;
                gemm_acc(mix, &x.data[off..off + n * width], &mut out[off..off + n * width], *n, *n, width);
            }
            Tensor::raw(x.rows(), width, out)
        }
        Op::Sum(a) => Tensor::scalar(val(a).data.iter().sum()),
        Op::Mean(a) => {
            let a = val(a);
            Tensor::scalar(a.data.iter().sum::<f64>() / a.len().max(1) as f64)
        }
        Op::WeightedNll { probs, targets, coef } => {
            let p = val(probs);
            let loss = targets
                .iter()
                .zip(coef.iter())
                .enumerate()
                .map(|(r, (&t, &c))| -c * p.get(r, t).max(LOG_FLOOR).ln())
                .sum();
            Tensor::scalar(loss)
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

fn accumulate(grads: &mut [Option<Tensor>], g: &Graph, v: Var, delta: Tensor) {
    if !g.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(t) => t.data.iter_mut().zip(&delta.data).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

pub(super) fn backward(g: &Graph, op: &Op, out: &Tensor, dout: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: &Var| &g.nodes[v.0].value;
    let rg = |v: &Var| g.nodes[v.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            if rg(a) {
                let mut da = vec![0.0; n * k];
                gemm_bt_acc(&dout.data, &bv.data, &mut da, n, m, k);
                accumulate(grads, g, *a, Tensor::raw(n, k, da));
            }
            if rg(b) {
                let mut db = vec![0.0; k * m];
                gemm_at_acc(&av.data, &dout.data, &mut db, n, k, m);
                accumulate(grads, g, *b, Tensor::raw(k, m, db));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, g, *a, dout.clone());
            accumulate(grads, g, *b, dout.clone());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if rg(a) {
                let d = dout.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                accumulate(grads, g, *a, Tensor::raw(av.rows(), av.cols(), d));
            }
            if rg(b) {
                let d = dout.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                accumulate(grads, g, *b, Tensor::raw(bv.rows(), bv.cols(), d));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(grads, g, *a, dout.clone());
            if rg(r) {
                let c = dout.cols();
                let mut d = vec![0.0; c];
                for (i, v) in dout.data.iter().enumerate() {
                    d[i % c] += v;
                }
                accumulate(grads, g, *r, Tensor::raw(1, c, d));
            }
        }
        Op::Scale(a, s) => accumulate(grads, g, *a, map(dout, |x| x * s)),
        Op::ConcatCols(parts) => {
            let rows = dout.rows();
            let mut off = 0;
            for p in parts {
                let c = val(p).cols();
                if rg(p) {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&dout.row(r)[off..off + c]);
                    }
                    accumulate(grads, g, *p, Tensor::raw(rows, c, d));
                }
                off += c;
            }
        }
        Op::SliceCols(a, start, len) => {
            let av = val(a);
            let mut d = vec![0.0; av.len()];
            let c = av.cols();
            for r in 0..av.rows() {
                d[r * c + start..r * c + start + len].copy_from_slice(dout.row(r));
            }
            accumulate(grads, g, *a, Tensor::raw(av.rows(), c, d));
        }
        Op::GatherRows(a, rows) => {
            let av = val(a);
            let c = av.cols();
            let mut d = vec![0.0; av.len()];
            for (i, &r) in rows.iter().enumerate() {
                for (x, y) in d[r * c..(r + 1) * c].iter_mut().zip(dout.row(i)) {
                    *x += y;
                }
            }
            accumulate(grads, g, *a, Tensor::raw(av.rows(), c, d));
        }
        Op::Reshape(a, _, _) => {
            let av = val(a);
            accumulate(grads, g, *a, Tensor::raw(av.rows(), av.cols(), dout.data.clone()));
        }
        Op::Transpose(a) => {
            let (n, m) = (dout.rows(), dout.cols());
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    d[j * n + i] = dout.data[i * m + j];
                }
            }
            accumulate(grads, g, *a, Tensor::raw(m, n, d));
        }
        Op::Conv1d {
            x,
            w,
            kernel,
            dilation,
            seg_len,
        } => {
            let (xv, wv) = (val(x), val(w));
            let (rows, cin, cout) = (xv.rows(), xv.cols(), wv.cols());
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            for r in 0..rows {
                let t = r % seg_len;
                let drow = &dout.data[r * cout..(r + 1) * cout];
                for k in 0..*kernel {
                    let lag = dilation * (kernel - 1 - k);
                    if lag > t {
                        continue;
                    }
                    let s = r - lag;
                    let wk = &wv.data[k * cin * cout..(k + 1) * cin * cout];
                    gemm_bt_acc(drow, wk, &mut dx[s * cin..(s + 1) * cin], 1, cout, cin);
                    let src = &xv.data[s * cin..(s + 1) * cin];
                    gemm_at_acc(src, drow, &mut dw[k * cin * cout..(k + 1) * cin * cout], 1, cin, cout);
                }
            }
            if rg(x) {
                accumulate(grads, g, *x, Tensor::raw(rows, cin, dx));
            }
            if rg(w) {
                accumulate(grads, g, *w, Tensor::raw(wv.rows(), cout, dw));
            }
        }
        Op::Sigmoid(a) => {
            let d = dout.data.iter().zip(&out.data).map(|(d, y)| d * y * (1.0 - y)).collect();
            accumulate(grads, g, *a, Tensor::raw(out.rows(), out.cols(), d));
        }
        Op::Tanh(a) => {
            let d = dout.data.iter().zip(&out.data).map(|(d, y)| d * (1.0 - y * y)).collect();
            accumulate(grads, g, *a, Tensor::raw(out.rows(), out.cols(), d));
        }
        Op::Relu(a) => {
            let d = dout
                .data
                .iter()
                .zip(&val(a).data)
                .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                .collect();
            accumulate(grads, g, *a, Tensor::raw(out.rows(), out.cols(), d));
        }
        Op::Softmax(a, _) => {
            let (n, m) = (out.rows(), out.cols());
            let mut d = vec![0.0; n * m];
            for r in 0..n {
                let y = out.row(r);
                let dy = dout.row(r);
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    d[r * m + j] = y[j] * (dy[j] - dot);
                }
            }
            accumulate(grads, g, *a, Tensor::raw(n, m, d));
        }
        Op::Log(a) => {
            let d = dout
                .data
                .iter()
                .zip(&val(a).data)
                .map(|(d, x)| if *x > LOG_FLOOR { d / x } else { 0.0 })
                .collect();
            accumulate(grads, g, *a, Tensor::raw(out.rows(), out.cols(), d));
        }
        Op::Embedding(table, ids) => {
            let tv = val(table);
            let c = tv.cols();
            let mut d = vec![0.0; tv.len()];
            for (i, &id) in ids.iter().enumerate() {
                for (x, y) in d[id * c..(id + 1) * c].iter_mut().zip(dout.row(i)) {
                    *x += y;
                }
            }
            accumulate(grads, g, *table, Tensor::raw(tv.rows(), c, d));
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (xv, gv) = (val(x), val(gamma));
            let (n, m) = (xv.rows(), xv.cols());
            let mut dx = vec![0.0; n * m];
            let mut dg = vec![0.0; m];
            let mut db = vec![0.0; m];
            let mut xhat = vec![0.0; m];
            let mut dxhat = vec![0.0; m];
            for r in 0..n {
                let row = xv.row(r);
                let dy = dout.row(r);
                let (mu, inv) = row_stats(row);
                for j in 0..m {
                    xhat[j] = (row[j] - mu) * inv;
                    dxhat[j] = dy[j] * gv.data[j];
                    dg[j] += dy[j] * xhat[j];
                    db[j] += dy[j];
                }
                let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                for j in 0..m {
                    dx[r * m + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                }
            }
            accumulate(grads, g, *x, Tensor::raw(n, m, dx));
            accumulate(grads, g, *gamma, Tensor::raw(1, m, dg));
            accumulate(grads, g, *beta, Tensor::raw(1, m, db));
        }
        Op::BlockMatMul {
            a,
            b,
            blocks,
            transpose_b,
        } => {
            let (av, bv) = (val(a), val(b));
            let p = av.rows() / blocks;
            let q = av.cols();
            let rb = bv.rows() / blocks;
            let bc = bv.cols();
            let m = out.cols();
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for gi in 0..*blocks {
                let ab = &av.data[gi * p * q..(gi + 1) * p * q];
                let bb = &bv.data[gi * rb * bc..(gi + 1) * rb * bc];
                let ob = &dout.data[gi * p * m..(gi + 1) * p * m];
                let dab = &mut da[gi * p * q..(gi + 1) * p * q];
                if *transpose_b {
                    // out = A B^T: dA = dO B, dB = dO^T A
                    gemm_acc(ob, bb, dab, p, m, q);
                    gemm_at_acc(ob, ab, &mut db[gi * rb * bc..(gi + 1) * rb * bc], p, m, q);
                } else {
                    // out = A B: dA = dO B^T, dB = A^T dO
                    gemm_bt_acc(ob, bb, dab, p, m, q);
                    gemm_at_acc(ab, ob, &mut db[gi * rb * bc..(gi + 1) * rb * bc], p, q, m);
                }
            }
            if rg(a) {
                accumulate(grads, g, *a, Tensor::raw(av.rows(), q, da));
            }
            if rg(b) {
                accumulate(grads, g, *b, Tensor::raw(bv.rows(), bc, db));
            }
        }
        Op::NodeMix { x, mix, n } => {
            let width = dout.cols();
            let groups = dout.rows() / n;
            let mut d = vec![0.0; dout.len()];
            for gi in 0..groups {
                let off = gi * n * width;
                gemm_at_acc(mix, &dout.data[off..off + n * width], &mut d[off..off + n * width], *n, *n, width);
            }
            accumulate(grads, g, *x, Tensor::raw(dout.rows(), width, d));
        }
        Op::Sum(a) => {
            let av = val(a);
            accumulate(grads, g, *a, Tensor::raw(av.rows(), av.cols(), vec![dout.data[0]; av.len()]));
        }
        Op::Mean(a) => {
            let av = val(a);
            let s = dout.data[0] / av.len().max(1) as f64;
            accumulate(grads, g, *a, Tensor::raw(av.rows(), av.cols(), vec![s; av.len()]));
        }
        Op::WeightedNll { probs, targets, coef } => {
            let pv = val(probs);
            let mut d = vec![0.0; pv.len()];
            for (r, (&t, &c)) in targets.iter().zip(coef.iter()).enumerate() {
                let p = pv.get(r, t);
                if p > LOG_FLOOR {
                    d[r * pv.cols() + t] = -c * dout.data[0] / p;
                }
            }
            accumulate(grads, g, *probs, Tensor::raw(pv.rows(), pv.cols(), d));
        }
    }
}
