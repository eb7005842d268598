//! Brute-force reference implementations for tests and golden files.
//!
//! Everything here is written with plain loops over `Vec<Vec<f64>>` and
//! shares no code with the tensor engine. Inputs and outputs are named
//! values; parameter maps are passed as `<name>.weight` (`d_in × d_out`)
//! and `<name>.bias`.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fem::FemParams;
use crate::params::Parameters;
use crate::rfm::{FusionGate, FusionMode};

pub type Mat = Vec<Vec<f64>>;

/// Largest data extent accepted by the oracles.
pub const MAX_EXTENT: usize = 8;

const EPS: f64 = 1e-12;

/// Every operation with an oracle.
pub const REGISTERED: &[&str] = &[
    "matmul",
    "softmax",
    "cosine_sim",
    "pool_captions",
    "word_highlight",
    "sentence_pool",
    "scene_similarities",
    "scene_compose",
    "cross_enhance",
    "fem_forward",
    "relevance_similarities",
    "fuse",
    "iterative_filter",
    "rfm_forward",
    "loss_query_video",
    "loss_query_clip",
    "loss_caption_clip",
    "loss_total",
    "saliency_head",
];

/// Operations whose outputs are linear in their data inputs; these are
/// compared at the tighter tolerance.
pub const LINEAR: &[&str] = &["matmul", "loss_total"];

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Mat),
    Cube(Vec<Mat>),
    Mask(Vec<bool>),
    Index(usize),
    Indices(Vec<usize>),
    Flag(bool),
}

impl Value {
    /// Row-major flattening of the numeric content.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Value::Scalar(x) => vec![*x],
            Value::Vector(v) => v.clone(),
            Value::Matrix(m) => m.iter().flatten().copied().collect(),
            Value::Cube(c) => c.iter().flatten().flatten().copied().collect(),
            Value::Mask(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            Value::Index(i) => vec![*i as f64],
            Value::Indices(v) => v.iter().map(|&i| i as f64).collect(),
            Value::Flag(b) => vec![if *b { 1.0 } else { 0.0 }],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleInputs {
    values: BTreeMap<String, Value>,
}

macro_rules! getter {
    ($name:ident, $variant:ident, $ty:ty) => {
        fn $name(&self, key: &str) -> Result<&$ty> {
            match self.values.get(key) {
                Some(Value::$variant(x)) => Ok(x),
                Some(other) => Err(Error::Contract(format!(
                    "oracle input `{key}` has the wrong kind: {other:?}"
                ))),
                None => Err(Error::Contract(format!("oracle input `{key}` is missing"))),
            }
        }
    };
}

impl OracleInputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.values.insert(key.to_string(), value);
        self
    }

    pub fn insert(&mut self, key: &str, value: Value) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    /// Adds every parameter of `params` under its visit name without the
    /// `fem.` prefix.
    pub fn with_fem_params(mut self, params: &FemParams) -> Self {
        params.visit(&mut |name, t| {
            let key = name.strip_prefix("fem.").unwrap_or(name);
            let value = if t.rank() == 2 {
                Value::Matrix(t.to_rows())
            } else {
                Value::Vector(t.data().to_vec())
            };
            self.values.insert(key.to_string(), value);
        });
        self
    }

    pub fn with_gate(mut self, gate: &FusionGate) -> Self {
        self.insert("gate.weight", Value::Matrix(gate.gate.weight.to_rows()));
        let bias = gate.gate.bias.as_ref().map_or(vec![0.0], |b| b.data().to_vec());
        self.insert("gate.bias", Value::Vector(bias));
        self.insert("gate.average", Value::Flag(gate.mode == FusionMode::Average));
        self
    }

    getter!(scalar, Scalar, f64);
    getter!(vector, Vector, Vec<f64>);
    getter!(matrix, Matrix, Mat);
    getter!(cube, Cube, Vec<Mat>);
    getter!(mask, Mask, Vec<bool>);
    getter!(index, Index, usize);
    getter!(indices, Indices, Vec<usize>);
    getter!(flag, Flag, bool);

    fn check_extents(&self) -> Result<()> {
        for (key, v) in &self.values {
            if key.contains('.') {
                continue;
            }
            let too_big = match v {
                Value::Vector(x) => x.len() > MAX_EXTENT,
                Value::Matrix(m) => m.len() > MAX_EXTENT || m.iter().any(|r| r.len() > MAX_EXTENT),
                Value::Cube(c) => {
                    c.len() > MAX_EXTENT
                        || c.iter()
                            .any(|m| m.len() > MAX_EXTENT || m.iter().any(|r| r.len() > MAX_EXTENT))
                }
                _ => false,
            };
            if too_big {
                return Err(Error::Contract(format!(
                    "oracle input `{key}` exceeds the small-instance bound of {MAX_EXTENT}"
                )));
            }
        }
        Ok(())
    }

    fn linear(&self, name: &str, x: &Mat) -> Result<Mat> {
        let w = self.matrix(&format!("{name}.weight"))?;
        let b = self.values.get(&format!("{name}.bias"));
        let mut out = vec![vec![0.0; w[0].len()]; x.len()];
        for i in 0..x.len() {
            for j in 0..w[0].len() {
                let mut acc = 0.0;
                for k in 0..w.len() {
                    acc += x[i][k] * w[k][j];
                }
                if let Some(Value::Vector(b)) = b {
                    acc += b[j];
                }
                out[i][j] = acc;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleResult {
    pub outputs: BTreeMap<String, Value>,
}

impl OracleResult {
    fn put(&mut self, key: &str, value: Value) {
        self.outputs.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Result<&Value> {
        self.outputs
            .get(key)
            .ok_or_else(|| Error::Contract(format!("oracle output `{key}` is missing")))
    }

    pub fn flat(&self, key: &str) -> Result<Vec<f64>> {
        Ok(self.get(key)?.flat())
    }

    /// Largest absolute difference between output `key` and `candidate`.
    pub fn max_abs_diff(&self, key: &str, candidate: &[f64]) -> Result<f64> {
        Ok(max_abs_diff(&self.flat(key)?, candidate))
    }
}

/// Largest elementwise absolute difference; infinite when lengths differ.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut m: f64 = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]).abs();
        if d.is_nan() {
            return f64::INFINITY;
        }
        m = m.max(d);
    }
    m
}

pub fn oracle_for(op: &str, inputs: &OracleInputs) -> Result<OracleResult> {
    inputs.check_extents()?;
    let mut r = OracleResult::default();
    match op {
        "matmul" => {
            r.put("out", Value::Matrix(matmul(inputs.matrix("a")?, inputs.matrix("b")?)));
        }
        "softmax" => {
            let x = inputs.vector("x")?;
            let mask = match inputs.get("mask") {
                Some(_) => inputs.mask("mask")?.clone(),
                None => vec![true; x.len()],
            };
            r.put("out", Value::Vector(masked_softmax(x, &mask)));
        }
        "cosine_sim" | "saliency_head" => {
            let (xk, yk) = if op == "cosine_sim" { ("x", "y") } else { ("f_fv", "f_eq_sent") };
            let x = inputs.matrix(xk)?;
            let y = inputs.vector(yk)?;
            r.put("out", Value::Vector(x.iter().map(|row| cosine(row, y)).collect()));
        }
        "pool_captions" => {
            let (f, w) = pool_captions(
                inputs.matrix("query")?,
                inputs.mask("query_valid")?,
                inputs.cube("captions")?,
                inputs.mask("caption_valid")?,
            );
            r.put("features", Value::Matrix(f));
            r.put("weights", Value::Matrix(w));
        }
        "word_highlight" => {
            let h = word_highlight(inputs, inputs.matrix("f_q")?, inputs.mask("query_valid")?)?;
            r.put("f_eq", Value::Matrix(h.f_eq));
            r.put("scores", Value::Vector(h.scores));
            r.put("order", Value::Indices(h.order));
        }
        "sentence_pool" => {
            let s = sentence_pool(inputs.matrix("f_eq")?, inputs.vector("scores")?, inputs.mask("query_valid")?);
            r.put("f_eq_sent", Value::Vector(s));
        }
        "scene_similarities" => {
            let s = scene_similarities(
                inputs,
                inputs.matrix("f_v")?,
                inputs.matrix("f_c")?,
                inputs.matrix("f_eq")?,
                inputs.mask("query_valid")?,
            )?;
            s.put_into(&mut r);
        }
        "scene_compose" => {
            let (f_v, f_c, f_eq) = (inputs.matrix("f_v")?, inputs.matrix("f_c")?, inputs.matrix("f_eq")?);
            let s = scene_similarities(inputs, f_v, f_c, f_eq, inputs.mask("query_valid")?)?;
            let (qv, qc) = scene_compose(inputs, f_v, f_c, f_eq, inputs.vector("f_eq_sent")?, &s)?;
            r.put("f_qv", Value::Matrix(qv));
            r.put("f_qc", Value::Matrix(qc));
        }
        "cross_enhance" => {
            let (ev, ec) = cross_enhance(inputs, inputs.matrix("f_qv")?, inputs.matrix("f_qc")?)?;
            r.put("f_ev", Value::Matrix(ev));
            r.put("f_ec", Value::Matrix(ec));
        }
        "fem_forward" => {
            let valid = inputs.mask("query_valid")?;
            let (f_v, f_c) = (inputs.matrix("f_v")?, inputs.matrix("f_c")?);
            let h = word_highlight(inputs, inputs.matrix("f_q")?, valid)?;
            let sent = sentence_pool(&h.f_eq, &h.scores, valid);
            let s = scene_similarities(inputs, f_v, f_c, &h.f_eq, valid)?;
            let (qv, qc) = scene_compose(inputs, f_v, f_c, &h.f_eq, &sent, &s)?;
            let (ev, ec) = cross_enhance(inputs, &qv, &qc)?;
            s.put_into(&mut r);
            r.put("f_eq", Value::Matrix(h.f_eq));
            r.put("scores", Value::Vector(h.scores));
            r.put("order", Value::Indices(h.order));
            r.put("f_eq_sent", Value::Vector(sent));
            r.put("f_qv", Value::Matrix(qv));
            r.put("f_qc", Value::Matrix(qc));
            r.put("f_ev", Value::Matrix(ev));
            r.put("f_ec", Value::Matrix(ec));
        }
        "relevance_similarities" => {
            let (s_qv, s_qc) = relevance_similarities(
                inputs.matrix("f_ev")?,
                inputs.matrix("f_ec")?,
                inputs.matrix("f_eq")?,
                inputs.mask("query_valid")?,
            );
            r.put("s_qv", Value::Matrix(s_qv));
            r.put("s_qc", Value::Matrix(s_qc));
        }
        "fuse" => {
            let (s, w) = fuse(inputs, inputs.matrix("s_qv")?, inputs.matrix("s_qc")?)?;
            r.put("s_qvc", Value::Matrix(s));
            r.put("w", Value::Matrix(w));
        }
        "iterative_filter" => {
            let n = *inputs.index("n")?;
            let order = inputs.indices("order")?;
            if n > order.len() {
                return Err(Error::Contract(format!("{n} iterations but {} ranked words", order.len())));
            }
            let words = &order[..n];
            let (f_fv, trace) = filter_closed_form(inputs.matrix("f_ev")?, inputs.matrix("s_qvc")?, words);
            r.put("f_fv", Value::Matrix(f_fv));
            r.put("trace", Value::Cube(trace));
            r.put("selected_words", Value::Indices(words.to_vec()));
        }
        "rfm_forward" => {
            let valid = inputs.mask("query_valid")?;
            let n = *inputs.index("n")?;
            let order = rank(inputs.vector("scores")?, valid);
            let valid_count = valid.iter().filter(|&&v| v).count();
            if n > valid_count {
                return Err(Error::Contract(format!("{n} iterations but {valid_count} valid words")));
            }
            let f_ev = inputs.matrix("f_ev")?;
            let (s_qv, s_qc) = relevance_similarities(f_ev, inputs.matrix("f_ec")?, inputs.matrix("f_eq")?, valid);
            let (s_qvc, _) = fuse(inputs, &s_qv, &s_qc)?;
            let (f_fv, trace) = filter_closed_form(f_ev, &s_qvc, &order[..n]);
            r.put("s_qv", Value::Matrix(s_qv));
            r.put("s_qc", Value::Matrix(s_qc));
            r.put("s_qvc", Value::Matrix(s_qvc));
            r.put("selected_words", Value::Indices(order[..n].to_vec()));
            r.put("f_fv", Value::Matrix(f_fv));
            r.put("trace", Value::Cube(trace));
        }
        "loss_query_video" => {
            r.put("value", Value::Scalar(loss_query_video(inputs.matrix("g_v")?, inputs.matrix("g_q")?)));
        }
        "loss_query_clip" => {
            let v = loss_query_clip(inputs.matrix("s_qv")?, inputs.mask("query_valid")?, inputs.mask("relevance")?);
            r.put("value", Value::Scalar(v));
        }
        "loss_caption_clip" => {
            r.put("value", Value::Scalar(loss_caption_clip(inputs.cube("f_v")?, inputs.cube("f_c")?)));
        }
        "loss_total" => {
            let w = inputs.vector("weights")?;
            let v = w[0] * inputs.scalar("l_qv")? + w[1] * inputs.scalar("l_qc")? + w[2] * inputs.scalar("l_cc")?;
            r.put("value", Value::Scalar(v));
        }
        other => return Err(Error::UnknownOracle(other.to_string())),
    }
    Ok(r)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    let mut out = vec![vec![0.0; a.len()]; a[0].len()];
    for i in 0..a.len() {
        for j in 0..a[0].len() {
            out[j][i] = a[i][j];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt().max(EPS) * dot(b, b).sqrt().max(EPS))
}

fn masked_softmax(x: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for i in 0..x.len() {
        if mask[i] && x[i] > m {
            m = x[i];
        }
    }
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            out[i] = (x[i] - m).exp();
            z += out[i];
        }
    }
    for v in &mut out {
        if z > 0.0 {
            *v /= z;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn valid_mean(rows: &Mat, valid: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    let mut n = 0.0;
    for (row, &v) in rows.iter().zip(valid) {
        if v {
            for k in 0..row.len() {
                out[k] += row[k];
            }
            n += 1.0;
        }
    }
    out.iter().map(|x| x / n).collect()
}

fn pool_captions(query: &Mat, query_valid: &[bool], captions: &[Mat], caption_valid: &[bool]) -> (Mat, Mat) {
    let n_words = query_valid.iter().filter(|&&v| v).count() as f64;
    let lc = captions[0].len();
    let mut features = Vec::new();
    let mut weights = Vec::new();
    for (i, clip) in captions.iter().enumerate() {
        let mut pre = vec![0.0; lc];
        for (c, token) in clip.iter().enumerate() {
            for (w, word) in query.iter().enumerate() {
                if query_valid[w] {
                    pre[c] += dot(token, word) / n_words;
                }
            }
        }
        let a = masked_softmax(&pre, &caption_valid[i * lc..(i + 1) * lc]);
        let mut f = vec![0.0; clip[0].len()];
        for c in 0..lc {
            for k in 0..f.len() {
                f[k] += a[c] * clip[c][k];
            }
        }
        features.push(f);
        weights.push(a);
    }
    (features, weights)
}

fn attention(inputs: &OracleInputs, names: [&str; 3], queries: &Mat, keys: &Mat, key_valid: &[bool]) -> Result<Mat> {
    let q = inputs.linear(names[0], queries)?;
    let k = inputs.linear(names[1], keys)?;
    let v = inputs.linear(names[2], keys)?;
    let scale = (q[0].len() as f64).sqrt();
    let mut out = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k.iter().map(|kj| dot(qi, kj) / scale).collect();
        let a = masked_softmax(&logits, key_valid);
        let mut row = vec![0.0; v[0].len()];
        for j in 0..v.len() {
            for c in 0..row.len() {
                row[c] += a[j] * v[j][c];
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Position of each valid word counted by how many valid words outrank it;
/// padded words follow in index order.
fn rank(scores: &[f64], valid: &[bool]) -> Vec<usize> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    let mut order = vec![usize::MAX; scores.len()];
    let mut next_padded = n_valid;
    for w in 0..scores.len() {
        if !valid[w] {
            order[next_padded] = w;
            next_padded += 1;
            continue;
        }
        let mut ahead = 0;
        for u in 0..scores.len() {
            if valid[u] && (scores[u] > scores[w] || (scores[u] == scores[w] && u < w)) {
                ahead += 1;
            }
        }
        order[ahead] = w;
    }
    order
}

struct Highlight {
    f_eq: Mat,
    scores: Vec<f64>,
    order: Vec<usize>,
}

fn word_highlight(inputs: &OracleInputs, f_q: &Mat, valid: &[bool]) -> Result<Highlight> {
    let f_eq = attention(inputs, ["attn_q", "attn_k", "attn_v"], f_q, f_q, valid)?;
    let g_eq = valid_mean(&f_eq, valid);
    let scores: Vec<f64> = f_eq.iter().map(|row| cosine(row, &g_eq)).collect();
    let order = rank(&scores, valid);
    Ok(Highlight { f_eq, scores, order })
}

fn sentence_pool(f_eq: &Mat, scores: &[f64], valid: &[bool]) -> Vec<f64> {
    let w = masked_softmax(scores, valid);
    let mut out = vec![0.0; f_eq[0].len()];
    for (i, row) in f_eq.iter().enumerate() {
        for k in 0..out.len() {
            out[k] += w[i] * row[k];
        }
    }
    out
}

struct Sims {
    a_vq: Mat,
    a_cq: Mat,
    a_vq_row: Mat,
    a_cq_row: Mat,
    a_vq_col: Mat,
    a_cq_col: Mat,
}

impl Sims {
    fn put_into(&self, r: &mut OracleResult) {
        r.put("a_vq", Value::Matrix(self.a_vq.clone()));
        r.put("a_cq", Value::Matrix(self.a_cq.clone()));
        r.put("a_vq_row", Value::Matrix(self.a_vq_row.clone()));
        r.put("a_cq_row", Value::Matrix(self.a_cq_row.clone()));
        r.put("a_vq_col", Value::Matrix(self.a_vq_col.clone()));
        r.put("a_cq_col", Value::Matrix(self.a_cq_col.clone()));
    }
}

fn scaled_affinity(px: &Mat, pq: &Mat) -> Mat {
    let scale = (px[0].len() as f64).sqrt();
    let mut a = vec![vec![0.0; pq.len()]; px.len()];
    for i in 0..px.len() {
        for w in 0..pq.len() {
            a[i][w] = dot(&px[i], &pq[w]) / scale;
        }
    }
    a
}

fn column_softmax(a: &Mat) -> Mat {
    let all = vec![true; a.len()];
    transpose(&transpose(a).iter().map(|col| masked_softmax(col, &all)).collect())
}

fn scene_similarities(inputs: &OracleInputs, f_v: &Mat, f_c: &Mat, f_eq: &Mat, valid: &[bool]) -> Result<Sims> {
    let pq = inputs.linear("proj_q", f_eq)?;
    let a_vq = scaled_affinity(&inputs.linear("proj_v", f_v)?, &pq);
    let a_cq = scaled_affinity(&inputs.linear("proj_c", f_c)?, &pq);
    Ok(Sims {
        a_vq_row: a_vq.iter().map(|r| masked_softmax(r, valid)).collect(),
        a_cq_row: a_cq.iter().map(|r| masked_softmax(r, valid)).collect(),
        a_vq_col: column_softmax(&a_vq),
        a_cq_col: column_softmax(&a_cq),
        a_vq,
        a_cq,
    })
}

#[allow(clippy::too_many_arguments)]
fn compose_stream(
    inputs: &OracleInputs,
    x: &Mat,
    f_eq: &Mat,
    sent: &[f64],
    row: &Mat,
    col: &Mat,
    hat: &str,
    conv: &str,
) -> Result<Mat> {
    let (lv, lq, d) = (x.len(), f_eq.len(), x[0].len());
    let mut fused = Vec::new();
    for i in 0..lv {
        let mut x2q = vec![0.0; d];
        for w in 0..lq {
            for k in 0..d {
                x2q[k] += row[i][w] * f_eq[w][k];
            }
        }
        let mut q2x = vec![0.0; d];
        for j in 0..lv {
            let mut affinity = 0.0;
            for w in 0..lq {
                affinity += row[i][w] * col[j][w];
            }
            for k in 0..d {
                q2x[k] += affinity * x[j][k];
            }
        }
        let mut cat = x[i].clone();
        cat.extend_from_slice(&x2q);
        cat.extend((0..d).map(|k| x[i][k] * x2q[k]));
        cat.extend((0..d).map(|k| x[i][k] * q2x[k]));
        let mut h = inputs.linear(hat, &vec![cat])?.remove(0);
        h.extend_from_slice(sent);
        fused.push(h);
    }
    let out = inputs.linear(conv, &fused)?;
    Ok(out.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect())
}

fn scene_compose(inputs: &OracleInputs, f_v: &Mat, f_c: &Mat, f_eq: &Mat, sent: &[f64], s: &Sims) -> Result<(Mat, Mat)> {
    Ok((
        compose_stream(inputs, f_v, f_eq, sent, &s.a_vq_row, &s.a_vq_col, "proj_hat_v", "conv_v")?,
        compose_stream(inputs, f_c, f_eq, sent, &s.a_cq_row, &s.a_cq_col, "proj_hat_c", "conv_c")?,
    ))
}

fn cross_enhance(inputs: &OracleInputs, f_qv: &Mat, f_qc: &Mat) -> Result<(Mat, Mat)> {
    let names = ["cross_q", "cross_k", "cross_v"];
    let all = vec![true; f_qv.len()];
    Ok((
        attention(inputs, names, f_qv, f_qc, &all)?,
        attention(inputs, names, f_qc, f_qv, &all)?,
    ))
}

fn relevance_similarities(f_ev: &Mat, f_ec: &Mat, f_eq: &Mat, valid: &[bool]) -> (Mat, Mat) {
    let sim = |x: &Mat| -> Mat {
        x.iter()
            .map(|row| {
                (0..f_eq.len())
                    .map(|w| if valid[w] { cosine(row, &f_eq[w]) } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    (sim(f_ev), sim(f_ec))
}

fn fuse(inputs: &OracleInputs, s_qv: &Mat, s_qc: &Mat) -> Result<(Mat, Mat)> {
    let average = *inputs.flag("gate.average")?;
    let w = inputs.matrix("gate.weight")?;
    let b = inputs.vector("gate.bias")?[0];
    let mut fused = s_qv.clone();
    let mut gates = s_qv.clone();
    for i in 0..s_qv.len() {
        for j in 0..s_qv[0].len() {
            let g = if average {
                0.5
            } else {
                sigmoid(w[0][0] * s_qv[i][j] + w[1][0] * s_qc[i][j] + b)
            };
            gates[i][j] = g;
            fused[i][j] = g * s_qv[i][j] + (1.0 - g) * s_qc[i][j];
        }
    }
    Ok((fused, gates))
}

/// `F_ev ⊙ Π_j (1 + S_qvc[:, w_j])`, with every partial product.
fn filter_closed_form(f_ev: &Mat, s_qvc: &Mat, words: &[usize]) -> (Mat, Vec<Mat>) {
    let mut trace = Vec::with_capacity(words.len() + 1);
    for t in 0..=words.len() {
        let mut x = f_ev.clone();
        for i in 0..x.len() {
            let mut gain = 1.0;
            for &w in &words[..t] {
                gain *= 1.0 + s_qvc[i][w];
            }
            for v in &mut x[i] {
                *v *= gain;
            }
        }
        trace.push(x);
    }
    (trace.last().unwrap().clone(), trace)
}

fn loss_query_video(g_v: &Mat, g_q: &Mat) -> f64 {
    let b = g_v.len();
    let mut total = 0.0;
    for j in 0..b {
        let mut denom = 0.0;
        for i in 0..b {
            denom += cosine(&g_v[i], &g_q[j]).exp();
        }
        total -= (cosine(&g_v[j], &g_q[j]).exp() / denom).ln();
    }
    total / b as f64
}

fn loss_query_clip(s_qv: &Mat, query_valid: &[bool], relevance: &[bool]) -> f64 {
    let n = query_valid.iter().filter(|&&v| v).count() as f64;
    let mut total = 0.0;
    for (i, row) in s_qv.iter().enumerate() {
        let mut g = 0.0;
        for w in 0..row.len() {
            if query_valid[w] {
                g += sigmoid(row[w]) / n;
            }
        }
        let g = g.clamp(EPS, 1.0 - EPS);
        total -= if relevance[i] { g.ln() } else { (1.0 - g).ln() };
    }
    total
}

fn loss_caption_clip(f_v: &[Mat], f_c: &[Mat]) -> f64 {
    let b = f_v.len();
    let mut total = 0.0;
    for k in 0..b {
        let mut num = 0.0;
        let mut denom = 0.0;
        for i in 0..b {
            for j in 0..f_v[i].len().min(f_c[k].len()) {
                let e = cosine(&f_v[i][j], &f_c[k][j]).exp();
                denom += e;
                if i == k {
                    num += e;
                }
            }
        }
        total -= (num / denom).ln();
    }
    total / b as f64
}
