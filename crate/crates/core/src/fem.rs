//! Feature enhancement: word highlighting and scene understanding.
//!
//! Word highlighting self-attends over the query, scores every word by its
//! cosine to the pooled sentence and ranks the words. Scene understanding
//! correlates clips and captions with the enhanced words, fuses the
//! resulting context into query-aware clip and caption features, and
//! cross-attends the two streams.

use crate::error::{Error, Result};
use crate::fixtures::masked_row_mean;
use crate::params::{BoundLinear, Initializer, Linear, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learnable maps of the enhancement module. Weights are `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FemParams {
    pub attn_q: Linear,
    pub attn_k: Linear,
    pub attn_v: Linear,
    pub proj_v: Linear,
    pub proj_c: Linear,
    pub proj_q: Linear,
    /// `4d → d`.
    pub proj_hat_v: Linear,
    /// `4d → d`.
    pub proj_hat_c: Linear,
    /// Pointwise conv kernel, `2d → d`.
    pub conv_v: Linear,
    /// Pointwise conv kernel, `2d → d`.
    pub conv_c: Linear,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
}

impl FemParams {
    pub fn new(d: usize, init: &mut Initializer) -> Self {
        Self {
            attn_q: Linear::new(init, d, d, false),
            attn_k: Linear::new(init, d, d, false),
            attn_v: Linear::new(init, d, d, false),
            proj_v: Linear::new(init, d, d, true),
            proj_c: Linear::new(init, d, d, true),
            proj_q: Linear::new(init, d, d, true),
            proj_hat_v: Linear::new(init, 4 * d, d, true),
            proj_hat_c: Linear::new(init, 4 * d, d, true),
            conv_v: Linear::new(init, 2 * d, d, true),
            conv_c: Linear::new(init, 2 * d, d, true),
            cross_q: Linear::new(init, d, d, false),
            cross_k: Linear::new(init, d, d, false),
            cross_v: Linear::new(init, d, d, false),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn_q.d_in()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FemVars {
        self.bind_with(&mut |t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Binds every map through `put` in visit order.
    pub fn bind_with(&self, put: &mut dyn FnMut(&Tensor) -> Var) -> FemVars {
        FemVars {
            attn_q: self.attn_q.bind_with(put),
            attn_k: self.attn_k.bind_with(put),
            attn_v: self.attn_v.bind_with(put),
            proj_v: self.proj_v.bind_with(put),
            proj_c: self.proj_c.bind_with(put),
            proj_q: self.proj_q.bind_with(put),
            proj_hat_v: self.proj_hat_v.bind_with(put),
            proj_hat_c: self.proj_hat_c.bind_with(put),
            conv_v: self.conv_v.bind_with(put),
            conv_c: self.conv_c.bind_with(put),
            cross_q: self.cross_q.bind_with(put),
            cross_k: self.cross_k.bind_with(put),
            cross_v: self.cross_v.bind_with(put),
        }
    }

    fn named(&self) -> [(&'static str, &Linear); 13] {
        [
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
            ("proj_v", &self.proj_v),
            ("proj_c", &self.proj_c),
            ("proj_q", &self.proj_q),
            ("proj_hat_v", &self.proj_hat_v),
            ("proj_hat_c", &self.proj_hat_c),
            ("conv_v", &self.conv_v),
            ("conv_c", &self.conv_c),
            ("cross_q", &self.cross_q),
            ("cross_k", &self.cross_k),
            ("cross_v", &self.cross_v),
        ]
    }
}

impl Parameters for FemParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, l) in self.named() {
            l.visit_named(&format!("fem.{name}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let fields: [(&str, &mut Linear); 13] = [
            ("attn_q", &mut self.attn_q),
            ("attn_k", &mut self.attn_k),
            ("attn_v", &mut self.attn_v),
            ("proj_v", &mut self.proj_v),
            ("proj_c", &mut self.proj_c),
            ("proj_q", &mut self.proj_q),
            ("proj_hat_v", &mut self.proj_hat_v),
            ("proj_hat_c", &mut self.proj_hat_c),
            ("conv_v", &mut self.conv_v),
            ("conv_c", &mut self.conv_c),
            ("cross_q", &mut self.cross_q),
            ("cross_k", &mut self.cross_k),
            ("cross_v", &mut self.cross_v),
        ];
        for (name, l) in fields {
            l.visit_named_mut(&format!("fem.{name}"), f);
        }
    }
}

/// [`FemParams`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FemVars {
    pub attn_q: BoundLinear,
    pub attn_k: BoundLinear,
    pub attn_v: BoundLinear,
    pub proj_v: BoundLinear,
    pub proj_c: BoundLinear,
    pub proj_q: BoundLinear,
    pub proj_hat_v: BoundLinear,
    pub proj_hat_c: BoundLinear,
    pub conv_v: BoundLinear,
    pub conv_c: BoundLinear,
    pub cross_q: BoundLinear,
    pub cross_k: BoundLinear,
    pub cross_v: BoundLinear,
}

/// Per-word importance scores and the ranking they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct WordHighlight {
    /// Cosine of each enhanced word to the pooled sentence feature.
    pub scores: Vec<f64>,
    /// All word indices: valid words by descending score (lower index first
    /// on ties), then padded words in index order.
    pub order: Vec<usize>,
    pub valid: Vec<bool>,
}

impl WordHighlight {
    pub fn rank(scores: &[f64], valid: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).filter(|&k| valid[k]).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.extend((0..scores.len()).filter(|&k| !valid[k]));
        Self {
            scores: scores.to_vec(),
            order,
            valid: valid.to_vec(),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The `n` highest-ranked valid words.
    pub fn top(&self, n: usize) -> Result<&[usize]> {
        if n > self.valid_count() {
            return Err(Error::Contract(format!(
                "requested {n} words but only {} are valid",
                self.valid_count()
            )));
        }
        Ok(&self.order[..n])
    }
}

/// Single-head scaled dot-product attention with learned, bias-free q/k/v
/// maps. `key_valid` masks key positions.
pub fn attention(
    tape: &mut Tape,
    (wq, wk, wv): (&BoundLinear, &BoundLinear, &BoundLinear),
    queries: Var,
    keys: Var,
    values: Var,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let q = wq.apply(tape, queries)?;
    let k = wk.apply(tape, keys)?;
    let v = wv.apply(tape, values)?;
    let d = tape.shape(q)[1] as f64;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / d.sqrt());
    let mask = key_valid.map(|kv| tile_rows(kv, tape.shape(logits)[0]));
    let weights = tape.masked_softmax(logits, 1, mask.as_deref())?;
    tape.matmul(weights, v)
}

fn tile_rows(row_mask: &[bool], rows: usize) -> Vec<bool> {
    row_mask.repeat(rows)
}

/// Word-highlighting nodes.
#[derive(Clone, Debug)]
pub struct HighlightNodes {
    pub f_eq: Var,
    pub scores: Var,
    pub highlight: WordHighlight,
}

pub fn word_highlight_on_tape(
    tape: &mut Tape,
    params: &FemVars,
    f_q: Var,
    query_valid: &[bool],
) -> Result<HighlightNodes> {
    if query_valid.len() != tape.shape(f_q)[0] {
        return Err(Error::shape("word_highlight", "query mask length"));
    }
    if !query_valid.iter().any(|&v| v) {
        return Err(Error::Contract("word_highlight: no valid query word".into()));
    }
    let f_eq = attention(
        tape,
        (&params.attn_q, &params.attn_k, &params.attn_v),
        f_q,
        f_q,
        f_q,
        Some(query_valid),
    )?;
    let g_eq = masked_row_mean(tape, f_eq, query_valid)?;
    let scores = tape.cosine_sim(f_eq, g_eq)?;
    let highlight = WordHighlight::rank(tape.value(scores).data(), query_valid);
    Ok(HighlightNodes {
        f_eq,
        scores,
        highlight,
    })
}

/// Sentence feature as the softmax(scores)-weighted sum of valid words.
pub fn sentence_pool_on_tape(tape: &mut Tape, f_eq: Var, scores: Var, query_valid: &[bool]) -> Result<Var> {
    let w = tape.masked_softmax(scores, 0, Some(query_valid))?;
    let lq = tape.shape(w)[0];
    let w = tape.reshape(w, &[1, lq])?;
    let s = tape.matmul(w, f_eq)?;
    let d = tape.shape(s)[1];
    tape.reshape(s, &[d])
}

/// Raw scaled similarities and their row (over words) and column (over
/// clips) softmaxes, all `L_v × L_q`.
#[derive(Clone, Copy, Debug)]
pub struct SceneSims {
    pub a_vq: Var,
    pub a_cq: Var,
    pub a_vq_row: Var,
    pub a_cq_row: Var,
    pub a_vq_col: Var,
    pub a_cq_col: Var,
}

pub fn scene_similarities_on_tape(
    tape: &mut Tape,
    params: &FemVars,
    f_v: Var,
    f_c: Var,
    f_eq: Var,
    query_valid: &[bool],
) -> Result<SceneSims> {
    let lv = tape.shape(f_v)[0];
    if tape.shape(f_c)[0] != lv {
        return Err(Error::shape("scene_similarities", "visual and caption clip counts differ"));
    }
    let d = tape.shape(f_v)[1] as f64;
    let pq = params.proj_q.apply(tape, f_eq)?;
    let pqt = tape.transpose(pq)?;
    let scaled = |tape: &mut Tape, proj: &BoundLinear, x: Var| -> Result<Var> {
        let px = proj.apply(tape, x)?;
        let a = tape.matmul(px, pqt)?;
        Ok(tape.scale(a, 1.0 / d.sqrt()))
    };
    let a_vq = scaled(tape, &params.proj_v, f_v)?;
    let a_cq = scaled(tape, &params.proj_c, f_c)?;
    let word_mask = tile_rows(query_valid, lv);
    Ok(SceneSims {
        a_vq,
        a_cq,
        a_vq_row: tape.masked_softmax(a_vq, 1, Some(&word_mask))?,
        a_cq_row: tape.masked_softmax(a_cq, 1, Some(&word_mask))?,
        a_vq_col: tape.softmax(a_vq, 0)?,
        a_cq_col: tape.softmax(a_cq, 0)?,
    })
}

/// Query-aware clip and caption features `(F_qv, F_qc)`.
pub fn scene_compose_on_tape(
    tape: &mut Tape,
    params: &FemVars,
    f_v: Var,
    f_c: Var,
    f_eq: Var,
    f_eq_sent: Var,
    sims: &SceneSims,
) -> Result<(Var, Var)> {
    let lv = tape.shape(f_v)[0];
    let sent = tape.broadcast_rows(f_eq_sent, lv)?;
    let stream = |tape: &mut Tape, x: Var, row: Var, col: Var, proj_hat: &BoundLinear, conv: &BoundLinear| -> Result<Var> {
        let x2q = tape.matmul(row, f_eq)?;
        let colt = tape.transpose(col)?;
        let clip_affinity = tape.matmul(row, colt)?;
        let q2x = tape.matmul(clip_affinity, x)?;
        let x_x2q = tape.mul(x, x2q)?;
        let x_q2x = tape.mul(x, q2x)?;
        let cat = tape.concat_last(&[x, x2q, x_x2q, x_q2x])?;
        let hat = proj_hat.apply(tape, cat)?;
        let fused = tape.concat_last(&[hat, sent])?;
        let conv_out = tape.conv1d_pointwise(fused, conv.weight, conv.bias)?;
        Ok(tape.relu(conv_out))
    };
    let f_qv = stream(tape, f_v, sims.a_vq_row, sims.a_vq_col, &params.proj_hat_v, &params.conv_v)?;
    let f_qc = stream(tape, f_c, sims.a_cq_row, sims.a_cq_col, &params.proj_hat_c, &params.conv_c)?;
    Ok((f_qv, f_qc))
}

/// Enhanced `(F_ev, F_ec)` by cross-attention between the two streams.
pub fn cross_enhance_on_tape(tape: &mut Tape, params: &FemVars, f_qv: Var, f_qc: Var) -> Result<(Var, Var)> {
    if tape.shape(f_qv) != tape.shape(f_qc) {
        return Err(Error::shape("cross_enhance", "stream shapes differ"));
    }
    let w = (&params.cross_q, &params.cross_k, &params.cross_v);
    let f_ev = attention(tape, w, f_qv, f_qc, f_qc, None)?;
    let f_ec = attention(tape, w, f_qc, f_qv, f_qv, None)?;
    Ok((f_ev, f_ec))
}

/// Every node produced by one enhancement pass.
#[derive(Clone, Debug)]
pub struct FemNodes {
    pub f_eq: Var,
    pub scores: Var,
    pub highlight: WordHighlight,
    pub f_eq_sent: Var,
    pub sims: SceneSims,
    pub f_qv: Var,
    pub f_qc: Var,
    pub f_ev: Var,
    pub f_ec: Var,
}

pub fn fem_forward_on_tape(
    tape: &mut Tape,
    params: &FemVars,
    f_q: Var,
    query_valid: &[bool],
    f_v: Var,
    f_c: Var,
) -> Result<FemNodes> {
    let HighlightNodes {
        f_eq,
        scores,
        highlight,
    } = word_highlight_on_tape(tape, params, f_q, query_valid)?;
    let f_eq_sent = sentence_pool_on_tape(tape, f_eq, scores, query_valid)?;
    let sims = scene_similarities_on_tape(tape, params, f_v, f_c, f_eq, query_valid)?;
    let (f_qv, f_qc) = scene_compose_on_tape(tape, params, f_v, f_c, f_eq, f_eq_sent, &sims)?;
    let (f_ev, f_ec) = cross_enhance_on_tape(tape, params, f_qv, f_qc)?;
    Ok(FemNodes {
        f_eq,
        scores,
        highlight,
        f_eq_sent,
        sims,
        f_qv,
        f_qc,
        f_ev,
        f_ec,
    })
}

/// Materialized enhancement results.
#[derive(Clone, Debug, PartialEq)]
pub struct FemOutput {
    pub f_eq: Tensor,
    pub highlight: WordHighlight,
    pub f_eq_sent: Tensor,
    pub f_ev: Tensor,
    pub f_ec: Tensor,
    pub a_vq_row: Tensor,
    pub a_cq_row: Tensor,
    pub a_vq_col: Tensor,
    pub a_cq_col: Tensor,
}

impl FemOutput {
    pub fn from_tape(tape: &Tape, nodes: &FemNodes) -> Self {
        let v = |x: Var| tape.value(x).clone();
        Self {
            f_eq: v(nodes.f_eq),
            highlight: nodes.highlight.clone(),
            f_eq_sent: v(nodes.f_eq_sent),
            f_ev: v(nodes.f_ev),
            f_ec: v(nodes.f_ec),
            a_vq_row: v(nodes.sims.a_vq_row),
            a_cq_row: v(nodes.sims.a_cq_row),
            a_vq_col: v(nodes.sims.a_vq_col),
            a_cq_col: v(nodes.sims.a_cq_col),
        }
    }
}

/// Tensor-in, tensor-out wrappers over the tape functions above.
pub mod eval {
    use super::*;

    pub fn word_highlight(f_q: &Tensor, query_valid: &[bool], params: &FemParams) -> Result<(Tensor, WordHighlight)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let q = tape.constant(f_q.clone());
        let h = word_highlight_on_tape(&mut tape, &p, q, query_valid)?;
        Ok((tape.value(h.f_eq).clone(), h.highlight))
    }

    pub fn sentence_pool(f_eq: &Tensor, highlight: &WordHighlight) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(f_eq.clone());
        let s = tape.constant(Tensor::vector(highlight.scores.clone())?);
        let out = sentence_pool_on_tape(&mut tape, f, s, &highlight.valid)?;
        Ok(tape.value(out).clone())
    }

    /// `[A_vq, A_cq, A^r_vq, A^r_cq, A^c_vq, A^c_cq]`.
    pub fn scene_similarities(
        f_v: &Tensor,
        f_c: &Tensor,
        f_eq: &Tensor,
        query_valid: &[bool],
        params: &FemParams,
    ) -> Result<[Tensor; 6]> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let (v, c, q) = (tape.constant(f_v.clone()), tape.constant(f_c.clone()), tape.constant(f_eq.clone()));
        let s = scene_similarities_on_tape(&mut tape, &p, v, c, q, query_valid)?;
        Ok([s.a_vq, s.a_cq, s.a_vq_row, s.a_cq_row, s.a_vq_col, s.a_cq_col].map(|x| tape.value(x).clone()))
    }

    pub fn scene_compose(
        f_v: &Tensor,
        f_c: &Tensor,
        f_eq: &Tensor,
        f_eq_sent: &Tensor,
        query_valid: &[bool],
        params: &FemParams,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let (v, c, q) = (tape.constant(f_v.clone()), tape.constant(f_c.clone()), tape.constant(f_eq.clone()));
        let sent = tape.constant(f_eq_sent.clone());
        let sims = scene_similarities_on_tape(&mut tape, &p, v, c, q, query_valid)?;
        let (a, b) = scene_compose_on_tape(&mut tape, &p, v, c, q, sent, &sims)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }

    pub fn cross_enhance(f_qv: &Tensor, f_qc: &Tensor, params: &FemParams) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let (a, b) = (tape.constant(f_qv.clone()), tape.constant(f_qc.clone()));
        let (ev, ec) = cross_enhance_on_tape(&mut tape, &p, a, b)?;
        Ok((tape.value(ev).clone(), tape.value(ec).clone()))
    }

    /// Full enhancement of one sample given its pooled caption features.
    pub fn fem_forward(
        f_q: &Tensor,
        query_valid: &[bool],
        f_v: &Tensor,
        f_c: &Tensor,
        params: &FemParams,
    ) -> Result<FemOutput> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let (q, v, c) = (tape.constant(f_q.clone()), tape.constant(f_v.clone()), tape.constant(f_c.clone()));
        let nodes = fem_forward_on_tape(&mut tape, &p, q, query_valid, v, c)?;
        Ok(FemOutput::from_tape(&tape, &nodes))
    }
}
