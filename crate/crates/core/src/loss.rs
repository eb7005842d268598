//! Modal alignment losses.
//!
//! * query-video: in-batch contrastive loss between pooled clip and pooled
//!   word features, one term per query;
//! * query-clip: binary cross-entropy of the sigmoid-averaged clip/word
//!   relevance against the ground-truth clip mask;
//! * caption-clip: contrastive loss of each video's captions against the
//!   same-position clips of every video in the batch.
//!
//! Similarities are cosines with no temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::valid_mean_weights;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower/upper clamp on probabilities entering a log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_qv: f64,
    pub lambda_qc: f64,
    pub lambda_cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_qv: 0.3,
            lambda_qc: 0.5,
            lambda_cc: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_qv", self.lambda_qv), ("lambda_qc", self.lambda_qc), ("lambda_cc", self.lambda_cc)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_qv == 0.0 && self.lambda_qc == 0.0 && self.lambda_cc == 0.0
    }

    pub fn total(&self, l_qv: f64, l_qc: f64, l_cc: f64) -> f64 {
        self.lambda_qv * l_qv + self.lambda_qc * l_qc + self.lambda_cc * l_cc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_qv: f64,
    pub l_qc: f64,
    pub l_cc: f64,
    pub l_ma: f64,
    pub l_qc_per_sample: Vec<f64>,
}

fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let mut mats = Vec::with_capacity(rows.len());
    for &r in rows {
        let d = tape.value(r).len();
        mats.push(tape.reshape(r, &[1, d])?);
    }
    tape.concat(&mats, 0)
}

/// Query-video contrastive loss over `(G_v, G_q)` pairs, each a length-`d`
/// vector.
pub fn loss_query_video_on_tape(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("query-video loss needs at least one pair".into()));
    }
    let b = pairs.len();
    let gv: Vec<Var> = pairs.iter().map(|p| p.0).collect();
    let gq: Vec<Var> = pairs.iter().map(|p| p.1).collect();
    let gv = stack_rows(tape, &gv)?;
    let gq = stack_rows(tape, &gq)?;
    // sim[i][j] = Sim(G_v_i, G_q_j)
    let sim = tape.cosine_matrix(gv, gq)?;
    let e = tape.exp(sim);
    let col = tape.sum_axis(e, 0)?;
    let log_norm = tape.log(col);
    let eye = tape.constant(Tensor::eye(b, b));
    let diag = tape.mul(sim, eye)?;
    let matched = tape.sum_axis(diag, 0)?;
    let per_query = tape.sub(log_norm, matched)?;
    let total = tape.sum_all(per_query);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Query-clip BCE for one sample. `s_qv` is `L_v × L_q`.
pub fn loss_query_clip_on_tape(tape: &mut Tape, s_qv: Var, query_valid: &[bool], relevance: &[bool]) -> Result<Var> {
    let (lv, lq) = (tape.shape(s_qv)[0], tape.shape(s_qv)[1]);
    if query_valid.len() != lq || relevance.len() != lv {
        return Err(Error::shape("loss_query_clip", "mask lengths do not match the similarity matrix"));
    }
    let sig = tape.sigmoid(s_qv);
    let w = tape.constant(Tensor::matrix(lq, 1, valid_mean_weights(query_valid))?);
    let g = tape.matmul(sig, w)?;
    let g = tape.reshape(g, &[lv])?;
    let g = tape.clamp(g, PROB_EPS, 1.0 - PROB_EPS);
    let neg = tape.scale(g, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_p = tape.log(g);
    let log_q = tape.log(one_minus);
    let m: Vec<f64> = relevance.iter().map(|&b| f64::from(u8::from(b))).collect();
    let not_m: Vec<f64> = m.iter().map(|x| 1.0 - x).collect();
    let m = tape.constant(Tensor::vector(m)?);
    let not_m = tape.constant(Tensor::vector(not_m)?);
    let pos = tape.mul(m, log_p)?;
    let negs = tape.mul(not_m, log_q)?;
    let both = tape.add(pos, negs)?;
    let s = tape.sum_all(both);
    Ok(tape.scale(s, -1.0))
}

/// Caption-clip contrastive loss over `(F_v, F_c)` pairs of `L_v × d`
/// matrices. Clip `j` of video `k` is contrasted against clip `j` of every
/// video that has one.
pub fn loss_caption_clip_on_tape(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("caption-clip loss needs at least one video".into()));
    }
    let b = pairs.len();
    let mut terms = Vec::with_capacity(b);
    for k in 0..b {
        let fc = pairs[k].1;
        let lk = tape.shape(fc)[0];
        let mut denom_parts = Vec::with_capacity(b);
        let mut numerator = None;
        for (i, &(fv, _)) in pairs.iter().enumerate() {
            let li = tape.shape(fv)[0];
            let sims = tape.cosine_matrix(fv, fc)?;
            let e = tape.exp(sims);
            let mut diag = Tensor::zeros(&[li, lk]);
            for j in 0..li.min(lk) {
                diag.data_mut()[j * lk + j] = 1.0;
            }
            let diag = tape.constant(diag);
            let picked = tape.mul(e, diag)?;
            let s = tape.sum_all(picked);
            if i == k {
                numerator = Some(s);
            }
            denom_parts.push(s);
        }
        let denom = tape.concat(&denom_parts, 0)?;
        let denom = tape.sum_all(denom);
        let log_denom = tape.log(denom);
        let log_num = tape.log(numerator.expect("k indexes pairs"));
        terms.push(tape.sub(log_denom, log_num)?);
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum_all(all);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `λ_qv·l_qv + λ_qc·l_qc + λ_cc·l_cc` on the tape.
pub fn loss_total_on_tape(tape: &mut Tape, l_qv: Var, l_qc: Var, l_cc: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l_qv, w.lambda_qv);
    let b = tape.scale(l_qc, w.lambda_qc);
    let c = tape.scale(l_cc, w.lambda_cc);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Tensor-in, value-out wrappers.
pub mod eval {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    pub fn loss_query_video(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<(Var, Var)> = pairs
            .iter()
            .map(|(v, q)| (tape.constant(v.clone()), tape.constant(q.clone())))
            .collect();
        let l = loss_query_video_on_tape(&mut tape, &vars)?;
        Ok(scalar(&tape, l))
    }

    pub fn loss_query_clip(s_qv: &Tensor, query_valid: &[bool], relevance: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(s_qv.clone());
        let l = loss_query_clip_on_tape(&mut tape, s, query_valid, relevance)?;
        Ok(scalar(&tape, l))
    }

    pub fn loss_caption_clip(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<(Var, Var)> = pairs
            .iter()
            .map(|(v, c)| (tape.constant(v.clone()), tape.constant(c.clone())))
            .collect();
        let l = loss_caption_clip_on_tape(&mut tape, &vars)?;
        Ok(scalar(&tape, l))
    }

    pub fn loss_total(l_qv: f64, l_qc: f64, l_cc: f64, w: &LossWeights) -> f64 {
        w.total(l_qv, l_qc, l_cc)
    }
}
