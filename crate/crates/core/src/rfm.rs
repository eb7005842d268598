//! Ranking-based filtering: fuse clip/caption relevance to each word, then
//! amplify clips along the columns of the top-ranked words.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FemOutput, WordHighlight};
use crate::params::{BoundLinear, InitMode, Initializer, Linear, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Filtering iterations used when none are configured.
pub const DEFAULT_ITERATIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Per-entry gate `sigmoid(a * s_qv + b * s_qc + c)`.
    Learned,
    /// Fixed gate of one half.
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "learned" => Ok(Self::Learned),
            "average" => Ok(Self::Average),
            other => Err(format!("unknown fusion mode `{other}`")),
        }
    }
}

/// Balances clip and caption similarities entry by entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGate {
    pub mode: FusionMode,
    /// `2 → 1` affine map over `(s_qv, s_qc)`.
    pub gate: Linear,
}

impl FusionGate {
    /// Identity initialization zeroes the gate, which starts it at one half.
    pub fn new(mode: FusionMode, init: &mut Initializer) -> Self {
        let gate = match init.mode() {
            InitMode::Identity => Linear::zeros(2, 1, true),
            InitMode::Random => Linear::new(init, 2, 1, true),
        };
        Self { mode, gate }
    }

    pub fn average() -> Self {
        Self {
            mode: FusionMode::Average,
            gate: Linear::zeros(2, 1, true),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GateVars {
        GateVars {
            mode: self.mode,
            gate: self.gate.bind(tape, trainable),
        }
    }

    pub fn bind_with(&self, put: &mut dyn FnMut(&Tensor) -> Var) -> GateVars {
        GateVars {
            mode: self.mode,
            gate: self.gate.bind_with(put),
        }
    }
}

impl Parameters for FusionGate {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gate.visit_named("gate", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gate.visit_named_mut("gate", f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub mode: FusionMode,
    pub gate: BoundLinear,
}

/// Cosine relevance of enhanced clips and captions to each word,
/// `(S_qv, S_qc)`, both `L_v × L_q` with padded-word columns zeroed.
pub fn relevance_similarities_on_tape(
    tape: &mut Tape,
    f_ev: Var,
    f_ec: Var,
    f_eq: Var,
    query_valid: &[bool],
) -> Result<(Var, Var)> {
    let lv = tape.shape(f_ev)[0];
    if query_valid.len() != tape.shape(f_eq)[0] {
        return Err(Error::shape("relevance_similarities", "query mask length"));
    }
    let keep: Vec<f64> = query_valid.iter().map(|&v| f64::from(u8::from(v))).collect();
    let keep = tape.constant(Tensor::matrix(lv, keep.len(), keep.repeat(lv))?);
    let s_qv = tape.cosine_matrix(f_ev, f_eq)?;
    let s_qc = tape.cosine_matrix(f_ec, f_eq)?;
    Ok((tape.mul(s_qv, keep)?, tape.mul(s_qc, keep)?))
}

/// Per-entry gate values `W`, same shape as the inputs.
pub fn gate_weights_on_tape(tape: &mut Tape, s_qv: Var, s_qc: Var, gate: &GateVars) -> Result<Var> {
    let shape = tape.shape(s_qv).to_vec();
    let n = shape.iter().product();
    match gate.mode {
        FusionMode::Average => Ok(tape.constant(Tensor::filled(&shape, 0.5))),
        FusionMode::Learned => {
            let a = tape.reshape(s_qv, &[n, 1])?;
            let b = tape.reshape(s_qc, &[n, 1])?;
            let pairs = tape.concat(&[a, b], 1)?;
            let logits = gate.gate.apply(tape, pairs)?;
            let w = tape.sigmoid(logits);
            tape.reshape(w, &shape)
        }
    }
}

/// `S_qvc = W ⊙ S_qv + (1 - W) ⊙ S_qc`.
pub fn fuse_on_tape(tape: &mut Tape, s_qv: Var, s_qc: Var, gate: &GateVars) -> Result<Var> {
    if tape.shape(s_qv) != tape.shape(s_qc) {
        return Err(Error::shape("fuse", "similarity shapes differ"));
    }
    let w = gate_weights_on_tape(tape, s_qv, s_qc, gate)?;
    let diff = tape.sub(s_qv, s_qc)?;
    let gated = tape.mul(w, diff)?;
    tape.add(s_qc, gated)
}

/// Residual filtering `x_j = x_{j-1} ⊙ (1 + S_qvc[:, w_j])` over `words`.
/// Returns the final features and the trace `x_0 ..= x_N`.
pub fn iterative_filter_on_tape(tape: &mut Tape, f_ev: Var, s_qvc: Var, words: &[usize]) -> Result<(Var, Vec<Var>)> {
    let (lv, d) = (tape.shape(f_ev)[0], tape.shape(f_ev)[1]);
    if tape.shape(s_qvc)[0] != lv {
        return Err(Error::shape("iterative_filter", "clip counts differ"));
    }
    let mut x = f_ev;
    let mut trace = vec![x];
    for &w in words {
        let col = tape.gather_col(s_qvc, w)?;
        let gain = tape.add_scalar(col, 1.0);
        let gain = tape.broadcast_cols(gain, d)?;
        x = tape.mul(x, gain)?;
        trace.push(x);
    }
    Ok((x, trace))
}

#[derive(Clone, Debug)]
pub struct RfmNodes {
    pub s_qv: Var,
    pub s_qc: Var,
    pub s_qvc: Var,
    pub selected_words: Vec<usize>,
    pub f_fv: Var,
    pub trace: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn rfm_forward_on_tape(
    tape: &mut Tape,
    f_ev: Var,
    f_ec: Var,
    f_eq: Var,
    highlight: &WordHighlight,
    gate: &GateVars,
    iterations: usize,
) -> Result<RfmNodes> {
    let selected_words = highlight.top(iterations)?.to_vec();
    let (s_qv, s_qc) = relevance_similarities_on_tape(tape, f_ev, f_ec, f_eq, &highlight.valid)?;
    let s_qvc = fuse_on_tape(tape, s_qv, s_qc, gate)?;
    let (f_fv, trace) = iterative_filter_on_tape(tape, f_ev, s_qvc, &selected_words)?;
    Ok(RfmNodes {
        s_qv,
        s_qc,
        s_qvc,
        selected_words,
        f_fv,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfmOutput {
    pub s_qv: Tensor,
    pub s_qc: Tensor,
    pub s_qvc: Tensor,
    pub selected_words: Vec<usize>,
    pub f_fv: Tensor,
    pub trace: Vec<Tensor>,
}

impl RfmOutput {
    pub fn from_tape(tape: &Tape, nodes: &RfmNodes) -> Self {
        Self {
            s_qv: tape.value(nodes.s_qv).clone(),
            s_qc: tape.value(nodes.s_qc).clone(),
            s_qvc: tape.value(nodes.s_qvc).clone(),
            selected_words: nodes.selected_words.clone(),
            f_fv: tape.value(nodes.f_fv).clone(),
            trace: nodes.trace.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Tensor-in, tensor-out wrappers.
pub mod eval {
    use super::*;

    pub fn relevance_similarities(f_ev: &Tensor, f_ec: &Tensor, f_eq: &Tensor, query_valid: &[bool]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(f_ev.clone()), tape.constant(f_ec.clone()), tape.constant(f_eq.clone()));
        let (s_qv, s_qc) = relevance_similarities_on_tape(&mut tape, a, b, c, query_valid)?;
        Ok((tape.value(s_qv).clone(), tape.value(s_qc).clone()))
    }

    pub fn fuse(s_qv: &Tensor, s_qc: &Tensor, gate: &FusionGate) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = gate.bind(&mut tape, false);
        let (a, b) = (tape.constant(s_qv.clone()), tape.constant(s_qc.clone()));
        let out = fuse_on_tape(&mut tape, a, b, &g)?;
        Ok(tape.value(out).clone())
    }

    pub fn gate_weights(s_qv: &Tensor, s_qc: &Tensor, gate: &FusionGate) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = gate.bind(&mut tape, false);
        let (a, b) = (tape.constant(s_qv.clone()), tape.constant(s_qc.clone()));
        let out = gate_weights_on_tape(&mut tape, a, b, &g)?;
        Ok(tape.value(out).clone())
    }

    /// Filters along the first `iterations` words of `highlight`.
    pub fn iterative_filter(
        f_ev: &Tensor,
        s_qvc: &Tensor,
        highlight: &WordHighlight,
        iterations: usize,
    ) -> Result<(Tensor, Vec<Tensor>, Vec<usize>)> {
        let words = highlight.top(iterations)?.to_vec();
        let mut tape = Tape::new();
        let (x, s) = (tape.constant(f_ev.clone()), tape.constant(s_qvc.clone()));
        let (f_fv, trace) = iterative_filter_on_tape(&mut tape, x, s, &words)?;
        Ok((
            tape.value(f_fv).clone(),
            trace.iter().map(|&v| tape.value(v).clone()).collect(),
            words,
        ))
    }

    pub fn rfm_forward(fem: &FemOutput, gate: &FusionGate, iterations: usize) -> Result<RfmOutput> {
        let mut tape = Tape::new();
        let g = gate.bind(&mut tape, false);
        let ev = tape.constant(fem.f_ev.clone());
        let ec = tape.constant(fem.f_ec.clone());
        let eq = tape.constant(fem.f_eq.clone());
        let nodes = rfm_forward_on_tape(&mut tape, ev, ec, eq, &fem.highlight, &g, iterations)?;
        Ok(RfmOutput::from_tape(&tape, &nodes))
    }
}
