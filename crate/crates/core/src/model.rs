//! The full learnable model and its batch forward pass.

use crate::error::{Error, Result};
use crate::fem::{fem_forward_on_tape, FemNodes, FemParams, FemVars};
use crate::fixtures::{masked_row_mean, pool_captions_on_tape, Batch, Sample};
use crate::loss::{
    loss_caption_clip_on_tape, loss_query_clip_on_tape, loss_query_video_on_tape, loss_total_on_tape, LossReport,
    LossWeights,
};
use crate::params::{BoundLinear, Initializer, Linear, Parameters};
use crate::rfm::{rfm_forward_on_tape, FusionGate, FusionMode, GateVars, RfmNodes};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-modality `d × d` affine maps applied to fixture features before
/// anything else. Identity-initialized, they pass fixtures through
/// unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct InputProjection {
    pub query: Linear,
    pub visual: Linear,
    pub caption: Linear,
}

impl InputProjection {
    pub fn new(d: usize, init: &mut Initializer) -> Self {
        Self {
            query: Linear::new(init, d, d, true),
            visual: Linear::new(init, d, d, true),
            caption: Linear::new(init, d, d, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub input: InputProjection,
    pub fem: FemParams,
    pub gate: FusionGate,
}

impl ModelParams {
    pub fn new(d: usize, fusion: FusionMode, init: &mut Initializer) -> Self {
        Self {
            input: InputProjection::new(d, init),
            fem: FemParams::new(d, init),
            gate: FusionGate::new(fusion, init),
        }
    }

    pub fn dim(&self) -> usize {
        self.fem.dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        self.bind_with(&mut |t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Binds every tensor through `put` in [`Parameters::visit`] order.
    pub fn bind_with(&self, put: &mut dyn FnMut(&Tensor) -> Var) -> ModelVars {
        ModelVars {
            query: self.input.query.bind_with(put),
            visual: self.input.visual.bind_with(put),
            caption: self.input.caption.bind_with(put),
            fem: self.fem.bind_with(put),
            gate: self.gate.bind_with(put),
        }
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input.query.visit_named("input.query", f);
        self.input.visual.visit_named("input.visual", f);
        self.input.caption.visit_named("input.caption", f);
        self.fem.visit(f);
        self.gate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input.query.visit_named_mut("input.query", f);
        self.input.visual.visit_named_mut("input.visual", f);
        self.input.caption.visit_named_mut("input.caption", f);
        self.fem.visit_mut(f);
        self.gate.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub query: BoundLinear,
    pub visual: BoundLinear,
    pub caption: BoundLinear,
    pub fem: FemVars,
    pub gate: GateVars,
}

impl ModelVars {
    /// Parameter leaves in the same order as [`Parameters::visit`].
    pub fn leaves(&self) -> Vec<Var> {
        let f = &self.fem;
        [
            self.query,
            self.visual,
            self.caption,
            f.attn_q,
            f.attn_k,
            f.attn_v,
            f.proj_v,
            f.proj_c,
            f.proj_q,
            f.proj_hat_v,
            f.proj_hat_c,
            f.conv_v,
            f.conv_c,
            f.cross_q,
            f.cross_k,
            f.cross_v,
            self.gate.gate,
        ]
        .iter()
        .flat_map(BoundLinear::leaves)
        .collect()
    }
}

/// Raw fixture features of one sample placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleInputs {
    pub query: Var,
    pub visual: Var,
    pub captions: Var,
}

impl SampleInputs {
    pub fn bind(tape: &mut Tape, sample: &Sample, trainable: bool) -> Self {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        Self {
            query: put(&sample.query),
            visual: put(&sample.visual),
            captions: put(&sample.captions),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleNodes {
    /// Projected query, visual and pooled caption features.
    pub f_q: Var,
    pub f_v: Var,
    pub f_c: Var,
    pub fem: FemNodes,
    pub rfm: RfmNodes,
    /// `(G_v, G_q)` entering the query-video loss.
    pub g_v: Var,
    pub g_q: Var,
    /// Requested filtering iterations, before clamping to the valid word count.
    pub requested_iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_qv: Var,
    pub l_qc: Var,
    pub l_cc: Var,
    pub l_ma: Var,
}

#[derive(Clone, Debug)]
pub struct BatchNodes {
    pub samples: Vec<SampleNodes>,
    pub l_qc_per_sample: Vec<Var>,
    pub losses: LossNodes,
}

impl BatchNodes {
    pub fn loss_report(&self, tape: &Tape) -> LossReport {
        let s = |v: Var| tape.value(v).data()[0];
        LossReport {
            l_qv: s(self.losses.l_qv),
            l_qc: s(self.losses.l_qc),
            l_cc: s(self.losses.l_cc),
            l_ma: s(self.losses.l_ma),
            l_qc_per_sample: self.l_qc_per_sample.iter().map(|&v| s(v)).collect(),
        }
    }
}

fn project_rows(tape: &mut Tape, proj: &BoundLinear, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(x, &[rows, d])?;
    let y = proj.apply(tape, flat)?;
    tape.reshape(y, &shape)
}

/// Runs one sample through projection, caption pooling, enhancement and
/// filtering. `iterations` is clamped to the sample's valid word count.
pub fn sample_forward_on_tape(
    tape: &mut Tape,
    params: &ModelVars,
    sample: &Sample,
    inputs: &SampleInputs,
    iterations: usize,
) -> Result<SampleNodes> {
    let f_q = project_rows(tape, &params.query, inputs.query)?;
    let f_v = project_rows(tape, &params.visual, inputs.visual)?;
    let f_oc = project_rows(tape, &params.caption, inputs.captions)?;
    let (f_c, _) = pool_captions_on_tape(tape, f_q, &sample.query_valid, f_oc, &sample.caption_valid)?;
    let fem = fem_forward_on_tape(tape, &params.fem, f_q, &sample.query_valid, f_v, f_c)?;
    let n = iterations.min(sample.valid_words());
    let rfm = rfm_forward_on_tape(tape, fem.f_ev, fem.f_ec, fem.f_eq, &fem.highlight, &params.gate, n)?;
    let g_v = tape.gap(f_v)?;
    let g_q = masked_row_mean(tape, f_q, &sample.query_valid)?;
    Ok(SampleNodes {
        f_q,
        f_v,
        f_c,
        fem,
        rfm,
        g_v,
        g_q,
        requested_iterations: iterations,
    })
}

/// Forward pass over a batch, ending in the weighted alignment loss.
pub fn batch_forward_on_tape(
    tape: &mut Tape,
    params: &ModelVars,
    batch: &Batch,
    inputs: &[SampleInputs],
    iterations: usize,
    weights: &LossWeights,
) -> Result<BatchNodes> {
    if inputs.len() != batch.len() {
        return Err(Error::Contract("one input binding per sample is required".into()));
    }
    let samples = batch
        .samples
        .iter()
        .zip(inputs)
        .map(|(s, i)| sample_forward_on_tape(tape, params, s, i, iterations))
        .collect::<Result<Vec<_>>>()?;

    let qv_pairs: Vec<(Var, Var)> = samples.iter().map(|n| (n.g_v, n.g_q)).collect();
    let l_qv = loss_query_video_on_tape(tape, &qv_pairs)?;

    let mut l_qc_per_sample = Vec::with_capacity(samples.len());
    for (nodes, s) in samples.iter().zip(&batch.samples) {
        l_qc_per_sample.push(loss_query_clip_on_tape(tape, nodes.rfm.s_qv, &s.query_valid, &s.relevance_mask)?);
    }
    let stacked = tape.concat(&l_qc_per_sample, 0)?;
    let l_qc = tape.mean_axis(stacked, 0)?;

    let cc_pairs: Vec<(Var, Var)> = samples.iter().map(|n| (n.f_v, n.f_c)).collect();
    let l_cc = loss_caption_clip_on_tape(tape, &cc_pairs)?;
    let l_ma = loss_total_on_tape(tape, l_qv, l_qc, l_cc, weights)?;
    Ok(BatchNodes {
        samples,
        l_qc_per_sample,
        losses: LossNodes { l_qv, l_qc, l_cc, l_ma },
    })
}

/// Convenience: forward a batch with constant inputs and parameters.
pub fn evaluate(params: &ModelParams, batch: &Batch, iterations: usize, weights: &LossWeights) -> Result<(Tape, BatchNodes)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let inputs: Vec<SampleInputs> = batch.samples.iter().map(|s| SampleInputs::bind(&mut tape, s, false)).collect();
    let nodes = batch_forward_on_tape(&mut tape, &vars, batch, &inputs, iterations, weights)?;
    Ok((tape, nodes))
}
