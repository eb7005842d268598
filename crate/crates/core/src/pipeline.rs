//! End-to-end commands: forward runs, toy training and iteration sweeps,
//! with their JSON reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::{load_fixture, Batch};
use crate::loss::{LossReport, LossWeights};
use crate::model::{batch_forward_on_tape, evaluate, BatchNodes, ModelParams, SampleInputs};
use crate::params::{InitMode, Initializer, Parameters};
use crate::rfm::{FusionMode, DEFAULT_ITERATIONS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub fixture_path: Option<PathBuf>,
    pub seed: u64,
    pub iterations: usize,
    pub fusion: FusionMode,
    pub weights: LossWeights,
    pub init: InitMode,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub output_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fixture_path: None,
            seed: 0,
            iterations: DEFAULT_ITERATIONS,
            fusion: FusionMode::Learned,
            weights: LossWeights::default(),
            init: InitMode::Identity,
            train_steps: 500,
            learning_rate: 0.05,
            output_path: None,
        }
    }
}

impl RunConfig {
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            fixture: self
                .fixture_path
                .as_ref()
                .map(|p| p.display().to_string()),
            seed: self.seed,
            iterations: self.iterations,
            fusion: self.fusion,
            init: self.init,
            weights: self.weights,
            train_steps: self.train_steps,
            learning_rate: self.learning_rate,
        }
    }

    fn fixture(&self) -> Result<Batch> {
        let path = self
            .fixture_path
            .as_ref()
            .ok_or_else(|| Error::Contract("no fixture path configured".into()))?;
        load_fixture(path)
    }

    pub fn init_params(&self, dim: usize) -> ModelParams {
        ModelParams::new(dim, self.fusion, &mut Initializer::new(self.init, self.seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub fixture: Option<String>,
    pub seed: u64,
    pub iterations: usize,
    pub fusion: FusionMode,
    pub init: InitMode,
    pub weights: LossWeights,
    pub train_steps: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordScore {
    pub index: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleReport {
    pub id: String,
    pub top_words: Vec<WordScore>,
    pub saliency: Vec<f64>,
    pub trace_norms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSummary {
    pub l_qv: f64,
    pub l_qc: f64,
    pub l_cc: f64,
    pub l_ma: f64,
}

impl LossSummary {
    fn rounded(r: &LossReport) -> Self {
        Self {
            l_qv: round_report(r.l_qv),
            l_qc: round_report(r.l_qc),
            l_cc: round_report(r.l_cc),
            l_ma: round_report(r.l_ma),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub config_echo: ConfigEcho,
    pub samples: Vec<SampleReport>,
    pub losses: LossSummary,
    pub warnings: Vec<String>,
}

/// Rounds to ten significant digits. Reports carry rounded values so that
/// independent evaluation orders print identically.
pub fn round_report(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.9e}").parse().unwrap_or(x)
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn parse_report(text: &str) -> Result<RunReport> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_pretty_json(value)?)?;
    Ok(())
}

/// Cosine of each filtered clip to the sentence feature.
pub fn saliency_head(f_fv: &Tensor, f_eq_sent: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(f_fv.clone());
    let y = tape.constant(f_eq_sent.clone());
    let s = tape.cosine_sim(x, y)?;
    Ok(tape.value(s).data().to_vec())
}

fn clamp_warnings(batch: &Batch, iterations: usize) -> Vec<String> {
    batch
        .samples
        .iter()
        .filter(|s| s.valid_words() < iterations)
        .map(|s| {
            format!(
                "sample `{}`: {} filtering iterations requested but only {} valid words; clamped to {}",
                s.id,
                iterations,
                s.valid_words(),
                s.valid_words()
            )
        })
        .collect()
}

fn check_finite(report: &LossReport) -> Result<()> {
    if [report.l_qv, report.l_qc, report.l_cc, report.l_ma]
        .iter()
        .all(|x| x.is_finite())
    {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite loss (l_qv={}, l_qc={}, l_cc={}, l_ma={})",
            report.l_qv, report.l_qc, report.l_cc, report.l_ma
        )))
    }
}

fn build_report(tape: &Tape, nodes: &BatchNodes, batch: &Batch, config: &RunConfig) -> Result<RunReport> {
    let losses = nodes.loss_report(tape);
    check_finite(&losses)?;
    let mut samples = Vec::with_capacity(batch.len());
    for (s, n) in batch.samples.iter().zip(&nodes.samples) {
        let scores = &n.fem.highlight.scores;
        let f_fv = tape.value(n.rfm.f_fv);
        let sent = tape.value(n.fem.f_eq_sent);
        samples.push(SampleReport {
            id: s.id.clone(),
            top_words: n
                .rfm
                .selected_words
                .iter()
                .map(|&k| WordScore {
                    index: k,
                    score: round_report(scores[k]),
                })
                .collect(),
            saliency: saliency_head(f_fv, sent)?
                .into_iter()
                .map(round_report)
                .collect(),
            trace_norms: n
                .rfm
                .trace
                .iter()
                .map(|&x| round_report(tape.value(x).l1_norm()))
                .collect(),
        });
    }
    Ok(RunReport {
        config_echo: config.echo(),
        samples,
        losses: LossSummary::rounded(&losses),
        warnings: clamp_warnings(batch, config.iterations),
    })
}

/// Forward pass over `batch` with fixed parameters.
pub fn run_batch(batch: &Batch, params: &ModelParams, config: &RunConfig) -> Result<RunReport> {
    config.weights.validate()?;
    let (tape, nodes) = evaluate(params, batch, config.iterations, &config.weights)?;
    build_report(&tape, &nodes, batch, config)
}

/// Loads the configured fixture, initializes parameters and runs the
/// forward pipeline. Writes the report when an output path is set.
pub fn cmd_run(config: &RunConfig) -> Result<RunReport> {
    let batch = config.fixture()?;
    let params = config.init_params(batch.dim);
    let report = run_batch(&batch, &params, config)?;
    if let Some(out) = &config.output_path {
        write_json(&report, out)?;
    }
    Ok(report)
}

/// For each query, whether its own video has the highest pooled similarity
/// among all videos of the batch.
pub fn matched_pair_top1(tape: &Tape, nodes: &BatchNodes) -> Vec<bool> {
    let gv: Vec<&Tensor> = nodes.samples.iter().map(|n| tape.value(n.g_v)).collect();
    let gq: Vec<&Tensor> = nodes.samples.iter().map(|n| tape.value(n.g_q)).collect();
    let cos = |a: &Tensor, b: &Tensor| {
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::tape::NORM_EPS);
        let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::tape::NORM_EPS);
        dot / (na * nb)
    };
    (0..gq.len())
        .map(|j| {
            let own = cos(gv[j], gq[j]);
            (0..gv.len()).all(|i| i == j || cos(gv[i], gq[j]) < own)
        })
        .collect()
}

/// Result of gradient-descent training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub config_echo: ConfigEcho,
    /// Total alignment loss before each step, then after the last one.
    pub loss_history: Vec<f64>,
    pub initial_losses: LossSummary,
    pub final_losses: LossSummary,
    pub matched_top1: Vec<bool>,
    pub final_report: RunReport,
}

/// One full-batch gradient step. Returns the loss before the update.
pub fn train_step(params: &mut ModelParams, batch: &Batch, config: &RunConfig) -> Result<LossReport> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let inputs: Vec<SampleInputs> = batch
        .samples
        .iter()
        .map(|s| SampleInputs::bind(&mut tape, s, false))
        .collect();
    let nodes = batch_forward_on_tape(&mut tape, &vars, batch, &inputs, config.iterations, &config.weights)?;
    let losses = nodes.loss_report(&tape);
    check_finite(&losses)?;
    tape.backward(nodes.losses.l_ma)?;
    let grads: Vec<Option<Tensor>> = vars
        .leaves()
        .into_iter()
        .map(|v: Var| tape.grad(v).cloned())
        .collect();
    let lr = config.learning_rate;
    let mut k = 0;
    params.visit_mut(&mut |_, t| {
        if let Some(g) = &grads[k] {
            for (p, gi) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gi;
            }
        }
        k += 1;
    });
    debug_assert_eq!(k, grads.len());
    Ok(losses)
}

/// Plain full-batch gradient descent on the alignment loss.
pub fn train(batch: &Batch, params: &mut ModelParams, config: &RunConfig) -> Result<TrainReport> {
    if config.train_steps == 0 {
        return Err(Error::Contract("training needs at least one step".into()));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Contract(format!(
            "learning rate must be finite and non-negative, got {}",
            config.learning_rate
        )));
    }
    config.weights.validate()?;
    let mut history = Vec::with_capacity(config.train_steps + 1);
    let mut initial = None;
    for _ in 0..config.train_steps {
        let l = train_step(params, batch, config)?;
        history.push(l.l_ma);
        initial.get_or_insert(l);
    }
    let (tape, nodes) = evaluate(params, batch, config.iterations, &config.weights)?;
    let final_report = build_report(&tape, &nodes, batch, config)?;
    let last = nodes.loss_report(&tape);
    history.push(last.l_ma);
    Ok(TrainReport {
        config_echo: config.echo(),
        loss_history: history,
        initial_losses: LossSummary::rounded(&initial.expect("at least one step")),
        final_losses: LossSummary::rounded(&last),
        matched_top1: matched_pair_top1(&tape, &nodes),
        final_report,
    })
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainReport> {
    let batch = config.fixture()?;
    let mut params = config.init_params(batch.dim);
    let report = train(&batch, &mut params, config)?;
    if let Some(out) = &config.output_path {
        write_json(&report, out)?;
    }
    Ok(report)
}

/// Filtering iteration counts swept by default.
pub const SWEEP_GRID: [usize; 5] = [0, 1, 3, 5, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub iterations: usize,
    /// Sum over samples of the final filtered-feature L1 norm.
    pub filtered_l1: f64,
    pub mean_saliency: f64,
    pub losses: LossSummary,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub config_echo: ConfigEcho,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = String::from("iters  filtered_l1      mean_saliency  l_qv         l_qc         l_cc         l_ma\n");
        for r in &self.rows {
            let line = format!(
                "{:<6} {:<16.9} {:<14.9} {:<12.9} {:<12.9} {:<12.9} {:.9}",
                r.iterations, r.filtered_l1, r.mean_saliency, r.losses.l_qv, r.losses.l_qc, r.losses.l_cc, r.losses.l_ma
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out
    }
}

/// One forward run per iteration count on the same batch and parameters.
pub fn sweep_iters(batch: &Batch, params: &ModelParams, config: &RunConfig, grid: &[usize]) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(grid.len());
    for &n in grid {
        let cfg = RunConfig {
            iterations: n,
            ..config.clone()
        };
        let report = run_batch(batch, params, &cfg)?;
        let filtered_l1 = round_report(
            report
                .samples
                .iter()
                .map(|s| *s.trace_norms.last().unwrap())
                .sum(),
        );
        let (sum, count) = report
            .samples
            .iter()
            .flat_map(|s| &s.saliency)
            .fold((0.0, 0usize), |(a, c), &x| (a + x, c + 1));
        rows.push(SweepRow {
            iterations: n,
            filtered_l1,
            mean_saliency: round_report(sum / count as f64),
            losses: report.losses,
            report,
        });
    }
    Ok(SweepReport {
        config_echo: config.echo(),
        rows,
    })
}

pub fn cmd_sweep_iters(config: &RunConfig, grid: &[usize]) -> Result<SweepReport> {
    let batch = config.fixture()?;
    let params = config.init_params(batch.dim);
    let report = sweep_iters(&batch, &params, config, grid)?;
    if let Some(out) = &config.output_path {
        write_json(&report, out)?;
    }
    Ok(report)
}
