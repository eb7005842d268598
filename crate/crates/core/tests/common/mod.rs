#![allow(dead_code)]

use clipfilter_core::fem::{eval as fem_eval, FemOutput, FemParams, WordHighlight};
use clipfilter_core::fixtures::{pool_captions_with_weights, Batch, Sample};
use clipfilter_core::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use clipfilter_core::model::{batch_forward_on_tape, ModelParams, SampleInputs};
use clipfilter_core::loss::{eval as loss_eval, LossWeights};
use clipfilter_core::oracle::{oracle_for, Mat, OracleInputs, Value, LINEAR, REGISTERED};
use clipfilter_core::params::{InitMode, Initializer, Parameters};
use clipfilter_core::pipeline::saliency_head;
use clipfilter_core::rfm::{eval as rfm_eval, FusionGate, FusionMode};
use clipfilter_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

/// Random mask with at least one set entry.
pub fn mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let k = rng.random_range(0..n);
    m[k] = true;
    m
}

pub fn extent(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(1..=max)
}

pub fn rows(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn cube(t: &Tensor) -> Vec<Mat> {
    let (a, b, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..a)
        .map(|i| (0..b).map(|j| t.data()[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect())
        .collect()
}

pub fn fem_params(seed: u64, d: usize) -> FemParams {
    FemParams::new(d, &mut Initializer::new(InitMode::Random, seed))
}

pub fn gate(rng: &mut ChaCha8Rng) -> FusionGate {
    if rng.random_bool(0.25) {
        FusionGate::average()
    } else {
        let mut g = FusionGate::new(FusionMode::Learned, &mut Initializer::new(InitMode::Random, rng.random()));
        // Larger weights so the gate moves away from one half.
        for x in g.gate.weight.data_mut() {
            *x *= 4.0;
        }
        g
    }
}

pub fn random_sample(rng: &mut ChaCha8Rng, id: &str, lq: usize, lv: usize, lc: usize, d: usize) -> Sample {
    let mut caption_valid = Vec::with_capacity(lv * lc);
    for _ in 0..lv {
        caption_valid.extend(mask(rng, lc));
    }
    Sample {
        id: id.to_string(),
        query: uniform(rng, &[lq, d]),
        query_valid: mask(rng, lq),
        visual: uniform(rng, &[lv, d]),
        captions: uniform(rng, &[lv, lc, d]),
        caption_valid,
        relevance_mask: (0..lv).map(|_| rng.random_bool(0.5)).collect(),
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, lq: usize, lv: usize, lc: usize, d: usize) -> Batch {
    let samples = (0..b).map(|k| random_sample(rng, &format!("s{k}"), lq, lv, lc, d)).collect();
    Batch::new(samples).unwrap()
}

fn diff(r: &clipfilter_core::oracle::OracleResult, key: &str, t: &[f64]) -> f64 {
    r.max_abs_diff(key, t).unwrap()
}

fn idx(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&i| i as f64).collect()
}

fn fem_output(f_ev: &Tensor, f_ec: &Tensor, f_eq: &Tensor, highlight: WordHighlight) -> FemOutput {
    let (lv, lq) = (f_ev.rows(), f_eq.rows());
    let z = Tensor::zeros(&[lv, lq]);
    FemOutput {
        f_eq: f_eq.clone(),
        highlight,
        f_eq_sent: Tensor::zeros(&[f_eq.cols()]),
        f_ev: f_ev.clone(),
        f_ec: f_ec.clone(),
        a_vq_row: z.clone(),
        a_cq_row: z.clone(),
        a_vq_col: z.clone(),
        a_cq_col: z,
    }
}

/// Runs one random instance of `op` through the engine and the oracle and
/// returns the largest difference over all outputs.
pub fn oracle_instance(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let rng = &mut r;
    let (lq, lv, d) = (extent(rng, 8), extent(rng, 8), extent(rng, 8));
    match op {
        "matmul" => {
            let (m, k, n) = (lq, lv, d);
            let (a, b) = (uniform(rng, &[m, k]), uniform(rng, &[k, n]));
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let out = tape.matmul(va, vb).unwrap();
            let o = oracle_for(op, &OracleInputs::new().with("a", Value::Matrix(rows(&a))).with("b", Value::Matrix(rows(&b)))).unwrap();
            diff(&o, "out", tape.value(out).data())
        }
        "softmax" => {
            let x = uniform(rng, &[lq]).map(|v| 10.0 * v);
            let m = mask(rng, lq);
            let mut tape = Tape::new();
            let vx = tape.constant(x.clone());
            let out = tape.masked_softmax(vx, 0, Some(&m)).unwrap();
            let o = oracle_for(op, &OracleInputs::new().with("x", Value::Vector(x.data().to_vec())).with("mask", Value::Mask(m))).unwrap();
            diff(&o, "out", tape.value(out).data())
        }
        "cosine_sim" | "saliency_head" => {
            let (x, y) = (uniform(rng, &[lv, d]), uniform(rng, &[d]));
            let engine = if op == "cosine_sim" {
                let mut tape = Tape::new();
                let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
                let out = tape.cosine_sim(vx, vy).unwrap();
                tape.value(out).data().to_vec()
            } else {
                saliency_head(&x, &y).unwrap()
            };
            let (xk, yk) = if op == "cosine_sim" { ("x", "y") } else { ("f_fv", "f_eq_sent") };
            let o = oracle_for(op, &OracleInputs::new().with(xk, Value::Matrix(rows(&x))).with(yk, Value::Vector(y.data().to_vec()))).unwrap();
            diff(&o, "out", &engine)
        }
        "pool_captions" => {
            let lc = extent(rng, 8);
            let s = random_sample(rng, "p", lq, lv, lc, d);
            let p = pool_captions_with_weights(&s).unwrap();
            let inputs = OracleInputs::new()
                .with("query", Value::Matrix(rows(&s.query)))
                .with("query_valid", Value::Mask(s.query_valid.clone()))
                .with("captions", Value::Cube(cube(&s.captions)))
                .with("caption_valid", Value::Mask(s.caption_valid.clone()));
            let o = oracle_for(op, &inputs).unwrap();
            diff(&o, "features", p.features.data()).max(diff(&o, "weights", p.weights.data()))
        }
        "word_highlight" => {
            let params = fem_params(rng.random(), d);
            let (f_q, valid) = (uniform(rng, &[lq, d]), mask(rng, lq));
            let (f_eq, h) = fem_eval::word_highlight(&f_q, &valid, &params).unwrap();
            let inputs = OracleInputs::new()
                .with("f_q", Value::Matrix(rows(&f_q)))
                .with("query_valid", Value::Mask(valid))
                .with_fem_params(&params);
            let o = oracle_for(op, &inputs).unwrap();
            diff(&o, "f_eq", f_eq.data())
                .max(diff(&o, "scores", &h.scores))
                .max(diff(&o, "order", &idx(&h.order)))
        }
        "sentence_pool" => {
            let (f_eq, valid) = (uniform(rng, &[lq, d]), mask(rng, lq));
            let scores = uniform(rng, &[lq]).into_data();
            let h = WordHighlight::rank(&scores, &valid);
            let out = fem_eval::sentence_pool(&f_eq, &h).unwrap();
            let inputs = OracleInputs::new()
                .with("f_eq", Value::Matrix(rows(&f_eq)))
                .with("scores", Value::Vector(scores))
                .with("query_valid", Value::Mask(valid));
            diff(&oracle_for(op, &inputs).unwrap(), "f_eq_sent", out.data())
        }
        "scene_similarities" | "scene_compose" => {
            let params = fem_params(rng.random(), d);
            let (f_v, f_c, f_eq) = (uniform(rng, &[lv, d]), uniform(rng, &[lv, d]), uniform(rng, &[lq, d]));
            let valid = mask(rng, lq);
            let sent = uniform(rng, &[d]);
            let inputs = OracleInputs::new()
                .with("f_v", Value::Matrix(rows(&f_v)))
                .with("f_c", Value::Matrix(rows(&f_c)))
                .with("f_eq", Value::Matrix(rows(&f_eq)))
                .with("f_eq_sent", Value::Vector(sent.data().to_vec()))
                .with("query_valid", Value::Mask(valid.clone()))
                .with_fem_params(&params);
            let o = oracle_for(op, &inputs).unwrap();
            if op == "scene_similarities" {
                let out = fem_eval::scene_similarities(&f_v, &f_c, &f_eq, &valid, &params).unwrap();
                ["a_vq", "a_cq", "a_vq_row", "a_cq_row", "a_vq_col", "a_cq_col"]
                    .iter()
                    .zip(&out)
                    .map(|(k, t)| diff(&o, k, t.data()))
                    .fold(0.0, f64::max)
            } else {
                let (qv, qc) = fem_eval::scene_compose(&f_v, &f_c, &f_eq, &sent, &valid, &params).unwrap();
                diff(&o, "f_qv", qv.data()).max(diff(&o, "f_qc", qc.data()))
            }
        }
        "cross_enhance" => {
            let params = fem_params(rng.random(), d);
            let (qv, qc) = (uniform(rng, &[lv, d]), uniform(rng, &[lv, d]));
            let (ev, ec) = fem_eval::cross_enhance(&qv, &qc, &params).unwrap();
            let inputs = OracleInputs::new()
                .with("f_qv", Value::Matrix(rows(&qv)))
                .with("f_qc", Value::Matrix(rows(&qc)))
                .with_fem_params(&params);
            let o = oracle_for(op, &inputs).unwrap();
            diff(&o, "f_ev", ev.data()).max(diff(&o, "f_ec", ec.data()))
        }
        "fem_forward" => {
            let params = fem_params(rng.random(), d);
            let (f_q, f_v, f_c) = (uniform(rng, &[lq, d]), uniform(rng, &[lv, d]), uniform(rng, &[lv, d]));
            let valid = mask(rng, lq);
            let out = fem_eval::fem_forward(&f_q, &valid, &f_v, &f_c, &params).unwrap();
            let inputs = OracleInputs::new()
                .with("f_q", Value::Matrix(rows(&f_q)))
                .with("f_v", Value::Matrix(rows(&f_v)))
                .with("f_c", Value::Matrix(rows(&f_c)))
                .with("query_valid", Value::Mask(valid))
                .with_fem_params(&params);
            let o = oracle_for(op, &inputs).unwrap();
            [
                diff(&o, "f_eq", out.f_eq.data()),
                diff(&o, "scores", &out.highlight.scores),
                diff(&o, "order", &idx(&out.highlight.order)),
                diff(&o, "f_eq_sent", out.f_eq_sent.data()),
                diff(&o, "f_ev", out.f_ev.data()),
                diff(&o, "f_ec", out.f_ec.data()),
                diff(&o, "a_vq_row", out.a_vq_row.data()),
                diff(&o, "a_cq_row", out.a_cq_row.data()),
                diff(&o, "a_vq_col", out.a_vq_col.data()),
                diff(&o, "a_cq_col", out.a_cq_col.data()),
            ]
            .into_iter()
            .fold(0.0, f64::max)
        }
        "relevance_similarities" => {
            let (ev, ec, eq) = (uniform(rng, &[lv, d]), uniform(rng, &[lv, d]), uniform(rng, &[lq, d]));
            let valid = mask(rng, lq);
            let (s_qv, s_qc) = rfm_eval::relevance_similarities(&ev, &ec, &eq, &valid).unwrap();
            let inputs = OracleInputs::new()
                .with("f_ev", Value::Matrix(rows(&ev)))
                .with("f_ec", Value::Matrix(rows(&ec)))
                .with("f_eq", Value::Matrix(rows(&eq)))
                .with("query_valid", Value::Mask(valid));
            let o = oracle_for(op, &inputs).unwrap();
            diff(&o, "s_qv", s_qv.data()).max(diff(&o, "s_qc", s_qc.data()))
        }
        "fuse" => {
            let (s_qv, s_qc) = (uniform(rng, &[lv, lq]), uniform(rng, &[lv, lq]));
            let g = gate(rng);
            let fused = rfm_eval::fuse(&s_qv, &s_qc, &g).unwrap();
            let w = rfm_eval::gate_weights(&s_qv, &s_qc, &g).unwrap();
            let inputs = OracleInputs::new()
                .with("s_qv", Value::Matrix(rows(&s_qv)))
                .with("s_qc", Value::Matrix(rows(&s_qc)))
                .with_gate(&g);
            let o = oracle_for(op, &inputs).unwrap();
            diff(&o, "s_qvc", fused.data()).max(diff(&o, "w", w.data()))
        }
        "iterative_filter" => {
            let (f_ev, s_qvc) = (uniform(rng, &[lv, d]), uniform(rng, &[lv, lq]));
            let valid = mask(rng, lq);
            let h = WordHighlight::rank(&uniform(rng, &[lq]).into_data(), &valid);
            let n = rng.random_range(0..=h.valid_count());
            let (f_fv, trace, words) = rfm_eval::iterative_filter(&f_ev, &s_qvc, &h, n).unwrap();
            let inputs = OracleInputs::new()
                .with("f_ev", Value::Matrix(rows(&f_ev)))
                .with("s_qvc", Value::Matrix(rows(&s_qvc)))
                .with("order", Value::Indices(h.order.clone()))
                .with("n", Value::Index(n));
            let o = oracle_for(op, &inputs).unwrap();
            let flat_trace: Vec<f64> = trace.iter().flat_map(|t| t.data().to_vec()).collect();
            diff(&o, "f_fv", f_fv.data())
                .max(diff(&o, "trace", &flat_trace))
                .max(diff(&o, "selected_words", &idx(&words)))
        }
        "rfm_forward" => {
            let (ev, ec, eq) = (uniform(rng, &[lv, d]), uniform(rng, &[lv, d]), uniform(rng, &[lq, d]));
            let valid = mask(rng, lq);
            let scores = uniform(rng, &[lq]).into_data();
            let h = WordHighlight::rank(&scores, &valid);
            let n = rng.random_range(0..=h.valid_count());
            let g = gate(rng);
            let out = rfm_eval::rfm_forward(&fem_output(&ev, &ec, &eq, h), &g, n).unwrap();
            let inputs = OracleInputs::new()
                .with("f_ev", Value::Matrix(rows(&ev)))
                .with("f_ec", Value::Matrix(rows(&ec)))
                .with("f_eq", Value::Matrix(rows(&eq)))
                .with("scores", Value::Vector(scores))
                .with("query_valid", Value::Mask(valid))
                .with("n", Value::Index(n))
                .with_gate(&g);
            let o = oracle_for(op, &inputs).unwrap();
            let flat_trace: Vec<f64> = out.trace.iter().flat_map(|t| t.data().to_vec()).collect();
            [
                diff(&o, "s_qv", out.s_qv.data()),
                diff(&o, "s_qc", out.s_qc.data()),
                diff(&o, "s_qvc", out.s_qvc.data()),
                diff(&o, "selected_words", &idx(&out.selected_words)),
                diff(&o, "f_fv", out.f_fv.data()),
                diff(&o, "trace", &flat_trace),
            ]
            .into_iter()
            .fold(0.0, f64::max)
        }
        "loss_query_video" => {
            let b = extent(rng, 8);
            let pairs: Vec<(Tensor, Tensor)> = (0..b).map(|_| (uniform(rng, &[d]), uniform(rng, &[d]))).collect();
            let v = loss_eval::loss_query_video(&pairs).unwrap();
            let inputs = OracleInputs::new()
                .with("g_v", Value::Matrix(pairs.iter().map(|p| p.0.data().to_vec()).collect()))
                .with("g_q", Value::Matrix(pairs.iter().map(|p| p.1.data().to_vec()).collect()));
            diff(&oracle_for(op, &inputs).unwrap(), "value", &[v])
        }
        "loss_query_clip" => {
            let s_qv = uniform(rng, &[lv, lq]).map(|x| 3.0 * x);
            let valid = mask(rng, lq);
            let rel: Vec<bool> = (0..lv).map(|_| rng.random_bool(0.5)).collect();
            let v = loss_eval::loss_query_clip(&s_qv, &valid, &rel).unwrap();
            let inputs = OracleInputs::new()
                .with("s_qv", Value::Matrix(rows(&s_qv)))
                .with("query_valid", Value::Mask(valid))
                .with("relevance", Value::Mask(rel));
            diff(&oracle_for(op, &inputs).unwrap(), "value", &[v])
        }
        "loss_caption_clip" => {
            let b = extent(rng, 8);
            let pairs: Vec<(Tensor, Tensor)> = (0..b)
                .map(|_| {
                    let l = extent(rng, 8);
                    (uniform(rng, &[l, d]), uniform(rng, &[l, d]))
                })
                .collect();
            let v = loss_eval::loss_caption_clip(&pairs).unwrap();
            let inputs = OracleInputs::new()
                .with("f_v", Value::Cube(pairs.iter().map(|p| rows(&p.0)).collect()))
                .with("f_c", Value::Cube(pairs.iter().map(|p| rows(&p.1)).collect()));
            diff(&oracle_for(op, &inputs).unwrap(), "value", &[v])
        }
        "loss_total" => {
            let l: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..5.0)).collect();
            let w = LossWeights {
                lambda_qv: rng.random_range(0.0..2.0),
                lambda_qc: rng.random_range(0.0..2.0),
                lambda_cc: rng.random_range(0.0..2.0),
            };
            let v = loss_eval::loss_total(l[0], l[1], l[2], &w);
            let inputs = OracleInputs::new()
                .with("l_qv", Value::Scalar(l[0]))
                .with("l_qc", Value::Scalar(l[1]))
                .with("l_cc", Value::Scalar(l[2]))
                .with("weights", Value::Vector(vec![w.lambda_qv, w.lambda_qc, w.lambda_cc]));
            diff(&oracle_for(op, &inputs).unwrap(), "value", &[v])
        }
        other => panic!("no engine binding for `{other}`"),
    }
}

pub fn oracle_tolerance(op: &str) -> f64 {
    if LINEAR.contains(&op) {
        1e-12
    } else {
        1e-10
    }
}

/// Worst difference per registered operation over `instances` random cases.
pub fn oracle_sweep(instances: u64) -> Vec<(&'static str, f64)> {
    REGISTERED
        .iter()
        .enumerate()
        .map(|(k, &op)| {
            let worst = (0..instances)
                .map(|i| oracle_instance(op, 1000 * k as u64 + i))
                .fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}

/// Batch whose features are all strictly positive, so every similarity in
/// the pipeline is positive under identity initialization.
pub fn positive_batch(seed: u64, b: usize, lq: usize, lv: usize, lc: usize, d: usize) -> Batch {
    let mut r = rng(seed);
    let samples = (0..b)
        .map(|k| Sample {
            id: format!("pos-{k}"),
            query: positive(&mut r, &[lq, d]),
            query_valid: vec![true; lq],
            visual: positive(&mut r, &[lv, d]),
            captions: positive(&mut r, &[lv, lc, d]),
            caption_valid: vec![true; lv * lc],
            relevance_mask: (0..lv).map(|i| i % 2 == 0).collect(),
        })
        .collect();
    Batch::new(samples).unwrap()
}

/// Checks d(L_ma) against every parameter and every input feature.
pub fn check_alignment_loss(batch: &Batch, params: &ModelParams, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut leaves = Vec::new();
    params.visit(&mut |_, t| leaves.push(t.clone()));
    let n_params = leaves.len();
    for s in &batch.samples {
        leaves.extend([s.query.clone(), s.visual.clone(), s.captions.clone()]);
    }
    let weights = LossWeights::default();
    check_gradients(&leaves, cfg, |tape, vars| {
        let mut it = vars[..n_params].iter();
        let bound = params.bind_with(&mut |_| *it.next().unwrap());
        let inputs: Vec<SampleInputs> = vars[n_params..]
            .chunks(3)
            .map(|c| SampleInputs {
                query: c[0],
                visual: c[1],
                captions: c[2],
            })
            .collect();
        let nodes = batch_forward_on_tape(tape, &bound, batch, &inputs, 2, &weights)?;
        Ok(nodes.losses.l_ma)
    })
    .unwrap()
}
