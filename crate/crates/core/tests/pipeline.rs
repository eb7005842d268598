mod common;

use std::path::{Path, PathBuf};

use clipfilter_core::fem::eval as fem_eval;
use clipfilter_core::fixtures::{load_fixture, save_fixture, Batch};
use clipfilter_core::loss::LossWeights;
use clipfilter_core::model::ModelParams;
use clipfilter_core::oracle::{oracle_for, Mat, OracleInputs, OracleResult, Value};
use clipfilter_core::params::{InitMode, Parameters};
use clipfilter_core::pipeline::{
    cmd_run, cmd_sweep_iters, parse_report, round_report, run_batch, saliency_head, to_pretty_json, train,
    LossSummary, RunConfig, RunReport, SampleReport, WordScore,
};
use clipfilter_core::rfm::FusionMode;
use clipfilter_core::{Error, Tensor};
use common::{cube, positive_batch, rows};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden_config() -> RunConfig {
    RunConfig {
        fixture_path: Some(PathBuf::from("tests/data/minimal.json")),
        ..RunConfig::default()
    }
}

fn project(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut acc = b.data()[j];
                    for (k, v) in row.iter().enumerate() {
                        acc += v * w.at(k, j);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn mat(o: &OracleResult, key: &str) -> Mat {
    match o.get(key).unwrap() {
        Value::Matrix(m) => m.clone(),
        other => panic!("{key}: {other:?}"),
    }
}

fn vector(o: &OracleResult, key: &str) -> Vec<f64> {
    match o.get(key).unwrap() {
        Value::Vector(v) => v.clone(),
        other => panic!("{key}: {other:?}"),
    }
}

fn scalar(o: &OracleResult) -> f64 {
    o.flat("value").unwrap()[0]
}

/// The report of `run_batch`, assembled from the brute-force oracles only.
fn oracle_report(batch: &Batch, params: &ModelParams, config: &RunConfig) -> RunReport {
    let gate = &params.gate;
    let mut samples = Vec::new();
    let (mut g_v, mut g_q, mut f_vs, mut f_cs, mut l_qc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), 0.0);
    let mut warnings = Vec::new();
    for s in &batch.samples {
        let lin = |l: &clipfilter_core::params::Linear, x: &Mat| project(x, &l.weight, l.bias.as_ref().unwrap());
        let f_q = lin(&params.input.query, &rows(&s.query));
        let f_v = lin(&params.input.visual, &rows(&s.visual));
        let f_oc: Vec<Mat> = cube(&s.captions).iter().map(|c| lin(&params.input.caption, c)).collect();
        let pooled = oracle_for(
            "pool_captions",
            &OracleInputs::new()
                .with("query", Value::Matrix(f_q.clone()))
                .with("query_valid", Value::Mask(s.query_valid.clone()))
                .with("captions", Value::Cube(f_oc))
                .with("caption_valid", Value::Mask(s.caption_valid.clone())),
        )
        .unwrap();
        let f_c = mat(&pooled, "features");
        let fem = oracle_for(
            "fem_forward",
            &OracleInputs::new()
                .with("f_q", Value::Matrix(f_q.clone()))
                .with("f_v", Value::Matrix(f_v.clone()))
                .with("f_c", Value::Matrix(f_c.clone()))
                .with("query_valid", Value::Mask(s.query_valid.clone()))
                .with_fem_params(&params.fem),
        )
        .unwrap();
        let valid = s.valid_words();
        if valid < config.iterations {
            warnings.push(format!(
                "sample `{}`: {} filtering iterations requested but only {valid} valid words; clamped to {valid}",
                s.id, config.iterations
            ));
        }
        let scores = vector(&fem, "scores");
        let rfm = oracle_for(
            "rfm_forward",
            &OracleInputs::new()
                .with("f_ev", Value::Matrix(mat(&fem, "f_ev")))
                .with("f_ec", Value::Matrix(mat(&fem, "f_ec")))
                .with("f_eq", Value::Matrix(mat(&fem, "f_eq")))
                .with("scores", Value::Vector(scores.clone()))
                .with("query_valid", Value::Mask(s.query_valid.clone()))
                .with("n", Value::Index(config.iterations.min(valid)))
                .with_gate(gate),
        )
        .unwrap();
        let saliency = oracle_for(
            "saliency_head",
            &OracleInputs::new()
                .with("f_fv", Value::Matrix(mat(&rfm, "f_fv")))
                .with("f_eq_sent", Value::Vector(vector(&fem, "f_eq_sent"))),
        )
        .unwrap();
        let selected = match rfm.get("selected_words").unwrap() {
            Value::Indices(v) => v.clone(),
            other => panic!("{other:?}"),
        };
        let trace_norms = match rfm.get("trace").unwrap() {
            Value::Cube(c) => c
                .iter()
                .map(|m| round_report(m.iter().flatten().map(|x| x.abs()).sum()))
                .collect(),
            other => panic!("{other:?}"),
        };
        samples.push(SampleReport {
            id: s.id.clone(),
            top_words: selected
                .iter()
                .map(|&k| WordScore {
                    index: k,
                    score: round_report(scores[k]),
                })
                .collect(),
            saliency: saliency.flat("out").unwrap().into_iter().map(round_report).collect(),
            trace_norms,
        });

        l_qc += scalar(
            &oracle_for(
                "loss_query_clip",
                &OracleInputs::new()
                    .with("s_qv", Value::Matrix(mat(&rfm, "s_qv")))
                    .with("query_valid", Value::Mask(s.query_valid.clone()))
                    .with("relevance", Value::Mask(s.relevance_mask.clone())),
            )
            .unwrap(),
        );
        let n_valid = valid as f64;
        g_v.push((0..f_v[0].len()).map(|k| f_v.iter().map(|r| r[k]).sum::<f64>() / f_v.len() as f64).collect::<Vec<_>>());
        g_q.push(
            (0..f_q[0].len())
                .map(|k| (0..f_q.len()).filter(|&w| s.query_valid[w]).map(|w| f_q[w][k]).sum::<f64>() / n_valid)
                .collect::<Vec<_>>(),
        );
        f_vs.push(f_v);
        f_cs.push(f_c);
    }
    let l_qv = scalar(&oracle_for("loss_query_video", &OracleInputs::new().with("g_v", Value::Matrix(g_v)).with("g_q", Value::Matrix(g_q))).unwrap());
    let l_cc = scalar(&oracle_for("loss_caption_clip", &OracleInputs::new().with("f_v", Value::Cube(f_vs)).with("f_c", Value::Cube(f_cs))).unwrap());
    let l_qc = l_qc / batch.len() as f64;
    let w = config.weights;
    let l_ma = scalar(
        &oracle_for(
            "loss_total",
            &OracleInputs::new()
                .with("l_qv", Value::Scalar(l_qv))
                .with("l_qc", Value::Scalar(l_qc))
                .with("l_cc", Value::Scalar(l_cc))
                .with("weights", Value::Vector(vec![w.lambda_qv, w.lambda_qc, w.lambda_cc])),
        )
        .unwrap(),
    );
    RunReport {
        config_echo: config.echo(),
        samples,
        losses: LossSummary {
            l_qv: round_report(l_qv),
            l_qc: round_report(l_qc),
            l_cc: round_report(l_cc),
            l_ma: round_report(l_ma),
        },
        warnings,
    }
}

#[test]
fn golden_report_comes_from_the_oracle_path() {
    let config = golden_config();
    let batch = load_fixture(data("minimal.json")).unwrap();
    let text = to_pretty_json(&oracle_report(&batch, &config.init_params(batch.dim), &config)).unwrap();
    let golden = data("minimal_report.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(golden).unwrap());
}

#[test]
fn engine_report_matches_golden_file() {
    let config = golden_config();
    let batch = load_fixture(data("minimal.json")).unwrap();
    let report = run_batch(&batch, &config.init_params(batch.dim), &config).unwrap();
    let golden = std::fs::read_to_string(data("minimal_report.json")).unwrap();
    assert_eq!(to_pretty_json(&report).unwrap(), golden);
}

#[test]
fn oracle_path_agrees_with_engine_under_random_init() {
    let config = RunConfig {
        init: InitMode::Random,
        seed: 3,
        iterations: 1,
        ..golden_config()
    };
    let batch = load_fixture(data("minimal.json")).unwrap();
    let params = config.init_params(batch.dim);
    assert_eq!(oracle_report(&batch, &params, &config), run_batch(&batch, &params, &config).unwrap());
}

#[test]
fn short_queries_are_clamped_with_a_warning() {
    let config = golden_config();
    let batch = load_fixture(data("minimal.json")).unwrap();
    let report = run_batch(&batch, &config.init_params(batch.dim), &config).unwrap();
    assert_eq!(report.warnings.len(), 2);
    assert!(report.warnings[0].contains("clip-a"));
    assert_eq!(report.samples[0].top_words.len(), 2);
    assert_eq!(report.samples[0].trace_norms.len(), 3);
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for init in [InitMode::Identity, InitMode::Random] {
        let mut outputs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("r{k}.json"));
            let config = RunConfig {
                fixture_path: Some(data("minimal.json")),
                init,
                seed: 42,
                output_path: Some(out.clone()),
                ..RunConfig::default()
            };
            cmd_run(&config).unwrap();
            outputs.push(std::fs::read(out).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
    }
}

#[test]
fn zero_iterations_scores_enhanced_features_directly() {
    let config = RunConfig {
        iterations: 0,
        ..golden_config()
    };
    let batch = load_fixture(data("minimal.json")).unwrap();
    let params = config.init_params(batch.dim);
    let report = run_batch(&batch, &params, &config).unwrap();
    for (s, r) in batch.samples.iter().zip(&report.samples) {
        let f_c = clipfilter_core::fixtures::pool_captions(s).unwrap();
        let fem = fem_eval::fem_forward(&s.query, &s.query_valid, &s.visual, &f_c, &params.fem).unwrap();
        let direct: Vec<f64> = saliency_head(&fem.f_ev, &fem.f_eq_sent).unwrap().into_iter().map(round_report).collect();
        assert_eq!(r.saliency, direct);
        assert!(r.top_words.is_empty());
    }
}

#[test]
fn report_round_trips_through_parser() {
    let report = cmd_run(&golden_config_abs()).unwrap();
    let text = to_pretty_json(&report).unwrap();
    assert_eq!(parse_report(&text).unwrap(), report);
    assert!(parse_report("{\"samples\": []}").is_err());
}

fn golden_config_abs() -> RunConfig {
    RunConfig {
        fixture_path: Some(data("minimal.json")),
        ..RunConfig::default()
    }
}

#[test]
fn corrupt_fixture_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(data("minimal.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["samples"][1]["relevance_mask"][0] = serde_json::json!(2);
    std::fs::write(&path, doc.to_string()).unwrap();
    let err = cmd_run(&RunConfig {
        fixture_path: Some(path),
        ..RunConfig::default()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Fixture { .. }));
    let msg = err.to_string();
    assert!(msg.contains("relevance_mask") && msg.contains("clip-b"), "{msg}");
}

fn params_flat(p: &ModelParams) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let batch = load_fixture(data("minimal.json")).unwrap();
    let config = RunConfig {
        init: InitMode::Random,
        learning_rate: 0.0,
        train_steps: 5,
        ..golden_config()
    };
    let mut params = config.init_params(batch.dim);
    let report = train(&batch, &mut params, &config).unwrap();
    assert_eq!(report.loss_history.len(), 6);
    assert!(report.loss_history.iter().all(|&l| l == report.loss_history[0]));
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let batch = load_fixture(data("minimal.json")).unwrap();
    let config = RunConfig {
        init: InitMode::Random,
        weights: LossWeights {
            lambda_qv: 0.0,
            lambda_qc: 0.0,
            lambda_cc: 0.0,
        },
        learning_rate: 0.5,
        train_steps: 3,
        ..golden_config()
    };
    let mut params = config.init_params(batch.dim);
    let before = params_flat(&params);
    train(&batch, &mut params, &config).unwrap();
    assert_eq!(params_flat(&params), before);
}

#[test]
fn training_lowers_alignment_loss_on_synthetic_batch() {
    let batch = clipfilter_core::fixtures::synthesize(&clipfilter_core::fixtures::SynthSpec {
        seed: 7,
        batch: 4,
        words: 4,
        clips: 6,
        caption_len: 2,
        dim: 8,
        alignment: 0.9,
    })
    .unwrap();
    let config = RunConfig {
        seed: 7,
        learning_rate: 0.05,
        train_steps: 500,
        ..RunConfig::default()
    };
    let mut params = config.init_params(batch.dim);
    let report = train(&batch, &mut params, &config).unwrap();
    assert!(report.final_losses.l_ma < report.initial_losses.l_ma);
    assert!(report.matched_top1.iter().filter(|&&m| m).count() >= 3, "{:?}", report.matched_top1);
}

#[test]
fn divergent_training_aborts() {
    let batch = load_fixture(data("minimal.json")).unwrap();
    let config = RunConfig {
        init: InitMode::Random,
        learning_rate: 1e300,
        train_steps: 50,
        ..golden_config()
    };
    let mut params = config.init_params(batch.dim);
    assert!(matches!(train(&batch, &mut params, &config), Err(Error::Numerical(_))));
}

#[test]
fn single_point_sweep_equals_run() {
    let config = RunConfig {
        iterations: 0,
        ..golden_config_abs()
    };
    let sweep = cmd_sweep_iters(&config, &[0]).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.rows[0].report, cmd_run(&config).unwrap());
}

#[test]
fn sweep_norms_grow_with_positive_similarities() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pos.json");
    save_fixture(&positive_batch(5, 2, 7, 4, 2, 6), &path).unwrap();
    let config = RunConfig {
        fixture_path: Some(path),
        fusion: FusionMode::Learned,
        ..RunConfig::default()
    };
    let sweep = cmd_sweep_iters(&config, &[0, 1, 3, 5, 7]).unwrap();
    let norms: Vec<f64> = sweep.rows.iter().map(|r| r.filtered_l1).collect();
    assert!(norms.windows(2).all(|w| w[0] < w[1]), "{norms:?}");
    for row in &sweep.rows {
        for s in &row.report.samples {
            assert!(s.trace_norms.windows(2).all(|w| w[0] < w[1]));
        }
    }
    assert!(sweep.table().lines().count() == 6);
}
