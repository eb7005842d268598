//! Feature fixtures: the stored stand-in for encoder outputs.
//!
//! A fixture is a JSON document
//!
//! ```text
//! { "d": int,
//!   "samples": [ { "id": str,
//!                  "query": [[f64; d]; L_q], "query_valid": [0|1; L_q],
//!                  "visual": [[f64; d]; L_v],
//!                  "captions": [[[f64; d]; L_c]; L_v],
//!                  "caption_valid": [[0|1; L_c]; L_v],
//!                  "relevance_mask": [0|1; L_v] } ] }
//! ```
//!
//! Unknown fields are rejected. Floats are written in shortest round-trip
//! form, so `load(save(batch)) == batch` bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One query/video item with its per-clip caption tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `L_q × d` word features.
    pub query: Tensor,
    pub query_valid: Vec<bool>,
    /// `L_v × d` clip features.
    pub visual: Tensor,
    /// `L_v × L_c × d` caption token features.
    pub captions: Tensor,
    /// Row-major `L_v × L_c`.
    pub caption_valid: Vec<bool>,
    pub relevance_mask: Vec<bool>,
}

impl Sample {
    pub fn num_words(&self) -> usize {
        self.query.rows()
    }

    pub fn num_clips(&self) -> usize {
        self.visual.rows()
    }

    pub fn caption_len(&self) -> usize {
        self.captions.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.query.cols()
    }

    pub fn valid_words(&self) -> usize {
        self.query_valid.iter().filter(|&&v| v).count()
    }

    /// Checks every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Error::fixture(&self.id, field, msg);
        if self.query.rank() != 2 {
            return Err(err("query", "must be a matrix".into()));
        }
        let d = self.dim();
        let (lq, lv) = (self.query.rows(), self.visual.rows());
        if self.visual.rank() != 2 || self.visual.cols() != d {
            return Err(err("visual", format!("must be L_v x {d}")));
        }
        if self.captions.rank() != 3 || self.captions.shape()[0] != lv || self.captions.shape()[2] != d {
            return Err(err("captions", format!("must be {lv} x L_c x {d}")));
        }
        let lc = self.caption_len();
        if self.query_valid.len() != lq {
            return Err(err("query_valid", format!("expected {lq} entries")));
        }
        if self.caption_valid.len() != lv * lc {
            return Err(err("caption_valid", format!("expected {lv} x {lc} entries")));
        }
        if self.relevance_mask.len() != lv {
            return Err(err("relevance_mask", format!("expected {lv} entries")));
        }
        if self.valid_words() == 0 {
            return Err(err("query_valid", "no valid query word".into()));
        }
        if let Some(clip) = (0..lv).find(|&v| !self.caption_valid[v * lc..(v + 1) * lc].iter().any(|&b| b)) {
            return Err(err("caption_valid", format!("clip {clip} has no valid caption token")));
        }
        for (name, t) in [("query", &self.query), ("visual", &self.visual), ("captions", &self.captions)] {
            if !t.is_finite() {
                return Err(err(name, "non-finite value".into()));
            }
        }
        Ok(())
    }

    /// Reorders clips (visual rows, caption rows and masks) so that new clip
    /// `i` is old clip `perm[i]`.
    pub fn permute_clips(&self, perm: &[usize]) -> Sample {
        let (lc, d) = (self.caption_len(), self.dim());
        let visual: Vec<f64> = perm.iter().flat_map(|&p| self.visual.row(p).to_vec()).collect();
        let captions: Vec<f64> = perm
            .iter()
            .flat_map(|&p| self.captions.data()[p * lc * d..(p + 1) * lc * d].to_vec())
            .collect();
        Sample {
            id: self.id.clone(),
            query: self.query.clone(),
            query_valid: self.query_valid.clone(),
            visual: Tensor::new(self.visual.shape().to_vec(), visual).unwrap(),
            captions: Tensor::new(self.captions.shape().to_vec(), captions).unwrap(),
            caption_valid: perm
                .iter()
                .flat_map(|&p| self.caption_valid[p * lc..(p + 1) * lc].to_vec())
                .collect(),
            relevance_mask: perm.iter().map(|&p| self.relevance_mask[p]).collect(),
        }
    }
}

/// Samples sharing a feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let dim = samples
            .first()
            .map(Sample::dim)
            .ok_or_else(|| Error::fixture("<batch>", "samples", "batch is empty"))?;
        let batch = Self { dim, samples };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::fixture("<batch>", "samples", "batch is empty"));
        }
        for s in &self.samples {
            s.validate()?;
            if s.dim() != self.dim {
                return Err(Error::fixture(&s.id, "query", format!("feature dimension {} differs from d = {}", s.dim(), self.dim)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFixture {
    d: usize,
    samples: Vec<RawSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    query: Vec<Vec<f64>>,
    query_valid: Vec<i64>,
    visual: Vec<Vec<f64>>,
    captions: Vec<Vec<Vec<f64>>>,
    caption_valid: Vec<Vec<i64>>,
    relevance_mask: Vec<i64>,
}

fn flags(id: &str, field: &str, values: &[i64]) -> Result<Vec<bool>> {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::fixture(id, field, format!("entry {k} is {other}, expected 0 or 1"))),
        })
        .collect()
}

fn matrix(id: &str, field: &str, rows: &[Vec<f64>], d: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::fixture(id, field, "must have at least one row"));
    }
    if let Some(k) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::fixture(id, field, format!("row {k} has {} values, expected d = {d}", rows[k].len())));
    }
    Tensor::from_rows(rows).map_err(|e| Error::fixture(id, field, e.to_string()))
}

impl RawSample {
    fn into_sample(self, d: usize) -> Result<Sample> {
        let id = self.id;
        let query = matrix(&id, "query", &self.query, d)?;
        let visual = matrix(&id, "visual", &self.visual, d)?;
        let lv = visual.rows();
        if self.captions.len() != lv {
            return Err(Error::fixture(&id, "captions", format!("expected {lv} clips, got {}", self.captions.len())));
        }
        let lc = self.captions.first().map_or(0, Vec::len);
        if lc == 0 {
            return Err(Error::fixture(&id, "captions", "clips need at least one caption token"));
        }
        let mut cap = Vec::with_capacity(lv * lc * d);
        for (v, clip) in self.captions.iter().enumerate() {
            if clip.len() != lc {
                return Err(Error::fixture(&id, "captions", format!("clip {v} has {} tokens, expected {lc}", clip.len())));
            }
            cap.extend(matrix(&id, "captions", clip, d)?.into_data());
        }
        let captions = Tensor::new(vec![lv, lc, d], cap).map_err(|e| Error::fixture(&id, "captions", e.to_string()))?;
        if self.caption_valid.len() != lv || self.caption_valid.iter().any(|r| r.len() != lc) {
            return Err(Error::fixture(&id, "caption_valid", format!("expected {lv} x {lc} entries")));
        }
        let caption_valid = flags(&id, "caption_valid", &self.caption_valid.concat())?;
        let sample = Sample {
            query_valid: flags(&id, "query_valid", &self.query_valid)?,
            relevance_mask: flags(&id, "relevance_mask", &self.relevance_mask)?,
            id,
            query,
            visual,
            captions,
            caption_valid,
        };
        sample.validate()?;
        Ok(sample)
    }

    fn from_sample(s: &Sample) -> Self {
        let bits = |v: &[bool]| v.iter().map(|&b| i64::from(b)).collect::<Vec<_>>();
        let lc = s.caption_len();
        Self {
            id: s.id.clone(),
            query: s.query.to_rows(),
            query_valid: bits(&s.query_valid),
            visual: s.visual.to_rows(),
            captions: (0..s.num_clips())
                .map(|v| {
                    let d = s.dim();
                    s.captions.data()[v * lc * d..(v + 1) * lc * d].chunks(d).map(<[f64]>::to_vec).collect()
                })
                .collect(),
            caption_valid: s.caption_valid.chunks(lc).map(bits).collect(),
            relevance_mask: bits(&s.relevance_mask),
        }
    }
}

pub fn parse_fixture(text: &str) -> Result<Batch> {
    let raw: RawFixture = serde_json::from_str(text)?;
    if raw.d == 0 {
        return Err(Error::fixture("<batch>", "d", "must be at least 1"));
    }
    let samples = raw
        .samples
        .into_iter()
        .map(|s| s.into_sample(raw.d))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::fixture("<batch>", "samples", "batch is empty"));
    }
    Ok(Batch { dim: raw.d, samples })
}

pub fn fixture_to_string(batch: &Batch) -> Result<String> {
    let raw = RawFixture {
        d: batch.dim,
        samples: batch.samples.iter().map(RawSample::from_sample).collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn load_fixture(path: impl AsRef<Path>) -> Result<Batch> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_fixture(&text)
}

pub fn save_fixture(batch: &Batch, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, fixture_to_string(batch)? + "\n")?;
    Ok(())
}

/// Parameters of [`synthesize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub batch: usize,
    pub words: usize,
    pub clips: usize,
    pub caption_len: usize,
    pub dim: usize,
    /// Mixing coefficient in `[0, 1]` pulling relevant clips toward the query centroid.
    pub alignment: f64,
}

/// Generates a deterministic synthetic batch.
///
/// Query words are standard normal. Each sample gets a contiguous relevant
/// span; relevant clips and their caption tokens are
/// `alignment * centroid + (1 - alignment) * noise`, where the centroid is the
/// mean query word. Other clips and captions are pure noise.
pub fn synthesize(spec: &SynthSpec) -> Result<Batch> {
    let SynthSpec { seed, batch, words, clips, caption_len, dim, alignment } = *spec;
    if batch == 0 || words == 0 || clips == 0 || caption_len == 0 || dim == 0 {
        return Err(Error::Contract("synthesize: every extent must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&alignment) {
        return Err(Error::Contract(format!("synthesize: alignment {alignment} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let query = normals(&mut rng, words * dim);
        let centroid: Vec<f64> = (0..dim)
            .map(|c| (0..words).map(|w| query[w * dim + c]).sum::<f64>() / words as f64)
            .collect();
        let span = rng.random_range(1..=clips.div_ceil(2));
        let start = rng.random_range(0..=clips - span);
        let relevance_mask: Vec<bool> = (0..clips).map(|v| v >= start && v < start + span).collect();
        let mut mix = |relevant: bool| -> Vec<f64> {
            let noise = normals(&mut rng, dim);
            if relevant {
                centroid.iter().zip(&noise).map(|(c, n)| alignment * c + (1.0 - alignment) * n).collect()
            } else {
                noise
            }
        };
        let mut visual = Vec::with_capacity(clips * dim);
        let mut captions = Vec::with_capacity(clips * caption_len * dim);
        for &rel in &relevance_mask {
            visual.extend(mix(rel));
            for _ in 0..caption_len {
                captions.extend(mix(rel));
            }
        }
        samples.push(Sample {
            id: format!("synth-{seed}-{b}"),
            query: Tensor::matrix(words, dim, query)?,
            query_valid: vec![true; words],
            visual: Tensor::matrix(clips, dim, visual)?,
            captions: Tensor::new(vec![clips, caption_len, dim], captions)?,
            caption_valid: vec![true; clips * caption_len],
            relevance_mask,
        });
    }
    Batch::new(samples)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Per-word averaging weights: `1 / n_valid` on valid words, zero elsewhere.
pub fn valid_mean_weights(valid: &[bool]) -> Vec<f64> {
    let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
    valid.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect()
}

/// Masked mean over the rows of an `n × d` node.
pub fn masked_row_mean(tape: &mut Tape, x: Var, valid: &[bool]) -> Result<Var> {
    let w = tape.constant(Tensor::matrix(1, valid.len(), valid_mean_weights(valid))?);
    let m = tape.matmul(w, x)?;
    let d = tape.shape(m)[1];
    tape.reshape(m, &[d])
}

/// Caption pooling on the tape. Returns `(F_c, A)` with `F_c` of shape
/// `L_v × d` and per-clip token weights `A` of shape `L_v × L_c`.
///
/// Token scores are raw dot products against every query word, averaged over
/// the valid words; `A` is their softmax over the valid tokens of each clip.
pub fn pool_captions_on_tape(
    tape: &mut Tape,
    query: Var,
    query_valid: &[bool],
    captions: Var,
    caption_valid: &[bool],
) -> Result<(Var, Var)> {
    let shape = tape.shape(captions).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("pool_captions", "captions must be L_v x L_c x d"));
    }
    let (lv, lc, d) = (shape[0], shape[1], shape[2]);
    if caption_valid.len() != lv * lc {
        return Err(Error::shape("pool_captions", "caption mask size"));
    }
    if let Some(v) = (0..lv).find(|&v| !caption_valid[v * lc..(v + 1) * lc].iter().any(|&b| b)) {
        return Err(Error::Contract(format!("pool_captions: clip {v} has no valid caption token")));
    }
    if !query_valid.iter().any(|&b| b) {
        return Err(Error::Contract("pool_captions: no valid query word".into()));
    }
    let flat = tape.reshape(captions, &[lv * lc, d])?;
    let qt = tape.transpose(query)?;
    let sim = tape.matmul(flat, qt)?;
    let lq = query_valid.len();
    let wq = tape.constant(Tensor::matrix(lq, 1, valid_mean_weights(query_valid))?);
    let avg = tape.matmul(sim, wq)?;
    let avg = tape.reshape(avg, &[lv, lc])?;
    let weights = tape.masked_softmax(avg, 1, Some(caption_valid))?;
    let wflat = tape.reshape(weights, &[lv * lc])?;
    let wb = tape.broadcast_cols(wflat, d)?;
    let wb = tape.reshape(wb, &[lv, lc, d])?;
    let weighted = tape.mul(wb, captions)?;
    let pooled = tape.sum_axis(weighted, 1)?;
    Ok((pooled, weights))
}

/// Pooled caption features with the token weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPooling {
    pub features: Tensor,
    pub weights: Tensor,
}

pub fn pool_captions_with_weights(sample: &Sample) -> Result<CaptionPooling> {
    let mut tape = Tape::new();
    let q = tape.constant(sample.query.clone());
    let c = tape.constant(sample.captions.clone());
    let (f, w) = pool_captions_on_tape(&mut tape, q, &sample.query_valid, c, &sample.caption_valid)?;
    Ok(CaptionPooling {
        features: tape.value(f).clone(),
        weights: tape.value(w).clone(),
    })
}

/// Clip-level caption features `L_v × d` for a sample.
pub fn pool_captions(sample: &Sample) -> Result<Tensor> {
    Ok(pool_captions_with_weights(sample)?.features)
}
