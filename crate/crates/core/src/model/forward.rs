//! Sequence assembly, encoder stack and classifier head.
//!
//! Sequences are stored row-major: row `j` of an assembled sequence is the
//! `j`-th column of the embedded `[CLS] Q [SEP] O [SEP] I` input.

use super::config::{ModelConfig, BOX_DIMS, CLS_ID, IMAGE_SEGMENT, LAYER_NORM_EPS, SEP_ID, TEXT_SEGMENT};
use super::params::{self, layer, ModelParams};
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Per-region visual statistics plus the normalized box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub stats: Vec<f64>,
    pub bbox: [f64; BOX_DIMS],
}

impl RegionFeature {
    /// Statistics followed by the box values.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.stats.len() + BOX_DIMS);
        v.extend_from_slice(&self.stats);
        v.extend_from_slice(&self.bbox);
        v
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.stats.len() != cfg.visual_dims {
            return Err(Error::Shape(format!(
                "region has {} statistics, config expects {}",
                self.stats.len(),
                cfg.visual_dims
            )));
        }
        if let Some(b) = self.bbox.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidArgument(format!("box value {b} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Question tokens, object tags and region features of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub question_tokens: Vec<usize>,
    pub object_tags: Vec<usize>,
    pub regions: Vec<RegionFeature>,
}

impl FusionInput {
    /// `[CLS]`, question, `[SEP]`, tags, `[SEP]`.
    pub fn text_len(&self) -> usize {
        3 + self.question_tokens.len() + self.object_tags.len()
    }

    pub fn sequence_len(&self) -> usize {
        self.text_len() + self.regions.len()
    }

    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.text_len());
        ids.push(CLS_ID);
        ids.extend_from_slice(&self.question_tokens);
        ids.push(SEP_ID);
        ids.extend_from_slice(&self.object_tags);
        ids.push(SEP_ID);
        ids
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let q = self.question_tokens.len();
        let o = self.object_tags.len();
        let i = self.regions.len();
        if q == 0 || i == 0 {
            return Err(Error::InvalidArgument(format!(
                "need at least one question token and one region (got {q}, {i})"
            )));
        }
        if q > cfg.max_question || o > cfg.max_tags || i > cfg.max_regions {
            return Err(Error::InvalidArgument(format!(
                "lengths ({q}, {o}, {i}) exceed maxima ({}, {}, {})",
                cfg.max_question, cfg.max_tags, cfg.max_regions
            )));
        }
        if let Some(t) = self
            .question_tokens
            .iter()
            .chain(&self.object_tags)
            .find(|&&t| t >= cfg.vocab_size)
        {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        for r in &self.regions {
            r.validate(cfg)?;
        }
        Ok(())
    }
}

/// Where one example's text and image rows sit inside a (batched) sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanMap {
    pub start: usize,
    pub text_len: usize,
    pub image_len: usize,
}

impl SpanMap {
    pub fn len(&self) -> usize {
        self.text_len + self.image_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.text_len
    }

    pub fn image_rows(&self) -> std::ops::Range<usize> {
        self.start + self.text_len..self.start + self.len()
    }
}

/// Hidden states `H` (one row per sequence position) and the `[CLS]` row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<S> {
    pub hidden: Tensor<S>,
    pub h_cls: Tensor<S>,
}

/// Graph leaves for every parameter tensor.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn new<S: Real>(g: &mut Graph<S>, params: &ModelParams<S>, trainable: bool) -> Self {
        let vars = params.tensors().iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Self { vars }
    }

    /// Wrap existing leaves, given in [`param_specs`](super::param_specs) order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Embedded batch: token/region embedding plus segment and position embeddings.
pub fn embed_batch<S: Real>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &[&FusionInput],
) -> Result<(Var, Vec<SpanMap>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut text_ids = Vec::new();
    let mut region_rows = Vec::new();
    let mut seg_ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    let mut start = 0;
    for x in batch {
        x.validate(cfg)?;
        text_ids.extend(x.text_ids());
        for r in &x.regions {
            region_rows.extend(r.concatenated().into_iter().map(S::from_f64));
        }
        let span = SpanMap {
            start,
            text_len: x.text_len(),
            image_len: x.regions.len(),
        };
        seg_ids.extend(std::iter::repeat_n(TEXT_SEGMENT, span.text_len));
        seg_ids.extend(std::iter::repeat_n(IMAGE_SEGMENT, span.image_len));
        pos_ids.extend(0..span.len());
        start += span.len();
        spans.push(span);
    }

    let text = g.gather_rows(pv.get(params::TOKEN_EMBED), text_ids)?;
    let region_count = region_rows.len() / cfg.region_input_dims();
    let regions = g.constant(Tensor::matrix(region_count, cfg.region_input_dims(), region_rows)?);
    let image = g.linear(regions, pv.get(params::REGION_W), pv.get(params::REGION_B))?;

    let base = if batch.len() == 1 {
        g.concat_rows(vec![text, image])?
    } else {
        let mut parts = Vec::with_capacity(2 * batch.len());
        let (mut t_off, mut i_off) = (0, 0);
        for s in &spans {
            parts.push(g.slice_rows(text, t_off, s.text_len)?);
            parts.push(g.slice_rows(image, i_off, s.image_len)?);
            t_off += s.text_len;
            i_off += s.image_len;
        }
        g.concat_rows(parts)?
    };
    let seg = g.gather_rows(pv.get(params::SEGMENT_EMBED), seg_ids)?;
    let pos = g.gather_rows(pv.get(params::POSITION_EMBED), pos_ids)?;
    let x = g.add(base, seg)?;
    let x = g.add(x, pos)?;
    Ok((x, spans))
}

/// Add one perturbation per example to its text rows; image rows are untouched.
pub fn perturb_text<S: Real>(g: &mut Graph<S>, x: Var, spans: &[SpanMap], deltas: &[Var]) -> Result<Var> {
    if deltas.len() != spans.len() {
        return Err(Error::Shape(format!(
            "{} perturbations for {} examples",
            deltas.len(),
            spans.len()
        )));
    }
    let width = g.value(x).cols();
    let mut parts = Vec::with_capacity(2 * spans.len());
    for (s, &d) in spans.iter().zip(deltas) {
        let shape = g.value(d).shape();
        if shape != [s.text_len, width] {
            return Err(Error::Shape(format!(
                "perturbation {:?} does not match text span ({} x {width})",
                shape, s.text_len
            )));
        }
        parts.push(d);
        parts.push(g.constant(Tensor::zeros(&[s.image_len, width])));
    }
    let full = g.concat_rows(parts)?;
    g.add(x, full)
}

/// Post-norm Transformer encoder over independent sequences.
pub fn encode_graph<S: Real>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
    spans: &[SpanMap],
) -> Result<Var> {
    let rows = g.value(x).rows();
    let segments: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.len())).collect();
    if spans.iter().any(|s| s.len() > cfg.max_sequence()) {
        return Err(Error::Shape("sequence longer than the position table".into()));
    }
    debug_assert_eq!(segments.iter().map(|s| s.1).sum::<usize>(), rows);
    let mut h = x;
    for l in 0..cfg.layers {
        let base = params::layer_base(l);
        let p = |off: usize| pv.get(base + off);
        let q = g.linear(h, p(layer::WQ), p(layer::BQ))?;
        let k = g.linear(h, p(layer::WK), p(layer::BK))?;
        let v = g.linear(h, p(layer::WV), p(layer::BV))?;
        let a = g.attention(q, k, v, cfg.heads, segments.clone())?;
        let a = g.linear(a, p(layer::WO), p(layer::BO))?;
        let r = g.add(h, a)?;
        let h1 = g.layer_norm(r, p(layer::LN1_G), p(layer::LN1_B), LAYER_NORM_EPS)?;
        let f = g.linear(h1, p(layer::W1), p(layer::B1))?;
        let f = g.gelu(f)?;
        let f = g.linear(f, p(layer::W2), p(layer::B2))?;
        let r = g.add(h1, f)?;
        h = g.layer_norm(r, p(layer::LN2_G), p(layer::LN2_B), LAYER_NORM_EPS)?;
    }
    Ok(h)
}

pub fn classify_graph<S: Real>(g: &mut Graph<S>, pv: &ParamVars, cfg: &ModelConfig, h_cls: Var) -> Result<Var> {
    g.linear(
        h_cls,
        pv.get(params::classifier_w(cfg)),
        pv.get(params::classifier_b(cfg)),
    )
}

/// Nodes produced by a batched forward pass.
pub struct BatchForward {
    pub embedded: Var,
    pub input: Var,
    pub hidden: Var,
    pub logits: Var,
    pub spans: Vec<SpanMap>,
}

/// Logits (one row per example). With `deltas`, each example's text span is
/// shifted by its perturbation before encoding.
pub fn forward_batch<S: Real>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &[&FusionInput],
    deltas: Option<&[Var]>,
) -> Result<BatchForward> {
    let (embedded, spans) = embed_batch(g, pv, cfg, batch)?;
    let input = match deltas {
        Some(d) => perturb_text(g, embedded, &spans, d)?,
        None => embedded,
    };
    let hidden = encode_graph(g, pv, cfg, input, &spans)?;
    let cls = g.gather_rows(hidden, spans.iter().map(|s| s.start).collect())?;
    let logits = classify_graph(g, pv, cfg, cls)?;
    Ok(BatchForward {
        embedded,
        input,
        hidden,
        logits,
        spans,
    })
}

/// `W · concat(stats, box) + b`.
pub fn project_region<S: Real>(r: &RegionFeature, params: &ModelParams<S>) -> Result<Tensor<S>> {
    let cfg = params.config();
    r.validate(cfg)?;
    let w = params.tensor(params::REGION_W);
    let b = params.tensor(params::REGION_B);
    let input = r.concatenated();
    let mut out = b.data().to_vec();
    for (i, &x) in input.iter().enumerate() {
        let x = S::from_f64(x);
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o = *o + wv * x;
        }
    }
    Ok(Tensor::vector(out))
}

/// Embedded `[CLS] Q [SEP] O [SEP] I` sequence of one example.
pub fn assemble_sequence<S: Real>(x: &FusionInput, params: &ModelParams<S>) -> Result<(Tensor<S>, SpanMap)> {
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params, false);
    let (seq, spans) = embed_batch(&mut g, &pv, params.config(), &[x])?;
    Ok((g.value(seq).clone(), spans[0]))
}

/// Encoder stack over one assembled sequence.
pub fn encode<S: Real>(seq: &Tensor<S>, params: &ModelParams<S>) -> Result<EncoderOutput<S>> {
    let cfg = params.config();
    if seq.rank() != 2 || seq.cols() != cfg.hidden_dim {
        return Err(Error::Shape(format!(
            "sequence {:?} does not have width {}",
            seq.shape(),
            cfg.hidden_dim
        )));
    }
    let rows = seq.rows();
    if rows == 0 || rows > cfg.max_sequence() {
        return Err(Error::Shape(format!(
            "sequence of {rows} rows exceeds position table of {}",
            cfg.max_sequence()
        )));
    }
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params, false);
    let x = g.constant(seq.clone());
    let span = SpanMap {
        start: 0,
        text_len: rows,
        image_len: 0,
    };
    let h = encode_graph(&mut g, &pv, cfg, x, &[span])?;
    let hidden = g.value(h).clone();
    let h_cls = Tensor::vector(hidden.row(0).to_vec());
    Ok(EncoderOutput { hidden, h_cls })
}

/// Affine answer head on the `[CLS]` vector (no softmax).
pub fn classify<S: Real>(h_cls: &Tensor<S>, params: &ModelParams<S>) -> Result<Tensor<S>> {
    let cfg = params.config();
    if h_cls.len() != cfg.hidden_dim {
        return Err(Error::Shape(format!(
            "h_cls of length {} for hidden width {}",
            h_cls.len(),
            cfg.hidden_dim
        )));
    }
    let w = params.tensor(params::classifier_w(cfg));
    let b = params.tensor(params::classifier_b(cfg));
    let mut out = b.data().to_vec();
    for (i, &x) in h_cls.data().iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o = *o + wv * x;
        }
    }
    Ok(Tensor::vector(out))
}

/// Answer logits for one example, optionally with a text-span perturbation of
/// shape `text_len × hidden_dim`.
pub fn forward<S: Real>(x: &FusionInput, params: &ModelParams<S>, delta: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params, false);
    let deltas = delta.map(|d| vec![g.constant(d.clone())]);
    let out = forward_batch(&mut g, &pv, params.config(), &[x], deltas.as_deref())?;
    Ok(Tensor::vector(g.value(out.logits).data().to_vec()))
}

/// Logits for many examples in fixed-size chunks. Chunk boundaries depend only
/// on `chunk`, so results do not depend on how chunks are spread over threads.
pub fn logits_many<S: Real>(
    params: &ModelParams<S>,
    inputs: &[&FusionInput],
    chunk: usize,
    threads: usize,
) -> Result<Vec<Vec<S>>> {
    let chunk = chunk.max(1);
    let chunks: Vec<&[&FusionInput]> = inputs.chunks(chunk).collect();
    let run = |c: &[&FusionInput]| -> Result<Vec<Vec<S>>> {
        let mut g = Graph::new();
        let pv = ParamVars::new(&mut g, params, false);
        let out = forward_batch(&mut g, &pv, params.config(), c, None)?;
        let logits = g.value(out.logits);
        Ok((0..c.len()).map(|r| logits.row(r).to_vec()).collect())
    };
    let per_chunk = crate::par::map_ordered(&chunks, threads, |_, c| run(c));
    let mut out = Vec::with_capacity(inputs.len());
    for r in per_chunk {
        out.extend(r?);
    }
    Ok(out)
}
