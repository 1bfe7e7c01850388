//! Decoder-only transformer (pre-norm GPT layout) on top of the autodiff
//! graph.
//!
//! Parameters, in flattening order: `wte (V, D)`, `wpe (L, D)` (learned
//! positions only), then per layer `ln1.g`, `ln1.b`, `attn.w_qkv (D, 3D)`,
//! `attn.b_qkv`, `attn.w_o (D, D)`, `attn.b_o`, `ln2.g`, `ln2.b`,
//! `mlp.w_fc (D, F)`, `mlp.b_fc`, `mlp.w_proj (F, D)`, `mlp.b_proj`, and
//! finally `lnf.g`, `lnf.b`, `w_unembed (D, V)`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use iml_numerics::{Graph, HeadLayout, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tokenizer::TokenizedDoc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    LearnedAbsolute,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context_length: usize,
    pub positional: Positional,
    /// Weight matrices are drawn from `N(0, init_scale / sqrt(d_model))`.
    pub init_scale: f64,
    pub precision: Precision,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f64,
}

fn default_rotary_base() -> f64 {
    10000.0
}

/// Standard deviation of token and position embeddings.
pub const EMBED_STD: f64 = 0.02;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Model(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head, width and feed-forward sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.positional == Positional::Rotary && !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("rotary positions need an even head dimension".into());
        }
        if self.vocab_size < 3 || self.max_context_length < 2 {
            return bad("vocabulary or context too small".into());
        }
        if self.init_scale.is_nan() || self.init_scale < 0.0 {
            return bad(format!("init_scale {} must be non-negative", self.init_scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every parameter in flattening order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![("wte".to_string(), vec![v, d])];
        if self.positional == Positional::LearnedAbsolute {
            out.push(("wpe".into(), vec![self.max_context_length, d]));
        }
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.b_qkv", vec![3 * d]),
                ("attn.w_o", vec![d, d]),
                ("attn.b_o", vec![d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("mlp.w_fc", vec![d, f]),
                ("mlp.b_fc", vec![f]),
                ("mlp.w_proj", vec![f, d]),
                ("mlp.b_proj", vec![d]),
            ] {
                out.push((format!("h{l}.{name}"), shape));
            }
        }
        out.push(("lnf.g".into(), vec![d]));
        out.push(("lnf.b".into(), vec![d]));
        out.push(("w_unembed".into(), vec![d, v]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Vec<Tensor<T>>,
    pub step: u64,
}

/// Fresh parameters for `config`, deterministic in `seed`.
///
/// Embeddings use `N(0, 0.02)`; weight matrices `N(0, init_scale/sqrt(D))`,
/// with the two residual output projections further divided by
/// `sqrt(2 * n_layers)`; biases are zero and layer-norm gains one.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = config.init_scale / (config.d_model as f64).sqrt();
    let resid = std / (2.0 * config.n_layers as f64).sqrt();
    let mut params = Vec::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let sd = match leaf {
            "wte" | "wpe" => EMBED_STD,
            "w_o" | "w_proj" => resid,
            "w_qkv" | "w_fc" | "w_unembed" => std,
            _ => 0.0,
        };
        let data: Vec<f64> = if leaf == "g" {
            vec![1.0; n]
        } else if sd == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, sd).map_err(|e| CoreError::Model(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        params.push(Tensor::from_f64(shape, &data)?);
    }
    Ok(ModelState { config: config.clone(), params, step: 0 })
}

impl<T: Real> ModelState<T> {
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState { config: self.config.clone(), params: self.params.iter().map(Tensor::cast).collect(), step: self.step }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }
}

/// Graph handles for one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Residual stream after the embedding (index 0) and after each layer.
    pub residuals: Vec<Var>,
    pub params: Vec<Var>,
}

/// Record the forward pass of a `(batch, len)` token block on `g`.
///
/// `ids` is row-major `batch * len`; logits are `(batch * len, V)`.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    ids: &[u32],
    batch: usize,
    len: usize,
    trainable: bool,
) -> Result<Forward> {
    let c = &state.config;
    if len > c.max_context_length {
        return Err(CoreError::Model(format!("input length {len} exceeds context {}", c.max_context_length)));
    }
    if ids.len() != batch * len {
        return Err(CoreError::Model(format!("{} ids for a {batch}x{len} batch", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
        return Err(CoreError::Model(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
    }
    let params: Vec<Var> =
        state.params.iter().map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) }).collect();
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("parameter list matches config");

    let (d, h, hd) = (c.d_model, c.n_heads, c.head_dim());
    let tok: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let wte = next();
    let mut x = g.embedding_gather(wte, &tok)?;
    if c.positional == Positional::LearnedAbsolute {
        let wpe = next();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pe = g.embedding_gather(wpe, &pos)?;
        x = g.add(x, pe)?;
    }
    let mut residuals = vec![x];
    let att_scale = 1.0 / (hd as f64).sqrt();
    for _ in 0..c.n_layers {
        let (ln1g, ln1b, wqkv, bqkv, wo, bo) = (next(), next(), next(), next(), next(), next());
        let (ln2g, ln2b, wfc, bfc, wproj, bproj) = (next(), next(), next(), next(), next(), next());
        let hn = g.layer_norm(x, ln1g, ln1b)?;
        let qkv = g.matmul(hn, wqkv)?;
        let qkv = g.add_bias(qkv, bqkv)?;
        let layout = |offset| HeadLayout { batch, len, heads: h, head_dim: hd, cols: 3 * d, offset };
        let mut q = g.split_heads(qkv, layout(0))?;
        let mut k = g.split_heads(qkv, layout(d))?;
        let v = g.split_heads(qkv, layout(2 * d))?;
        if c.positional == Positional::Rotary {
            q = g.rotary(q, c.rotary_base)?;
            k = g.rotary(k, c.rotary_base)?;
        }
        let s = g.batched_matmul(q, k, true)?;
        let s = g.scale(s, att_scale)?;
        let s = g.causal_mask(s)?;
        let a = g.softmax(s)?;
        let o = g.batched_matmul(a, v, false)?;
        let o = g.merge_heads(o, batch, h)?;
        let o = g.matmul(o, wo)?;
        let o = g.add_bias(o, bo)?;
        x = g.add(x, o)?;
        let hn = g.layer_norm(x, ln2g, ln2b)?;
        let f = g.matmul(hn, wfc)?;
        let f = g.add_bias(f, bfc)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, wproj)?;
        let f = g.add_bias(f, bproj)?;
        x = g.add(x, f)?;
        residuals.push(x);
    }
    let (lnfg, lnfb, wu) = (next(), next(), next());
    let hn = g.layer_norm(x, lnfg, lnfb)?;
    let logits = g.matmul(hn, wu)?;
    Ok(Forward { logits, residuals, params })
}

/// Logits `(batch, len, V)` for equal-length token rows.
pub fn forward<T: Real>(state: &ModelState<T>, rows: &[Vec<u32>]) -> Result<Tensor<T>> {
    let len = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != len) || len == 0 {
        return Err(CoreError::Model("forward needs non-empty rows of equal length".into()));
    }
    let ids: Vec<u32> = rows.concat();
    let mut g = Graph::new().with_finite_checks(false);
    let f = forward_graph(&mut g, state, &ids, rows.len(), len, false)?;
    let v = state.config.vocab_size;
    Ok(g.value(f.logits).clone().reshape(vec![rows.len(), len, v])?)
}

/// Token block, next-token targets and per-position loss weights for a
/// batch: each document's mean token loss, averaged over documents.
pub fn batch_targets(docs: &[&TokenizedDoc]) -> Result<(Vec<u32>, usize, Vec<usize>, Vec<f64>)> {
    let len = docs.iter().map(|d| d.len()).max().unwrap_or(0);
    if len < 2 {
        return Err(CoreError::Training("batch has no predictable tokens".into()));
    }
    let b = docs.len() as f64;
    let mut ids = Vec::with_capacity(docs.len() * len);
    let mut targets = Vec::with_capacity(docs.len() * len);
    let mut weights = Vec::with_capacity(docs.len() * len);
    for d in docs {
        let n = d.len();
        if n < 2 {
            return Err(CoreError::Training("document has no predictable tokens".into()));
        }
        let w = 1.0 / ((n - 1) as f64 * b);
        for t in 0..len {
            ids.push(d.ids[t]);
            if t + 1 < n {
                targets.push(d.ids[t + 1] as usize);
                weights.push(w);
            } else {
                targets.push(0);
                weights.push(0.0);
            }
        }
    }
    Ok((ids, len, targets, weights))
}

/// Batch loss and per-parameter gradients.
pub fn loss_and_grads<T: Real>(state: &ModelState<T>, docs: &[&TokenizedDoc]) -> Result<(f64, Vec<Vec<T>>)> {
    let (ids, len, targets, weights) = batch_targets(docs)?;
    let mut g = Graph::new();
    let f = forward_graph(&mut g, state, &ids, docs.len(), len, true)?;
    let loss = g.cross_entropy_weighted(f.logits, &targets, &weights)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let per_param = f
        .params
        .iter()
        .zip(&state.params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.len()))
        .collect();
    Ok((value, per_param))
}

/// Per-document losses (mean over predictable tokens), no gradients.
pub fn doc_losses<T: Real>(state: &ModelState<T>, docs: &[&TokenizedDoc]) -> Result<Vec<f64>> {
    let (ids, len, targets, _) = batch_targets(docs)?;
    let mut g = Graph::new().with_finite_checks(false);
    let f = forward_graph(&mut g, state, &ids, docs.len(), len, false)?;
    let logits = g.value(f.logits).data();
    let v = state.config.vocab_size;
    let mut out = Vec::with_capacity(docs.len());
    for (b, d) in docs.iter().enumerate() {
        let n = d.len();
        let mut total = 0.0;
        for t in 0..n - 1 {
            let row = &logits[(b * len + t) * v..(b * len + t + 1) * v];
            total += log_softmax_at(row, targets[b * len + t]);
        }
        out.push(-total / (n - 1) as f64);
    }
    Ok(out)
}

fn log_softmax_at<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
    let z: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    row[target].as_f64() - max - z.ln()
}

/// Relative error of each parameter's gradient against central differences
/// with step `h`, for the batch loss over `docs`.
pub fn model_gradcheck(state: &ModelState<f64>, docs: &[&TokenizedDoc], h: f64) -> Result<Vec<(String, f64)>> {
    let (_, analytic) = loss_and_grads(state, docs)?;
    let mut out = Vec::new();
    for (k, name) in state.param_names().into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic[k].len());
        for j in 0..analytic[k].len() {
            let mut plus = state.clone();
            plus.params[k].data_mut()[j] += h;
            let mut minus = state.clone();
            minus.params[k].data_mut()[j] -= h;
            numeric.push((loss_and_grads(&plus, docs)?.0 - loss_and_grads(&minus, docs)?.0) / (2.0 * h));
        }
        out.push((name, iml_numerics::check::relative_error(&analytic[k], &numeric)));
    }
    Ok(out)
}

/// Gradient of one document's mean token loss, flattened in parameter order.
pub fn doc_grad<T: Real>(state: &ModelState<T>, doc: &TokenizedDoc) -> Result<Vec<T>> {
    if doc.len() < 2 {
        return Err(CoreError::Analysis("document has no unmasked targets".into()));
    }
    let (_, grads) = loss_and_grads(state, &[doc])?;
    Ok(grads.concat())
}

/// Residual stream after `layer` (0 = embeddings) at `position`.
pub fn extract_activations<T: Real>(state: &ModelState<T>, ids: &[u32], layer: usize, position: usize) -> Result<Vec<T>> {
    if layer > state.config.n_layers {
        return Err(CoreError::Model(format!("layer {layer} > n_layers {}", state.config.n_layers)));
    }
    if position >= ids.len() {
        return Err(CoreError::Model(format!("position {position} outside input of {} tokens", ids.len())));
    }
    let mut g = Graph::new().with_finite_checks(false);
    let f = forward_graph(&mut g, state, ids, 1, ids.len(), false)?;
    let d = state.config.d_model;
    Ok(g.value(f.residuals[layer]).data()[position * d..(position + 1) * d].to_vec())
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax<T: Real>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of one prompt; the stop token is not included.
pub fn generate_greedy<T: Real>(state: &ModelState<T>, prompt: &[u32], max_new: usize, stop_id: u32) -> Result<Vec<u32>> {
    Ok(generate_greedy_batch(state, &[prompt.to_vec()], max_new, stop_id)?.remove(0))
}

/// Greedy decoding for many prompts. Prompts of equal length are decoded
/// together; results are in input order.
pub fn generate_greedy_batch<T: Real>(
    state: &ModelState<T>,
    prompts: &[Vec<u32>],
    max_new: usize,
    stop_id: u32,
) -> Result<Vec<Vec<u32>>> {
    const CHUNK: usize = 512;
    let mut out = vec![Vec::new(); prompts.len()];
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        if p.is_empty() {
            return Err(CoreError::Model("empty prompt".into()));
        }
        by_len.entry(p.len()).or_default().push(i);
    }
    let v = state.config.vocab_size;
    for (len0, idx) in by_len {
        for chunk in idx.chunks(CHUNK) {
            let mut rows: Vec<Vec<u32>> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let mut done = vec![false; chunk.len()];
            for step in 0..max_new {
                let len = len0 + step;
                if len > state.config.max_context_length {
                    break;
                }
                let active: Vec<usize> = (0..chunk.len()).filter(|&j| !done[j]).collect();
                if active.is_empty() {
                    break;
                }
                let ids: Vec<u32> = active.iter().flat_map(|&j| rows[j].iter().copied()).collect();
                let mut g = Graph::new().with_finite_checks(false);
                let f = forward_graph(&mut g, state, &ids, active.len(), len, false)?;
                let logits = g.value(f.logits).data();
                for (a, &j) in active.iter().enumerate() {
                    let row = &logits[(a * len + len - 1) * v..(a * len + len) * v];
                    let next = argmax(row);
                    if next == stop_id {
                        done[j] = true;
                    } else {
                        rows[j].push(next);
                        out[chunk[j]].push(next);
                    }
                }
            }
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"IMLCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    vocab_hash: String,
    precision: String,
    params: Vec<(String, Vec<usize>)>,
    extra: Vec<(String, Vec<usize>)>,
    extra_meta: serde_json::Value,
}

/// Tensors stored alongside the model (optimizer state).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointExtra<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// Write a checkpoint: 8-byte magic, little-endian `u64` header length,
/// JSON header (config, step, vocab hash, element type, tensor names and
/// shapes), then every tensor's values little-endian in header order.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    state: &ModelState<T>,
    vocab_hash: &str,
    extra: &CheckpointExtra<T>,
) -> Result<()> {
    let header = CheckpointHeader {
        config: state.config.clone(),
        step: state.step,
        vocab_hash: vocab_hash.to_string(),
        precision: T::NAME.to_string(),
        params: state.config.param_shapes(),
        extra: extra.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        extra_meta: extra.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in state.params.iter().chain(extra.tensors.iter().map(|(_, t)| t)) {
        for &v in t.data() {
            match T::NAME {
                "f32" => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CoreError::io(path, e))
}

/// Read a checkpoint written by [`save_checkpoint`] with the same element
/// type. Returns the model, its vocabulary hash and the extra tensors.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelState<T>, String, CheckpointExtra<T>)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let bad = |m: &str| CoreError::Parse(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
    if header.precision != T::NAME {
        return Err(bad(&format!("checkpoint holds {} values, {} requested", header.precision, T::NAME)));
    }
    header.config.validate()?;
    if header.params != header.config.param_shapes() {
        return Err(bad("parameter table does not match config"));
    }
    let width = if T::NAME == "f32" { 4 } else { 8 };
    let mut pos = hend;
    let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let end = pos + n * width;
        if end > bytes.len() {
            return Err(bad("truncated payload"));
        }
        let data: Vec<T> = bytes[pos..end]
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        pos = end;
        Ok(Tensor::new(shape.to_vec(), data)?)
    };
    let mut params = Vec::new();
    for (_, shape) in &header.params {
        params.push(read(shape)?);
    }
    let mut tensors = Vec::new();
    for (name, shape) in &header.extra {
        tensors.push((name.clone(), read(shape)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((
        ModelState { config: header.config, params, step: header.step },
        header.vocab_hash,
        CheckpointExtra { meta: header.extra_meta, tensors },
    ))
}
