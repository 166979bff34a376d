use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenizedSample, EOS};
use crate::error::{Error, Result};
use crate::lip::{encode_graph, init_lip_params, LipEncoderConfig, LipFeature, PreparedRois};
use crate::tensor::{no_grad, AttnMask, Binder, Graph, Initializer, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width `C`.
    pub dim: usize,
    /// Decoder depth `L`.
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Longest token sequence the positional table covers.
    pub max_len: usize,
    /// Prompt length `K`.
    pub prefix_len: usize,
    /// Depth `T` of the shared prompt encoder.
    pub prompt_layers: usize,
    pub lip: LipEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            max_len: 160,
            prefix_len: 15,
            prompt_layers: 1,
            lip: LipEncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_mult == 0 {
            return bad("dim, layers, heads and ff_mult must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.prefix_len == 0 || self.prompt_layers == 0 || self.max_len == 0 {
            return bad("prefix_len, prompt_layers and max_len must be positive".into());
        }
        self.lip.validate()
    }
}

/// Frozen base LM tensors are `lm.*`; everything else trains.
pub fn is_trainable(name: &str) -> bool {
    !name.starts_with("lm.")
}

/// Gates are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !name.ends_with(".gate")
}

fn block_params(p: &mut ParamSet, init: &Initializer, name: &str, c: usize, ff: usize) {
    let mut w = |s: &str, r: usize, k: usize, fan: usize| {
        let n = format!("{name}.{s}");
        p.insert(n.clone(), init.fan_in(&n, r, k, fan));
    };
    for s in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
        w(s, c, c, c);
    }
    w("ff.w1", c, ff, c);
    w("ff.b1", 1, ff, c);
    w("ff.w2", ff, c, ff);
    w("ff.b2", 1, c, ff);
    p.insert(format!("{name}.ln1.g"), Tensor::filled(1, c, 1.0));
    p.insert(format!("{name}.ln2.g"), Tensor::filled(1, c, 1.0));
}

/// Base LM tensors (`lm.*`).
pub fn init_base(cfg: &ModelConfig, vocab: usize, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let init = Initializer::new(seed);
    let c = cfg.dim;
    let mut p = ParamSet::new();
    p.insert("lm.tok_emb", init.uniform("lm.tok_emb", vocab, c, 1.0));
    p.insert("lm.pos_emb", init.uniform("lm.pos_emb", cfg.max_len, c, 0.5));
    for l in 0..cfg.layers {
        block_params(&mut p, &init, &format!("lm.layer{l}"), c, c * cfg.ff_mult);
    }
    p.insert("lm.ln_f.g", Tensor::filled(1, c, 1.0));
    p.insert("lm.out.w", init.fan_in("lm.out.w", c, vocab, c));
    Ok(p)
}

/// Adapter tensors (`adapter.*`) and the lip encoder (`lip.*`). Gates start
/// at zero, so a fresh adapter leaves the base LM's output unchanged.
pub fn init_adapter(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let init = Initializer::new(seed);
    let (c, k, v) = (cfg.dim, cfg.prefix_len, cfg.lip.lip_len);
    let mut p = ParamSet::new();
    let lip_w = "adapter.lip_proj.w";
    p.insert(lip_w, init.fan_in(lip_w, cfg.lip.lip_dim, c, cfg.lip.lip_dim));
    p.insert("adapter.lip_proj.b", init.fan_in("adapter.lip_proj.b", 1, c, cfg.lip.lip_dim));
    p.insert("adapter.lip_pos", init.uniform("adapter.lip_pos", v, c, 0.5));
    for l in 0..cfg.layers {
        for s in ["p_v", "p_a"] {
            let n = format!("adapter.layer{l}.{s}");
            p.insert(n.clone(), init.fan_in(&n, k, c, c));
        }
        p.insert(format!("adapter.layer{l}.gate"), Tensor::scalar(0.0));
    }
    for t in 0..cfg.prompt_layers {
        block_params(&mut p, &init, &format!("adapter.enc.layer{t}"), c, c * cfg.ff_mult);
    }
    p.extend(init_lip_params(&cfg.lip, seed ^ 0x11b)?);
    Ok(p)
}

/// Shapes seen at one decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShapes {
    /// `Concat(Projection(E), P_v)`.
    pub prompt_input: (usize, usize),
    /// Rows kept from the prompt encoder output.
    pub prompt_slice: (usize, usize),
    /// Prefix followed by the token states.
    pub attended: (usize, usize),
}

fn transformer_block(
    g: &mut Graph,
    b: &mut Binder<'_>,
    name: &str,
    h: Var,
    heads: usize,
    mask: AttnMask,
    prefix: Option<(Var, Var)>,
) -> (Var, Option<(usize, usize)>) {
    let p = |s: &str| format!("{name}.{s}");
    let ln1 = b.var(g, &p("ln1.g"));
    let x = g.layer_norm(h, ln1);
    let wq = b.var(g, &p("attn.wq"));
    let wk = b.var(g, &p("attn.wk"));
    let wv = b.var(g, &p("attn.wv"));
    let wo = b.var(g, &p("attn.wo"));
    let (attn, attended) = match prefix {
        None => {
            let (q, k, v) = (g.matmul(x, wq), g.matmul(x, wk), g.matmul(x, wv));
            (g.attention(q, k, v, heads, mask), None)
        }
        Some((a, gate)) => {
            let (kp, n) = (g.value(a).rows(), g.value(x).rows());
            let seq = g.concat_rows(a, x);
            let attended = g.value(seq).shape();
            let a = g.slice_rows(seq, 0, kp);
            let t = g.slice_rows(seq, kp, n);
            // token path is computed exactly as without a prefix
            let (q, k, v) = (g.matmul(t, wq), g.matmul(t, wk), g.matmul(t, wv));
            let tok = g.attention(q, k, v, heads, mask);
            let (pk, pv) = (g.matmul(a, wk), g.matmul(a, wv));
            let pre = g.attention(q, pk, pv, heads, AttnMask::Full);
            let pre = g.scale(pre, gate);
            (g.add(tok, pre), Some(attended))
        }
    };
    let o = g.matmul(attn, wo);
    let h = g.add(h, o);
    let ln2 = b.var(g, &p("ln2.g"));
    let x = g.layer_norm(h, ln2);
    let (w1, b1) = (b.var(g, &p("ff.w1")), b.var(g, &p("ff.b1")));
    let (w2, b2) = (b.var(g, &p("ff.w2")), b.var(g, &p("ff.b2")));
    let f = g.linear(x, w1, Some(b1));
    let f = g.gelu(f);
    let f = g.linear(f, w2, Some(b2));
    (g.add(h, f), attended)
}

/// Per-layer adaptation prompts `A_l = Encoder(Concat(Proj(E), P_v_l))[:K] + P_a_l`
/// from the lip feature node `e`.
pub fn adapter_prefixes(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    e: Var,
) -> Result<(Vec<Var>, Vec<LayerShapes>)> {
    let expected = (cfg.lip.lip_len, b.params().expect("adapter.lip_proj.w").rows());
    let found = g.value(e).shape();
    if found != expected {
        return Err(Error::ShapeMismatch {
            name: "lip feature".into(),
            expected,
            found,
        });
    }
    let (w, bias, pos) = (
        b.var(g, "adapter.lip_proj.w"),
        b.var(g, "adapter.lip_proj.b"),
        b.var(g, "adapter.lip_pos"),
    );
    let proj = g.linear(e, w, Some(bias));
    let proj = g.add(proj, pos);
    let mut prefixes = Vec::with_capacity(cfg.layers);
    let mut shapes = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pv = b.var(g, &format!("adapter.layer{l}.p_v"));
        let input = g.concat_rows(proj, pv);
        let prompt_input = g.value(input).shape();
        let mut h = input;
        for t in 0..cfg.prompt_layers {
            h = transformer_block(g, b, &format!("adapter.enc.layer{t}"), h, cfg.heads, AttnMask::Full, None).0;
        }
        let gl = g.slice_rows(h, 0, cfg.prefix_len);
        let prompt_slice = g.value(gl).shape();
        let pa = b.var(g, &format!("adapter.layer{l}.p_a"));
        prefixes.push(g.add(gl, pa));
        shapes.push(LayerShapes {
            prompt_input,
            prompt_slice,
            attended: (0, 0),
        });
    }
    Ok((prefixes, shapes))
}

/// Decoder over `ids`, optionally with one adaptation prompt per layer.
/// Returns the `I × |vocab|` logits node and the attended-sequence shapes.
pub fn decoder_graph(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    ids: &[usize],
    prefixes: Option<&[Var]>,
) -> Result<(Var, Vec<(usize, usize)>)> {
    if ids.is_empty() {
        return Err(Error::Precondition("token sequence is empty".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::Precondition(format!(
            "sequence of {} tokens exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    let vocab = b.params().expect("lm.tok_emb").rows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Precondition(format!("token id {bad} out of range for vocabulary of {vocab}")));
    }
    if let Some(p) = prefixes {
        if p.len() != cfg.layers {
            return Err(Error::Precondition(format!("{} prefixes for {} layers", p.len(), cfg.layers)));
        }
    }
    let tok = b.var(g, "lm.tok_emb");
    let pos = b.var(g, "lm.pos_emb");
    let te = g.embedding(tok, ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pe = g.embedding(pos, &positions);
    let mut h = g.add(te, pe);
    let mut attended = Vec::new();
    for l in 0..cfg.layers {
        let prefix = prefixes.map(|p| (p[l], b.var(g, &format!("adapter.layer{l}.gate"))));
        let (next, shape) = transformer_block(g, b, &format!("lm.layer{l}"), h, cfg.heads, AttnMask::Causal, prefix);
        h = next;
        attended.extend(shape);
    }
    let lnf = b.var(g, "lm.ln_f.g");
    let h = g.layer_norm(h, lnf);
    let out = b.var(g, "lm.out.w");
    Ok((g.matmul(h, out), attended))
}

/// Plain causal LM logits.
pub fn base_forward(ids: &[usize], params: &ParamSet, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, &no_grad);
    let (logits, _) = decoder_graph(&mut g, &mut b, cfg, ids, None)?;
    Ok(g.value(logits).clone())
}

/// Logits with lip-conditioned prefixes, plus the per-layer shape trace.
pub fn adapter_forward(
    ids: &[usize],
    e: &LipFeature,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Tensor, Vec<LayerShapes>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, &no_grad);
    let ev = g.constant(e.e.clone());
    let (prefixes, mut shapes) = adapter_prefixes(&mut g, &mut b, cfg, ev)?;
    let (logits, attended) = decoder_graph(&mut g, &mut b, cfg, ids, Some(&prefixes))?;
    for (s, a) in shapes.iter_mut().zip(attended) {
        s.attended = a;
    }
    Ok((g.value(logits).clone(), shapes))
}

/// Mean negative log-likelihood over masked positions.
pub fn ce_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Precondition("loss mask selects no positions".into()));
    }
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Precondition("targets and mask must match the logits rows".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Precondition(format!("target id {t} out of range")));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, mask, n as f64);
    Ok(g.value(loss).item())
}

/// Natural-log probability of each `ids[i + 1]` given `ids[..=i]`.
pub fn token_logprobs(ids: &[usize], params: &ParamSet, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Err(Error::Precondition("need at least two tokens to score".into()));
    }
    let logits = base_forward(&ids[..ids.len() - 1], params, cfg)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row[ids[i + 1]] - lse
        })
        .collect())
}

/// Greedy continuation of `prompt` until EOS or `max_new` tokens. Without a
/// lip feature the plain decoder is used. The EOS itself is not returned.
pub fn generate(
    prompt: &[usize],
    e: Option<&LipFeature>,
    params: &ParamSet,
    cfg: &ModelConfig,
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Precondition("prompt is empty".into()));
    }
    if max_new < 1 {
        return Err(Error::Precondition("max_len must be at least 1".into()));
    }
    // prefixes depend only on E, so compute them once
    let prefixes: Option<Vec<Tensor>> = match e {
        None => None,
        Some(e) => {
            let mut g = Graph::new();
            let mut b = Binder::new(params, &no_grad);
            let ev = g.constant(e.e.clone());
            let (p, _) = adapter_prefixes(&mut g, &mut b, cfg, ev)?;
            Some(p.iter().map(|v| g.value(*v).clone()).collect())
        }
    };
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ids.len() < cfg.max_len {
        let mut g = Graph::new();
        let mut b = Binder::new(params, &no_grad);
        let vars: Option<Vec<Var>> = prefixes
            .as_ref()
            .map(|p| p.iter().map(|t| g.constant(t.clone())).collect());
        let (logits, _) = decoder_graph(&mut g, &mut b, cfg, &ids, vars.as_deref())?;
        let lv = g.value(logits);
        let last = lv.row(lv.rows() - 1);
        if !last.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits during generation".into()));
        }
        let next = argmax(last);
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked cross-entropy of one teacher-forced sample, summed and divided
/// by `denom`. With `rois` the lip encoder and adapters take part.
pub fn loss_graph(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    sample: &TokenizedSample,
    rois: Option<&PreparedRois>,
    denom: f64,
) -> Result<Var> {
    let prefixes = match rois {
        None => None,
        Some(r) => {
            let e = encode_graph(g, b, &cfg.lip, r)?;
            Some(adapter_prefixes(g, b, cfg, e)?.0)
        }
    };
    let (logits, _) = decoder_graph(g, b, cfg, &sample.inputs, prefixes.as_deref())?;
    Ok(g.cross_entropy(logits, &sample.targets, &sample.mask, denom))
}
