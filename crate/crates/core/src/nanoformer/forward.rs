use std::collections::HashMap;

use super::nodes::{all_nodes, parents_of, EdgeKey, NodeId, PatchPlan, Slot, Source};
use super::{Model, SlotMode};
use crate::error::{Error, Result};
use crate::ndtensor::{Graph, Scalar, Tensor, Var};

/// Everything recorded by one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    pub tokens: Vec<usize>,
    /// Residual-stream contribution `[seq, d_model]` of every writing node,
    /// indexed by computation order (embed first; logits has none).
    pub outputs: Vec<Tensor<T>>,
    /// Attention weights `[seq, seq]` per head, indexed `layer * n_heads + head`.
    pub attention: Vec<Tensor<T>>,
    /// Residual stream after the embedding (index 0) and after each layer.
    pub residuals: Vec<Tensor<T>>,
    /// `[seq, vocab]`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn output(&self, model: &Model<T>, node: NodeId) -> &Tensor<T> {
        &self.outputs[node.order(model.config())]
    }

    pub fn attention(&self, model: &Model<T>, layer: usize, head: usize) -> &Tensor<T> {
        &self.attention[layer * model.config().n_heads + head]
    }

    /// Final-position logits.
    pub fn last_logits(&self) -> &[T] {
        self.logits.row(self.seq_len() - 1)
    }

    fn check_against(&self, model: &Model<T>, what: &str) -> Result<()> {
        let cfg = model.config();
        let ok = self.outputs.len() == all_nodes(cfg).len() - 1
            && self.attention.len() == cfg.n_layers * cfg.n_heads
            && self
                .outputs
                .iter()
                .all(|o| o.shape() == [self.seq_len(), cfg.d_model])
            && self.logits.shape() == [self.seq_len(), cfg.vocab_size];
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("{what} trace was not produced by this model")))
        }
    }
}

/// How each node assembles its slot inputs.
pub(crate) enum Inputs<'a, T> {
    /// Standard residual stream. With `handles`, every slot reads through its
    /// own identity node so gradients per slot are available.
    Residual { handles: bool },
    /// Per-edge assembly from the current pass or the corrupt trace.
    Patched {
        corrupt: &'a ActivationTrace<T>,
        plan: &'a PatchPlan,
    },
}

pub(crate) struct RunOptions<'a, T> {
    pub inputs: Inputs<'a, T>,
    /// Replace one node's output by a gradient-tracked leaf.
    pub override_node: Option<(NodeId, Tensor<T>)>,
}

impl<'a, T> RunOptions<'a, T> {
    pub fn plain() -> Self {
        RunOptions {
            inputs: Inputs::Residual { handles: false },
            override_node: None,
        }
    }
}

/// Handles into the tape after a forward pass.
pub(crate) struct Run {
    /// Node outputs indexed by computation order (writing nodes only).
    pub outputs: Vec<Var>,
    pub attention: Vec<Var>,
    /// Only populated for residual-stream runs.
    pub residuals: Vec<Var>,
    pub slot_inputs: Vec<((NodeId, Slot), Var)>,
    /// `[batch * seq, vocab]`.
    pub logits: Var,
    pub override_leaf: Option<Var>,
}

fn validate_tokens<T: Scalar>(model: &Model<T>, seqs: &[Vec<usize>]) -> Result<usize> {
    let cfg = model.config();
    let t = seqs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    if t == 0 || t > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {t} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    for s in seqs {
        if s.len() != t {
            return Err(Error::Input("sequences in a batch must have equal length".into()));
        }
        if let Some(&bad) = s.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(t)
}

struct LnCache {
    entries: Vec<(Var, Var)>,
}

impl LnCache {
    fn norm<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        if let Some(&(_, y)) = self.entries.iter().find(|(k, _)| *k == x) {
            return Ok(y);
        }
        let y = g.layer_norm(x, gamma, beta)?;
        self.entries.push((x, y));
        Ok(y)
    }
}

/// Records a forward pass of `seqs` (all of equal length) on `g`.
pub(crate) fn run<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    params: &[Var],
    seqs: &[Vec<usize>],
    opts: RunOptions<'_, T>,
) -> Result<Run> {
    let cfg = model.config();
    let lay = model.layout();
    let t = validate_tokens(model, seqs)?;
    let b = seqs.len();
    let dh = cfg.d_head();
    let patched = match &opts.inputs {
        Inputs::Patched { corrupt, plan } => {
            if b != 1 {
                return Err(Error::Input("patched runs take a single sequence".into()));
            }
            corrupt.check_against(model, "corrupt")?;
            if corrupt.seq_len() != t {
                return Err(Error::Input(format!(
                    "clean length {t} != corrupt length {}",
                    corrupt.seq_len()
                )));
            }
            plan.validate(cfg)?;
            Some((*corrupt, *plan))
        }
        Inputs::Residual { .. } => None,
    };
    let handles = matches!(opts.inputs, Inputs::Residual { handles: true });
    let n_writers = all_nodes(cfg).len() - 1;
    let mut outputs: Vec<Option<Var>> = vec![None; n_writers];
    let mut corrupt_vars: HashMap<usize, Var> = HashMap::new();
    let mut slot_inputs = Vec::new();
    let mut attention = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    let mut residuals = Vec::new();
    let mut override_leaf = None;

    // Embedding node.
    let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let set_output = |g: &mut Graph<T>, node: NodeId, computed: Var, ov: &mut Option<Var>| -> Result<Var> {
        if let Some((target, value)) = &opts.override_node {
            if *target == node {
                if value.shape() != g.shape(computed) {
                    return Err(Error::shape_mismatch(
                        "override",
                        value.shape(),
                        g.shape(computed),
                    ));
                }
                let leaf = g.param(value.clone());
                *ov = Some(leaf);
                return Ok(leaf);
            }
        }
        Ok(computed)
    };
    let tok = g.embedding(params[lay.tok_emb], &ids)?;
    let pos = g.embedding(params[lay.pos_emb], &positions)?;
    let emb = g.add(tok, pos)?;
    let emb = set_output(g, NodeId::Embed, emb, &mut override_leaf)?;
    outputs[0] = Some(emb);
    let mut resid = emb;
    residuals.push(resid);

    // Assembles the input of one slot.
    let mut slot_input = |g: &mut Graph<T>,
                          outputs: &[Option<Var>],
                          resid: Var,
                          child: NodeId,
                          slot: Slot,
                          slot_inputs: &mut Vec<((NodeId, Slot), Var)>|
     -> Result<Var> {
        let v = match patched {
            None if handles => g.identity(resid),
            None => resid,
            Some((corrupt, plan)) => {
                let mut acc: Option<Var> = None;
                for p in parents_of(cfg, child) {
                    let idx = p.order(cfg);
                    let src = match plan.source(&EdgeKey::new(p, child, slot)) {
                        Source::Clean => outputs[idx].expect("parent computed before child"),
                        Source::Corrupt => *corrupt_vars
                            .entry(idx)
                            .or_insert_with(|| g.constant(corrupt.outputs[idx].clone())),
                    };
                    acc = Some(match acc {
                        None => src,
                        Some(a) => g.add(a, src)?,
                    });
                }
                acc.expect("every reading node has the embedding as a parent")
            }
        };
        if handles || patched.is_some() {
            slot_inputs.push(((child, slot), v));
        }
        Ok(v)
    };

    for (l, li) in lay.layers.iter().enumerate() {
        let mut cache = LnCache {
            entries: Vec::new(),
        };
        let (g1, b1) = (params[li.ln1_g], params[li.ln1_b]);
        let layer_in = resid;
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let node = NodeId::Head { layer: l, head: h };
            let (q_in, k_in, v_in) = match cfg.slot_mode {
                SlotMode::Qkv => (
                    slot_input(g, &outputs, layer_in, node, Slot::Q, &mut slot_inputs)?,
                    slot_input(g, &outputs, layer_in, node, Slot::K, &mut slot_inputs)?,
                    slot_input(g, &outputs, layer_in, node, Slot::V, &mut slot_inputs)?,
                ),
                SlotMode::Single => {
                    let x = slot_input(g, &outputs, layer_in, node, Slot::In, &mut slot_inputs)?;
                    (x, x, x)
                }
            };
            let mut project = |g: &mut Graph<T>, x: Var, w: usize| -> Result<Var> {
                let xn = cache.norm(g, x, g1, b1)?;
                let wh = g.slice(params[w], 1, h * dh, dh)?;
                let y = g.matmul(xn, wh)?;
                g.reshape(y, &[b, t, dh])
            };
            let q = project(g, q_in, li.w_q)?;
            let k = project(g, k_in, li.w_k)?;
            let v = project(g, v_in, li.w_v)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt());
            let attn = g.causal_softmax(scores)?;
            attention.push(attn);
            let z = g.matmul(attn, v)?;
            let z = g.reshape(z, &[b * t, dh])?;
            let wo = g.slice(params[li.w_o], 0, h * dh, dh)?;
            let out = g.matmul(z, wo)?;
            let out = set_output(g, node, out, &mut override_leaf)?;
            outputs[node.order(cfg)] = Some(out);
            head_outs.push(out);
        }
        for &out in &head_outs {
            resid = g.add(resid, out)?;
        }
        let node = NodeId::Mlp { layer: l };
        let x = slot_input(g, &outputs, resid, node, Slot::In, &mut slot_inputs)?;
        let xn = g.layer_norm(x, params[li.ln2_g], params[li.ln2_b])?;
        let hdn = g.matmul(xn, params[li.w_in])?;
        let hdn = g.add_bias(hdn, params[li.b_in])?;
        let hdn = g.gelu(hdn);
        let out = g.matmul(hdn, params[li.w_out])?;
        let out = g.add_bias(out, params[li.b_out])?;
        let out = set_output(g, node, out, &mut override_leaf)?;
        outputs[node.order(cfg)] = Some(out);
        resid = g.add(resid, out)?;
        residuals.push(resid);
    }

    let x = slot_input(g, &outputs, resid, NodeId::Logits, Slot::In, &mut slot_inputs)?;
    let logits = unembed(g, model, params, x)?;
    if patched.is_some() {
        residuals.clear();
    }
    Ok(Run {
        outputs: outputs.into_iter().map(|o| o.expect("all nodes computed")).collect(),
        attention,
        residuals,
        slot_inputs,
        logits,
        override_leaf,
    })
}

/// Final layer norm followed by the unembedding.
pub(crate) fn unembed<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, params: &[Var], x: Var) -> Result<Var> {
    let lay = model.layout();
    let xn = g.layer_norm(x, params[lay.lnf_g], params[lay.lnf_b])?;
    g.matmul(xn, params[lay.w_u])
}

fn collect_trace<T: Scalar>(g: &Graph<T>, run: &Run, tokens: &[usize]) -> ActivationTrace<T> {
    let t = tokens.len();
    ActivationTrace {
        tokens: tokens.to_vec(),
        outputs: run.outputs.iter().map(|&v| g.value(v).clone()).collect(),
        attention: run
            .attention
            .iter()
            .map(|&v| g.value(v).clone().reshaped([t, t]).expect("single sequence"))
            .collect(),
        residuals: run.residuals.iter().map(|&v| g.value(v).clone()).collect(),
        logits: g.value(run.logits).clone(),
    }
}

/// Forward pass over one sequence, returning `[seq, vocab]` logits and the
/// full activation trace.
pub fn forward<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<(Tensor<T>, ActivationTrace<T>)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let seqs = [tokens.to_vec()];
    let r = run(&mut g, model, &params, &seqs, RunOptions::plain())?;
    let trace = collect_trace(&g, &r, tokens);
    Ok((trace.logits.clone(), trace))
}

/// Logits `[batch, seq, vocab]` for equal-length sequences, without a trace.
pub fn forward_batch<T: Scalar>(model: &Model<T>, seqs: &[Vec<usize>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let r = run(&mut g, model, &params, seqs, RunOptions::plain())?;
    let t = seqs[0].len();
    g.value(r.logits)
        .clone()
        .reshaped([seqs.len(), t, model.config().vocab_size])
}

/// Result of a patched pass.
#[derive(Debug, Clone)]
pub struct PatchedRun<T> {
    pub logits: Tensor<T>,
    /// Attention weights `[seq, seq]` per head as computed under the patch.
    pub attention: Vec<Tensor<T>>,
}

/// Forward pass on `clean_tokens` where every slot input is assembled edge by
/// edge: clean edges carry the parent's output from this pass, corrupt edges
/// the parent's output recorded in `corrupt_trace`.
pub fn forward_patched<T: Scalar>(
    model: &Model<T>,
    clean_tokens: &[usize],
    clean_trace: &ActivationTrace<T>,
    corrupt_trace: &ActivationTrace<T>,
    plan: &PatchPlan,
) -> Result<PatchedRun<T>> {
    clean_trace.check_against(model, "clean")?;
    if clean_trace.tokens != clean_tokens {
        return Err(Error::Input("clean trace does not match clean tokens".into()));
    }
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let seqs = [clean_tokens.to_vec()];
    let r = run(
        &mut g,
        model,
        &params,
        &seqs,
        RunOptions {
            inputs: Inputs::Patched {
                corrupt: corrupt_trace,
                plan,
            },
            override_node: None,
        },
    )?;
    let t = clean_tokens.len();
    Ok(PatchedRun {
        logits: g.value(r.logits).clone(),
        attention: r
            .attention
            .iter()
            .map(|&v| g.value(v).clone().reshaped([t, t]).expect("single sequence"))
            .collect(),
    })
}

/// Scalar readout of a `[seq, vocab]` logits tensor recorded on a tape.
pub trait LogitMetric {
    fn record<T: Scalar>(&self, g: &mut Graph<T>, logits: Var) -> Result<Var>;
}

/// `logit(target) − logit(foil)` at the final position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogitDifference {
    pub target: usize,
    pub foil: usize,
}

impl LogitDifference {
    pub fn eval<T: Scalar>(&self, logits: &Tensor<T>) -> T {
        let last = logits.row(logits.numel() / logits.last_dim() - 1);
        last[self.target] - last[self.foil]
    }
}

impl LogitMetric for LogitDifference {
    fn record<T: Scalar>(&self, g: &mut Graph<T>, logits: Var) -> Result<Var> {
        let rows = g.shape(logits)[0];
        let last = g.slice(logits, 0, rows - 1, 1)?;
        let a = g.slice(last, 1, self.target, 1)?;
        let b = g.slice(last, 1, self.foil, 1)?;
        let diff = g.sub(a, b)?;
        Ok(g.sum(diff))
    }
}

/// Gradient of `metric` with respect to node `node`'s output, with that output
/// set to `corrupt + alpha·(clean − corrupt)` and everything downstream
/// recomputed on the clean tokens.
pub fn forward_interpolated<T: Scalar, M: LogitMetric>(
    model: &Model<T>,
    clean_trace: &ActivationTrace<T>,
    corrupt_trace: &ActivationTrace<T>,
    alpha: f64,
    node: NodeId,
    metric: &M,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha {alpha} outside [0, 1]")));
    }
    if !node.writes() {
        return Err(Error::Input("logits node has no residual output".into()));
    }
    clean_trace.check_against(model, "clean")?;
    corrupt_trace.check_against(model, "corrupt")?;
    let idx = node.order(model.config());
    let value = interpolate(&corrupt_trace.outputs[idx], &clean_trace.outputs[idx], alpha)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let seqs = [clean_trace.tokens.clone()];
    let r = run(
        &mut g,
        model,
        &params,
        &seqs,
        RunOptions {
            inputs: Inputs::Residual { handles: false },
            override_node: Some((node, value)),
        },
    )?;
    let m = metric.record(&mut g, r.logits)?;
    let grads = g.backward(m)?;
    let leaf = r.override_leaf.expect("override applied");
    Ok(grads.get_or_zeros(leaf, g.shape(leaf)))
}

/// `from + alpha·(to − from)`.
pub fn interpolate<T: Scalar>(from: &Tensor<T>, to: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let a = T::from_f64_lossy(alpha);
    from.zip_with(to, "interpolate", |x, y| x + a * (y - x))
}

/// Per-slot input gradients at one point of the embedding path from corrupt
/// to clean.
pub(crate) struct SlotGradients<T> {
    pub grads: Vec<((NodeId, Slot), Tensor<T>)>,
}

pub(crate) fn slot_gradients<T: Scalar, M: LogitMetric>(
    model: &Model<T>,
    tokens: &[usize],
    embed: Tensor<T>,
    metric: &M,
) -> Result<SlotGradients<T>> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let seqs = [tokens.to_vec()];
    let r = run(
        &mut g,
        model,
        &params,
        &seqs,
        RunOptions {
            inputs: Inputs::Residual { handles: true },
            override_node: Some((NodeId::Embed, embed)),
        },
    )?;
    let m = metric.record(&mut g, r.logits)?;
    let grads = g.backward(m)?;
    Ok(SlotGradients {
        grads: r
            .slot_inputs
            .iter()
            .map(|&(key, v)| (key, grads.get_or_zeros(v, g.shape(v))))
            .collect(),
    })
}
