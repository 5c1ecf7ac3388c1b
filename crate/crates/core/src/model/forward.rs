//! Graph construction for both model kinds and the training objective.

use std::collections::{BTreeMap, HashMap};

use ckl_autodiff::{AttentionSpec, AutodiffError, Graph, NodeId, Tensor};

use super::{unmask, Expansion, MaskedExample, ModelKind, ModelState};
use crate::error::{CklError, Result};
use crate::vocab::{EOS, PAD};

/// Gradient per trainable parameter name.
pub type Grads = BTreeMap<String, Vec<f32>>;

/// One training sequence in the form the model consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LmItem {
    /// Encoder input and the full decoder target.
    Seq2Seq { src: Vec<usize>, tgt: Vec<usize> },
    /// Next-token prediction over `tokens`; positions before `loss_from` carry no loss.
    Causal { tokens: Vec<usize>, loss_from: usize },
}

impl LmItem {
    /// Encoder-decoder models reconstruct the span; decoder-only models see
    /// the restored sentence followed by `</s>`.
    pub fn from_masked(kind: ModelKind, example: &MaskedExample) -> Self {
        match kind {
            ModelKind::EncoderDecoder => LmItem::Seq2Seq {
                src: example.input.clone(),
                tgt: example.target.clone(),
            },
            ModelKind::DecoderOnly => {
                let mut tokens = unmask(example);
                tokens.push(EOS);
                LmItem::Causal { tokens, loss_from: 0 }
            }
        }
    }
}

/// Right-padded id matrix with per-position validity.
#[derive(Debug, Clone)]
pub(crate) struct Padded {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl Padded {
    pub fn new(seqs: &[&[usize]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for i in 0..len {
                ids.push(s.get(i).copied().unwrap_or(PAD));
                valid.push(i < s.len());
            }
        }
        Self {
            batch: seqs.len(),
            len,
            ids,
            valid,
        }
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.len).collect()
    }
}

fn self_spec(p: &Padded, heads: usize, causal: bool) -> AttentionSpec {
    AttentionSpec {
        batch: p.batch,
        q_len: p.len,
        kv_len: p.len,
        heads,
        causal,
        key_valid: Some(p.valid.clone()),
    }
}

fn divergence(e: AutodiffError) -> CklError {
    match e {
        AutodiffError::NonFinite { node, op } => {
            CklError::Divergence(format!("non-finite activation at node {node} ({op})"))
        }
        other => other.into(),
    }
}

pub(crate) struct Net<'m> {
    pub g: Graph,
    model: &'m ModelState,
    leaves: HashMap<&'m str, NodeId>,
    train: bool,
    lora: HashMap<&'m str, Vec<(String, String, f64)>>,
}

impl<'m> Net<'m> {
    pub fn new(model: &'m ModelState, train: bool) -> Self {
        let mut lora: HashMap<&'m str, Vec<(String, String, f64)>> = HashMap::new();
        for (i, x) in model.arch().expansions.iter().enumerate() {
            if let Expansion::Lora { targets, scaling, .. } = x {
                for t in targets {
                    lora.entry(t.as_str()).or_default().push((
                        format!("x{i}.lora.{t}.a"),
                        format!("x{i}.lora.{t}.b"),
                        *scaling as f64,
                    ));
                }
            }
        }
        Self {
            g: Graph::new(),
            model,
            leaves: HashMap::new(),
            train,
            lora,
        }
    }

    /// Leaf node for a parameter, created on first use.
    fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let (key, tensor) = self
            .model
            .params
            .get_key_value(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        let trainable = self.train && !self.model.is_frozen(key);
        let id = self.g.leaf(tensor.clone().with_requires_grad(trainable));
        self.leaves.insert(key.as_str(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.g.leaf(t)
    }

    fn linear(&mut self, x: NodeId, w: &str) -> NodeId {
        let wn = self.p(w);
        let mut y = self.g.matmul(x, wn);
        if let Some(pairs) = self.lora.get(w).cloned() {
            for (a, b, scaling) in pairs {
                let an = self.p(&a);
                let bn = self.p(&b);
                let down = self.g.matmul(x, an);
                let mut up = self.g.matmul(down, bn);
                if scaling != 1.0 {
                    up = self.g.scale(up, scaling);
                }
                y = self.g.add(y, up);
            }
        }
        y
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.layer_norm(x, g, b)
    }

    fn attention(&mut self, xq: NodeId, xkv: NodeId, prefix: &str, spec: AttentionSpec) -> NodeId {
        let q = self.linear(xq, &format!("{prefix}.q"));
        let k = self.linear(xkv, &format!("{prefix}.k"));
        let v = self.linear(xkv, &format!("{prefix}.v"));
        let a = self.g.attention(q, k, v, spec);
        self.linear(a, &format!("{prefix}.o"))
    }

    fn layer(&mut self, x: NodeId, prefix: &str, spec: &AttentionSpec, cross: Option<(NodeId, &AttentionSpec)>) -> NodeId {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"));
        let a = self.attention(h, h, &format!("{prefix}.attn"), spec.clone());
        let mut x = self.g.add(x, a);
        if let Some((mem, cspec)) = cross {
            let h = self.layer_norm(x, &format!("{prefix}.lnx"));
            let a = self.attention(h, mem, &format!("{prefix}.cross"), cspec.clone());
            x = self.g.add(x, a);
        }
        let h = self.layer_norm(x, &format!("{prefix}.ln2"));
        let f = self.linear(h, &format!("{prefix}.ff.w1"));
        let f = self.g.relu(f);
        let f = self.linear(f, &format!("{prefix}.ff.w2"));
        self.g.add(x, f)
    }

    fn embed(&mut self, prefix: &str, p: &Padded) -> NodeId {
        let tok = self.p(&format!("{prefix}.tok_emb"));
        let pos = self.p(&format!("{prefix}.pos_emb"));
        let t = self.g.embedding(tok, p.ids.clone());
        let q = self.g.embedding(pos, p.positions());
        self.g.add(t, q)
    }

    /// Runs the main stack plus its expansions. Returns the final hidden states.
    fn main_stack(&mut self, prefix: &str, x0: NodeId, spec: &AttentionSpec, cross: Option<(NodeId, &AttentionSpec)>) -> NodeId {
        let arch = self.model.arch();
        let mut x = x0;
        let mut hidden = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            x = self.layer(x, &format!("{prefix}.{l}"), spec, cross);
            hidden.push(x);
        }
        let mut h = self.layer_norm(x, &format!("{prefix}.ln_f"));
        if prefix != arch.main_stack() {
            return h;
        }
        for (i, expansion) in arch.expansions.iter().enumerate() {
            match expansion {
                Expansion::Lora { .. } => {}
                Expansion::KAdapter { layers } => {
                    let mut prev: Option<NodeId> = None;
                    for (j, &at) in layers.iter().enumerate() {
                        let input = match prev {
                            Some(p) => self.g.add(hidden[at], p),
                            None => hidden[at],
                        };
                        prev = Some(self.layer(input, &format!("x{i}.adapter.{j}"), spec, None));
                    }
                    if let Some(last) = prev {
                        let fused = self.linear(last, &format!("x{i}.adapter.fuse"));
                        h = self.g.add(h, fused);
                    }
                }
                Expansion::Modular { heads, layers, .. } => {
                    let mut s = self.linear(x0, &format!("x{i}.modular.in"));
                    let small_spec = AttentionSpec {
                        heads: *heads,
                        ..spec.clone()
                    };
                    for l in 0..*layers {
                        s = self.layer(s, &format!("x{i}.modular.{l}"), &small_spec, None);
                    }
                    let s = self.layer_norm(s, &format!("x{i}.modular.ln_f"));
                    let projected = self.linear(s, &format!("x{i}.modular.proj"));
                    h = self.g.add(h, projected);
                }
            }
        }
        h
    }

    /// Encoder memory `[batch * src_len, d_model]`.
    pub fn encode(&mut self, src: &Padded) -> NodeId {
        let heads = self.model.arch().heads;
        let x0 = self.embed("enc", src);
        let spec = self_spec(src, heads, false);
        self.main_stack("enc", x0, &spec, None)
    }

    /// Decoder logits `[batch * dec_len, vocab]` over encoder memory `mem`.
    pub fn decode(&mut self, mem: NodeId, src: &Padded, dec_in: &Padded) -> NodeId {
        let heads = self.model.arch().heads;
        let y0 = self.embed("dec", dec_in);
        let spec = self_spec(dec_in, heads, true);
        let cross = AttentionSpec {
            batch: src.batch,
            q_len: dec_in.len,
            kv_len: src.len,
            heads,
            causal: false,
            key_valid: Some(src.valid.clone()),
        };
        let h = self.main_stack("dec", y0, &spec, Some((mem, &cross)));
        let head = self.p("lm_head");
        self.g.matmul(h, head)
    }

    /// Decoder-only logits `[batch * len, vocab]`.
    pub fn causal(&mut self, tokens: &Padded) -> NodeId {
        let heads = self.model.arch().heads;
        let x0 = self.embed("dec", tokens);
        let spec = self_spec(tokens, heads, true);
        let h = self.main_stack("dec", x0, &spec, None);
        let head = self.p("lm_head");
        self.g.matmul(h, head)
    }

    pub fn forward(&mut self) -> Result<Tensor> {
        self.g.forward().cloned().map_err(divergence)
    }

    fn grads(&self) -> Grads {
        self.leaves
            .iter()
            .filter(|(_, &id)| self.g.value(id).is_some_and(Tensor::requires_grad))
            .map(|(&name, &id)| {
                let n = self.g.value(id).map_or(0, Tensor::numel);
                let g = self.g.grad(id).map_or_else(|| vec![0.0; n], <[f32]>::to_vec);
                (name.to_string(), g)
            })
            .collect()
    }
}

fn check_len(model: &ModelState, len: usize, what: &str) -> Result<()> {
    let max = model.arch().max_len;
    if len == 0 || len > max {
        return Err(CklError::Config(format!("{what} length {len} outside 1..={max}")));
    }
    Ok(())
}

/// Builds the loss graph for a homogeneous batch; returns the net and its loss node.
fn build_loss<'m>(model: &'m ModelState, items: &[LmItem], train: bool) -> Result<Net<'m>> {
    if items.is_empty() {
        return Err(CklError::Config("empty batch".into()));
    }
    let kind = model.arch().kind;
    let mut net = Net::new(model, train);
    match kind {
        ModelKind::EncoderDecoder => {
            let mut srcs = Vec::with_capacity(items.len());
            let mut dec_ins = Vec::with_capacity(items.len());
            let mut tgts = Vec::with_capacity(items.len());
            for item in items {
                let LmItem::Seq2Seq { src, tgt } = item else {
                    return Err(CklError::Config("causal item given to an encoder-decoder model".into()));
                };
                check_len(model, src.len(), "encoder input")?;
                check_len(model, tgt.len(), "decoder target")?;
                srcs.push(src.as_slice());
                let mut d = vec![PAD];
                d.extend_from_slice(&tgt[..tgt.len() - 1]);
                dec_ins.push(d);
                tgts.push(tgt.as_slice());
            }
            let src = Padded::new(&srcs);
            let dec_refs: Vec<&[usize]> = dec_ins.iter().map(Vec::as_slice).collect();
            let dec_in = Padded::new(&dec_refs);
            let targets = (0..items.len())
                .flat_map(|b| (0..dec_in.len).map(move |i| (b, i)))
                .map(|(b, i)| tgts[b].get(i).copied())
                .collect();
            let mem = net.encode(&src);
            let logits = net.decode(mem, &src, &dec_in);
            net.g.cross_entropy(logits, targets);
        }
        ModelKind::DecoderOnly => {
            let mut ins = Vec::with_capacity(items.len());
            let mut tgts = Vec::with_capacity(items.len());
            for item in items {
                let LmItem::Causal { tokens, loss_from } = item else {
                    return Err(CklError::Config("seq2seq item given to a decoder-only model".into()));
                };
                check_len(model, tokens.len(), "sequence")?;
                let mut d = vec![PAD];
                d.extend_from_slice(&tokens[..tokens.len() - 1]);
                ins.push(d);
                tgts.push((tokens.as_slice(), *loss_from));
            }
            let refs: Vec<&[usize]> = ins.iter().map(Vec::as_slice).collect();
            let input = Padded::new(&refs);
            let targets = (0..items.len())
                .flat_map(|b| (0..input.len).map(move |i| (b, i)))
                .map(|(b, i)| {
                    let (t, from) = tgts[b];
                    if i < from {
                        None
                    } else {
                        t.get(i).copied()
                    }
                })
                .collect();
            let logits = net.causal(&input);
            net.g.cross_entropy(logits, targets);
        }
    }
    Ok(net)
}

fn finite_loss(t: &Tensor) -> Result<f32> {
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(CklError::Divergence(format!("loss is {v}")));
    }
    Ok(v)
}

/// Mean token cross-entropy of a batch of masked examples, without gradients.
pub fn forward_loss(model: &ModelState, batch: &[MaskedExample]) -> Result<f32> {
    let kind = model.arch().kind;
    let items: Vec<LmItem> = batch.iter().map(|e| LmItem::from_masked(kind, e)).collect();
    items_loss(model, &items)
}

pub fn items_loss(model: &ModelState, items: &[LmItem]) -> Result<f32> {
    let mut net = build_loss(model, items, false)?;
    finite_loss(&net.forward()?)
}

/// Loss and gradients for every trainable parameter.
pub fn loss_and_grads(model: &ModelState, items: &[LmItem]) -> Result<(f32, Grads)> {
    let mut net = build_loss(model, items, true)?;
    let loss = finite_loss(&net.forward()?)?;
    net.g.backward(&Tensor::scalar(1.0))?;
    Ok((loss, net.grads()))
}

/// Teacher-forced logits `[target_len, vocab]` for one item.
pub fn output_logits(model: &ModelState, item: &LmItem) -> Result<Tensor> {
    let mut net = Net::new(model, false);
    match item {
        LmItem::Seq2Seq { src, tgt } => {
            check_len(model, src.len(), "encoder input")?;
            check_len(model, tgt.len(), "decoder target")?;
            let src = Padded::new(&[src]);
            let mut d = vec![PAD];
            d.extend_from_slice(&tgt[..tgt.len() - 1]);
            let dec_in = Padded::new(&[&d]);
            let mem = net.encode(&src);
            net.decode(mem, &src, &dec_in);
        }
        LmItem::Causal { tokens, .. } => {
            check_len(model, tokens.len(), "sequence")?;
            let mut d = vec![PAD];
            d.extend_from_slice(&tokens[..tokens.len() - 1]);
            net.causal(&Padded::new(&[&d]));
        }
    }
    net.forward()
}
