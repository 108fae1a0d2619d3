//! Decoder-only transformer with residual-stream read/write hooks.
//!
//! Pre-norm blocks with RMS normalization, learned positional embeddings,
//! tied input/output embeddings, ReLU MLPs, no biases. The residual stream
//! site `(L, t)` is the vector entering layer `L` at position `t`; at
//! `L = 0` that is the token embedding plus the positional embedding.

mod tokenizer;
pub mod train;

pub use tokenizer::{last_entity_token, TokenId, Tokenizer};

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::TensorBlock;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Derived from the world's tokenizer; 0 until then.
    #[serde(default)]
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub train: TrainParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Stop once sampled dev attribute accuracy reaches this.
    pub stop_dev_accuracy: f64,
    /// Prompts sampled per in-training dev evaluation.
    pub eval_sample: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 20_000,
            eval_every: 250,
            stop_dev_accuracy: 0.98,
            eval_sample: 512,
        }
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 64,
            seed: 0,
            train: TrainParams::default(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::spec(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::spec("n_layers must be at least 2".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
    norm1: Tensor,
    norm2: Tensor,
}

/// A trained (or freshly initialized) model. Immutable during evaluation;
/// forward passes only read.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tokenizer: Tokenizer,
    emb: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
}

/// Residual-stream hook applied before layer `layer` runs.
pub struct Hook<'a> {
    pub layer: usize,
    pub pos: usize,
    pub action: HookAction<'a>,
}

pub enum HookAction<'a> {
    /// Copy the site vector out.
    Read(&'a mut Vec<f32>),
    /// Replace the site vector with a function of its current value.
    Replace(&'a dyn Fn(&[f32]) -> Vec<f32>),
}

impl LanguageModel {
    pub fn new(mut cfg: LmConfig, tokenizer: Tokenizer) -> Result<Self> {
        cfg.vocab_size = tokenizer.vocab_size();
        cfg.validate()?;
        let d = cfg.d_model;
        let mut r = rng::stream(cfg.seed, "lm-init");
        let bound = 1.0 / (d as f32).sqrt();
        let mut mat = |rows: usize, cols: usize, b: f32| {
            Tensor::uniform(vec![rows, cols], b, &mut r)
        };
        let emb = mat(cfg.vocab_size, d, 0.08);
        let pos = mat(cfg.max_seq_len, d, 0.08);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                wq: mat(d, d, bound),
                wk: mat(d, d, bound),
                wv: mat(d, d, bound),
                wo: mat(d, d, bound),
                w1: mat(d, cfg.d_ff, bound),
                w2: mat(cfg.d_ff, d, 1.0 / (cfg.d_ff as f32).sqrt()),
                norm1: Tensor::filled(vec![1, d], 1.0),
                norm2: Tensor::filled(vec![1, d], 1.0),
            })
            .collect();
        Ok(LanguageModel {
            cfg,
            tokenizer,
            emb,
            pos,
            blocks,
            final_norm: Tensor::filled(vec![1, d], 1.0),
        })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    fn check_len(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence".to_string()));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let mut x = Tensor::zeros(vec![tokens.len(), d]);
        for (t, &id) in tokens.iter().enumerate() {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::Index(format!("token id {id} out of vocabulary")));
            }
            let row = x.row_slice_mut(t);
            for (o, (&e, &p)) in row
                .iter_mut()
                .zip(self.emb.row_slice(id as usize).iter().zip(self.pos.row_slice(t)))
            {
                *o = e + p;
            }
        }
        Ok(x)
    }

    fn apply_block(&self, x: &mut Tensor, block: &Block) {
        let t_len = x.rows();
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut xn = Tensor::zeros(vec![t_len, d]);
        for t in 0..t_len {
            crate::tensor::rms_norm_row(
                x.row_slice(t),
                block.norm1.data(),
                xn.row_slice_mut(t),
            );
        }
        let q = xn.matmul(&block.wq).unwrap();
        let k = xn.matmul(&block.wk).unwrap();
        let v = xn.matmul(&block.wv).unwrap();

        // Causal attention, head by head, position by position.
        let mut ctx = Tensor::zeros(vec![t_len, d]);
        let mut scores = vec![0.0f32; t_len];
        let mut probs = vec![0.0f32; t_len];
        for h in 0..self.cfg.n_heads {
            let off = h * dh;
            for t in 0..t_len {
                let qrow = &q.row_slice(t)[off..off + dh];
                for s in 0..=t {
                    let krow = &k.row_slice(s)[off..off + dh];
                    scores[s] = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<f32>() * scale;
                }
                crate::tensor::softmax_row(&scores[..=t], &mut probs[..=t]);
                let out = &mut ctx.row_slice_mut(t)[off..off + dh];
                for s in 0..=t {
                    let p = probs[s];
                    let vrow = &v.row_slice(s)[off..off + dh];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        let attn = ctx.matmul(&block.wo).unwrap();
        for (xv, &av) in x.data_mut().iter_mut().zip(attn.data()) {
            *xv += av;
        }

        let mut xn2 = Tensor::zeros(vec![t_len, d]);
        for t in 0..t_len {
            crate::tensor::rms_norm_row(
                x.row_slice(t),
                block.norm2.data(),
                xn2.row_slice_mut(t),
            );
        }
        let mut hmid = xn2.matmul(&block.w1).unwrap();
        for v in hmid.data_mut() {
            *v = v.max(0.0);
        }
        let mlp = hmid.matmul(&block.w2).unwrap();
        for (xv, &mv) in x.data_mut().iter_mut().zip(mlp.data()) {
            *xv += mv;
        }
    }

    fn run_hooks(&self, x: &mut Tensor, layer: usize, hooks: &mut [Hook<'_>]) -> Result<()> {
        for hook in hooks.iter_mut() {
            if hook.layer != layer {
                continue;
            }
            if hook.layer >= self.cfg.n_layers || hook.pos >= x.rows() {
                return Err(Error::Site(format!(
                    "hook site (layer {}, pos {}) out of range",
                    hook.layer, hook.pos
                )));
            }
            match &mut hook.action {
                HookAction::Read(out) => {
                    out.clear();
                    out.extend_from_slice(x.row_slice(hook.pos));
                }
                HookAction::Replace(f) => {
                    let new = f(x.row_slice(hook.pos));
                    if new.len() != self.cfg.d_model {
                        return Err(Error::shape(format!(
                            "hook replacement width {} != d_model {}",
                            new.len(),
                            self.cfg.d_model
                        )));
                    }
                    x.row_slice_mut(hook.pos).copy_from_slice(&new);
                }
            }
        }
        Ok(())
    }

    /// Plain forward pass. Hooks fire once each, at the residual vector
    /// entering their layer; a replacement propagates to everything
    /// downstream. Returns `[T x V]` logits.
    pub fn forward(&self, tokens: &[TokenId], hooks: &mut [Hook<'_>]) -> Result<Tensor> {
        self.check_len(tokens)?;
        for hook in hooks.iter() {
            if hook.layer >= self.cfg.n_layers || hook.pos >= tokens.len() {
                return Err(Error::Site(format!(
                    "hook site (layer {}, pos {}) out of range",
                    hook.layer, hook.pos
                )));
            }
        }
        let mut x = self.embed(tokens)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            self.run_hooks(&mut x, layer, hooks)?;
            self.apply_block(&mut x, block);
        }
        let t_len = x.rows();
        let d = self.cfg.d_model;
        let mut xf = Tensor::zeros(vec![t_len, d]);
        for t in 0..t_len {
            crate::tensor::rms_norm_row(
                x.row_slice(t),
                self.final_norm.data(),
                xf.row_slice_mut(t),
            );
        }
        xf.matmul(&self.emb.transpose())
    }

    /// Residual stream entering `layer`, without building a graph.
    pub fn resid_at(&self, tokens: &[TokenId], layer: usize) -> Result<Tensor> {
        self.check_len(tokens)?;
        if layer >= self.cfg.n_layers {
            return Err(Error::Site(format!(
                "layer {layer} out of range (n_layers {})",
                self.cfg.n_layers
            )));
        }
        let mut x = self.embed(tokens)?;
        for block in &self.blocks[..layer] {
            self.apply_block(&mut x, block);
        }
        Ok(x)
    }

    /// Greedy continuation; ties go to the lowest token id.
    pub fn decode_greedy(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.decode_greedy_hooked(prompt, max_new, &mut [])
    }

    /// Greedy continuation with hooks re-applied on every step (hook
    /// positions refer to prompt positions, which do not move).
    pub fn decode_greedy_hooked(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        hooks: &mut [Hook<'_>],
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::contract("decode_greedy: empty prompt".to_string()));
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.cfg.max_seq_len {
                break;
            }
            let logits = self.forward(&tokens, hooks)?;
            let next = argmax_lowest(logits.row_slice(logits.rows() - 1));
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    // ── Graph-mode forward (training) ───────────────────────────────────

    /// Register every weight on the tape. `trainable` marks them as
    /// parameters; otherwise they are constants the tape differentiates
    /// through without accumulating gradients.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> GraphWeights {
        let reg = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.leaf(t.clone())
            }
        };
        GraphWeights {
            emb: reg(g, &self.emb),
            pos: reg(g, &self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    wq: reg(g, &b.wq),
                    wk: reg(g, &b.wk),
                    wv: reg(g, &b.wv),
                    wo: reg(g, &b.wo),
                    w1: reg(g, &b.w1),
                    w2: reg(g, &b.w2),
                    norm1: reg(g, &b.norm1),
                    norm2: reg(g, &b.norm2),
                })
                .collect(),
            final_norm: reg(g, &self.final_norm),
        }
    }

    /// Packed-batch forward for training: all sequences padded to the same
    /// length and stacked as rows. Returns `[B*T x V]` logits.
    pub fn graph_forward(
        &self,
        g: &mut Graph,
        w: &GraphWeights,
        seqs: &[Vec<TokenId>],
        padded_len: usize,
    ) -> Result<Var> {
        let bos = self.tokenizer.bos;
        let mut flat_ids = Vec::with_capacity(seqs.len() * padded_len);
        let mut flat_pos = Vec::with_capacity(seqs.len() * padded_len);
        for s in seqs {
            self.check_len(s)?;
            for t in 0..padded_len {
                flat_ids.push(*s.get(t).unwrap_or(&bos) as usize);
                flat_pos.push(t);
            }
        }
        let te = g.gather_rows(w.emb, flat_ids)?;
        let tp = g.gather_rows(w.pos, flat_pos)?;
        let mut x = g.add(te, tp)?;
        let lens = vec![padded_len; seqs.len()];
        for layer in 0..self.cfg.n_layers {
            x = self.graph_block(g, w, x, layer, &lens)?;
        }
        let xf = g.rms_norm(x, w.final_norm)?;
        let embt = g.transpose(w.emb);
        g.matmul(xf, embt)
    }

    /// Continue a single sequence from its residual state entering
    /// `start_layer`; returns the final position's `[1 x V]` logits.
    pub fn graph_continue(
        &self,
        g: &mut Graph,
        w: &GraphWeights,
        resid: Var,
        start_layer: usize,
    ) -> Result<Var> {
        let t_len = g.value(resid).rows();
        let mut x = resid;
        let lens = vec![t_len];
        for layer in start_layer..self.cfg.n_layers {
            x = self.graph_block(g, w, x, layer, &lens)?;
        }
        let last = g.row_slice(x, t_len - 1, 1)?;
        let xf = g.rms_norm(last, w.final_norm)?;
        let embt = g.transpose(w.emb);
        g.matmul(xf, embt)
    }

    fn graph_block(
        &self,
        g: &mut Graph,
        w: &GraphWeights,
        x: Var,
        layer: usize,
        seq_lens: &[usize],
    ) -> Result<Var> {
        let b = &w.blocks[layer];
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let xn = g.rms_norm(x, b.norm1)?;
        let q = g.matmul(xn, b.wq)?;
        let k = g.matmul(xn, b.wk)?;
        let v = g.matmul(xn, b.wv)?;

        let mut seq_ctx = Vec::with_capacity(seq_lens.len());
        let mut row0 = 0;
        for &t_len in seq_lens {
            let mask = g.leaf(causal_mask(t_len));
            let qs = g.row_slice(q, row0, t_len)?;
            let ks = g.row_slice(k, row0, t_len)?;
            let vs = g.row_slice(v, row0, t_len)?;
            let mut head_ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.col_slice(qs, h * dh, dh)?;
                let kh = g.col_slice(ks, h * dh, dh)?;
                let vh = g.col_slice(vs, h * dh, dh)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, scale);
                let masked = g.add(scaled, mask)?;
                let probs = g.row_softmax(masked);
                head_ctx.push(g.matmul(probs, vh)?);
            }
            seq_ctx.push(g.concat_cols(&head_ctx)?);
            row0 += t_len;
        }
        let ctx = if seq_ctx.len() == 1 {
            seq_ctx[0]
        } else {
            g.concat_rows(&seq_ctx)?
        };
        let attn = g.matmul(ctx, b.wo)?;
        let x = g.add(x, attn)?;

        let xn2 = g.rms_norm(x, b.norm2)?;
        let h1 = g.matmul(xn2, b.w1)?;
        let h1 = g.relu(h1);
        let mlp = g.matmul(h1, b.w2)?;
        g.add(x, mlp)
    }

    /// Weight tensors in registration order, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.emb, &mut self.pos];
        for b in &mut self.blocks {
            v.push(&mut b.wq);
            v.push(&mut b.wk);
            v.push(&mut b.wv);
            v.push(&mut b.wo);
            v.push(&mut b.w1);
            v.push(&mut b.w2);
            v.push(&mut b.norm1);
            v.push(&mut b.norm2);
        }
        v.push(&mut self.final_norm);
        v
    }

    // ── Persistence ─────────────────────────────────────────────────────

    pub fn to_block(&self) -> TensorBlock {
        let mut block = TensorBlock::new();
        block.insert("emb", self.emb.clone());
        block.insert("pos", self.pos.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            block.insert(format!("layer{i}.wq"), b.wq.clone());
            block.insert(format!("layer{i}.wk"), b.wk.clone());
            block.insert(format!("layer{i}.wv"), b.wv.clone());
            block.insert(format!("layer{i}.wo"), b.wo.clone());
            block.insert(format!("layer{i}.w1"), b.w1.clone());
            block.insert(format!("layer{i}.w2"), b.w2.clone());
            block.insert(format!("layer{i}.norm1"), b.norm1.clone());
            block.insert(format!("layer{i}.norm2"), b.norm2.clone());
        }
        block.insert("final_norm", self.final_norm.clone());
        block
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.to_block().save(&dir.join("model.cdl1"))?;
        let sidecar = ModelSidecar {
            config: self.cfg.clone(),
            tokenizer: self.tokenizer.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Parse(e.to_string()))?;
        crate::pipeline::atomic_write(&dir.join("model.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar_path = dir.join("model.json");
        if !sidecar_path.exists() {
            return Err(Error::MissingArtifact(sidecar_path));
        }
        let sidecar: ModelSidecar =
            serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
                .map_err(|e| Error::Parse(format!("model.json: {e}")))?;
        let mut block = TensorBlock::load(&dir.join("model.cdl1"))?;
        let mut tokenizer = sidecar.tokenizer;
        tokenizer.rebuild_lookup();
        let cfg = sidecar.config;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Ok(Block {
                    wq: block.take(&format!("layer{i}.wq"))?,
                    wk: block.take(&format!("layer{i}.wk"))?,
                    wv: block.take(&format!("layer{i}.wv"))?,
                    wo: block.take(&format!("layer{i}.wo"))?,
                    w1: block.take(&format!("layer{i}.w1"))?,
                    w2: block.take(&format!("layer{i}.w2"))?,
                    norm1: block.take(&format!("layer{i}.norm1"))?,
                    norm2: block.take(&format!("layer{i}.norm2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LanguageModel {
            cfg,
            tokenizer,
            emb: block.take("emb")?,
            pos: block.take("pos")?,
            blocks,
            final_norm: block.take("final_norm")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    config: LmConfig,
    tokenizer: Tokenizer,
}

pub struct GraphWeights {
    pub emb: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
}

pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
    pub norm1: Var,
    pub norm2: Var,
}

fn causal_mask(t_len: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t_len, t_len]);
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            m.row_slice_mut(i)[j] = -1e9;
        }
    }
    m
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest(row: &[f32]) -> TokenId {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as TokenId
}
