//! Small recurrent encoder-decoder with additive attention.
//!
//! The encoder runs a single-gate recurrent cell in both directions and
//! concatenates the two states at each position. The decoder conditions
//! each step on the previous output word, its own state and an
//! attention-weighted context of the encoder annotations. Gradients are
//! computed by hand; see the finite-difference test at the bottom.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::subword::{build_vocab, BOS, EOS, RESERVED, UNK};

use super::statistical::Interner;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Cap on each side's vocabulary, reserved tokens included.
    pub vocab_size: usize,
    /// Half-width of the uniform initialization range.
    pub init_scale: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub beam_width: usize,
    /// Output length limit as a multiple of the input length (plus five).
    pub max_length_ratio: f64,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 32,
            vocab_size: 8000,
            init_scale: 0.1,
            clip_norm: 5.0,
            beam_width: 1,
            max_length_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CellLayout {
    wz: Block,
    uz: Block,
    bz: Block,
    wh: Block,
    uh: Block,
    bh: Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Layout {
    src_emb: Block,
    tgt_emb: Block,
    enc_fwd: CellLayout,
    enc_bwd: CellLayout,
    init_w: Block,
    init_b: Block,
    att_w: Block,
    att_u: Block,
    att_v: Block,
    dec: CellLayout,
    out_w: Block,
    out_b: Block,
    total: usize,
}

impl Layout {
    fn new(src_vocab: usize, tgt_vocab: usize, e: usize, h: usize) -> Self {
        let mut next = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block { offset: next, rows, cols };
            next += rows * cols;
            b
        };
        let cell = |input: usize, hidden: usize, block: &mut dyn FnMut(usize, usize) -> Block| CellLayout {
            wz: block(hidden, input),
            uz: block(hidden, hidden),
            bz: block(hidden, 1),
            wh: block(hidden, input),
            uh: block(hidden, hidden),
            bh: block(hidden, 1),
        };
        let src_emb = block(src_vocab, e);
        let tgt_emb = block(tgt_vocab, e);
        let enc_fwd = cell(e, h, &mut block);
        let enc_bwd = cell(e, h, &mut block);
        let init_w = block(h, 2 * h);
        let init_b = block(h, 1);
        let att_w = block(h, h);
        let att_u = block(h, 2 * h);
        let att_v = block(h, 1);
        let dec = cell(e + 2 * h, h, &mut block);
        let out_w = block(tgt_vocab, h + 2 * h + e);
        let out_b = block(tgt_vocab, 1);
        Self {
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd,
            init_w,
            init_b,
            att_w,
            att_u,
            att_v,
            dec,
            out_w,
            out_b,
            total: next,
        }
    }
}

fn slice<'a>(p: &'a [f64], b: &Block) -> &'a [f64] {
    &p[b.offset..b.offset + b.len()]
}

/// `W x + bias` for a row-major block.
fn affine(p: &[f64], w: &Block, x: &[f64], out: &mut [f64]) {
    let m = slice(p, w);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * w.cols..(r + 1) * w.cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dW += dy x^T` and `dx += W^T dy`.
fn affine_back(p: &[f64], g: &mut [f64], w: &Block, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    let gm = &mut g[w.offset..w.offset + w.len()];
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (gv, xv) in gm[r * w.cols..(r + 1) * w.cols].iter_mut().zip(x) {
            *gv += d * xv;
        }
    }
    if let Some(dx) = dx {
        let m = slice(p, w);
        for (r, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (dv, wv) in dx.iter_mut().zip(&m[r * w.cols..(r + 1) * w.cols]) {
                *dv += d * wv;
            }
        }
    }
}

fn add_to(g: &mut [f64], b: &Block, dy: &[f64]) {
    for (gv, d) in g[b.offset..b.offset + b.len()].iter_mut().zip(dy) {
        *gv += d;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, Default)]
struct CellTrace {
    input: Vec<f64>,
    prev: Vec<f64>,
    gate: Vec<f64>,
    cand: Vec<f64>,
    out: Vec<f64>,
}

fn cell_forward(p: &[f64], c: &CellLayout, input: Vec<f64>, prev: Vec<f64>) -> CellTrace {
    let h = c.bz.rows;
    let mut gate = slice(p, &c.bz).to_vec();
    affine(p, &c.wz, &input, &mut gate);
    affine(p, &c.uz, &prev, &mut gate);
    gate.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut cand = slice(p, &c.bh).to_vec();
    affine(p, &c.wh, &input, &mut cand);
    affine(p, &c.uh, &prev, &mut cand);
    cand.iter_mut().for_each(|v| *v = v.tanh());
    let out = (0..h)
        .map(|k| (1.0 - gate[k]) * prev[k] + gate[k] * cand[k])
        .collect();
    CellTrace { input, prev, gate, cand, out }
}

/// Backpropagates `d_out`; returns gradients for the input and previous state.
fn cell_backward(p: &[f64], g: &mut [f64], c: &CellLayout, t: &CellTrace, d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = d_out.len();
    let mut d_prev: Vec<f64> = (0..h).map(|k| d_out[k] * (1.0 - t.gate[k])).collect();
    let d_gate_pre: Vec<f64> = (0..h)
        .map(|k| d_out[k] * (t.cand[k] - t.prev[k]) * t.gate[k] * (1.0 - t.gate[k]))
        .collect();
    let d_cand_pre: Vec<f64> = (0..h)
        .map(|k| d_out[k] * t.gate[k] * (1.0 - t.cand[k] * t.cand[k]))
        .collect();
    let mut d_in = vec![0.0; t.input.len()];
    affine_back(p, g, &c.wz, &t.input, &d_gate_pre, Some(&mut d_in));
    affine_back(p, g, &c.uz, &t.prev, &d_gate_pre, Some(&mut d_prev));
    add_to(g, &c.bz, &d_gate_pre);
    affine_back(p, g, &c.wh, &t.input, &d_cand_pre, Some(&mut d_in));
    affine_back(p, g, &c.uh, &t.prev, &d_cand_pre, Some(&mut d_prev));
    add_to(g, &c.bh, &d_cand_pre);
    (d_in, d_prev)
}

/// Encoder annotations and the initial decoder state for one input.
struct Encoding {
    fwd: Vec<CellTrace>,
    bwd: Vec<CellTrace>,
    annotations: Vec<Vec<f64>>,
    /// `U_a h_j` for every position, reused by every decoder step.
    keys: Vec<Vec<f64>>,
    mean: Vec<f64>,
    init: Vec<f64>,
}

struct StepTrace {
    prev_word: usize,
    prev_state: Vec<f64>,
    att_hidden: Vec<Vec<f64>>,
    weights: Vec<f64>,
    cell: CellTrace,
    features: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionModel {
    pub settings: AttentionSettings,
    seed: u64,
    src_vocab: Interner,
    tgt_vocab: Interner,
    layout: Option<Layout>,
    params: Vec<f64>,
    #[serde(skip)]
    adam: Option<AdamState>,
    #[serde(skip)]
    phase: Option<Vec<(Vec<usize>, Vec<usize>)>>,
    #[serde(skip)]
    order: Vec<usize>,
    #[serde(skip)]
    cursor: usize,
    batches_drawn: u64,
}

impl PartialEq for AttentionModel {
    fn eq(&self, other: &Self) -> bool {
        self.settings == other.settings
            && self.src_vocab == other.src_vocab
            && self.tgt_vocab == other.tgt_vocab
            && self.params == other.params
    }
}

/// Loss and gradient for a batch. `loss` is the summed negative
/// log-likelihood averaged over sentences.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub tokens: usize,
    pub gradient: Vec<f64>,
}

impl BatchGradient {
    pub fn per_token_loss(&self, sentences: usize) -> f64 {
        self.loss * sentences as f64 / self.tokens.max(1) as f64
    }
}

impl AttentionModel {
    pub fn new(settings: AttentionSettings, seed: u64) -> Self {
        Self {
            settings,
            seed,
            src_vocab: Interner::default(),
            tgt_vocab: Interner::default(),
            layout: None,
            params: Vec::new(),
            adam: None,
            phase: None,
            order: Vec::new(),
            cursor: 0,
            batches_drawn: 0,
        }
    }

    /// Copy of the parameters without optimizer or phase state.
    pub fn snapshot(&self) -> AttentionModel {
        AttentionModel {
            settings: self.settings,
            seed: self.seed,
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            layout: self.layout,
            params: self.params.clone(),
            adam: None,
            phase: None,
            order: Vec::new(),
            cursor: 0,
            batches_drawn: self.batches_drawn,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.layout.is_some()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn target_vocab_size(&self) -> usize {
        self.tgt_vocab.len()
    }

    /// Checks that deserialized parts fit together, so that a loaded model
    /// cannot index out of bounds later.
    pub(crate) fn check_structure(&self) -> Result<(), String> {
        const MAX_DIM: usize = 1 << 12;
        let st = &self.settings;
        if st.embed_dim == 0 || st.hidden_dim == 0 || st.embed_dim > MAX_DIM || st.hidden_dim > MAX_DIM {
            return Err(format!("dimensions must be in 1..={MAX_DIM}"));
        }
        if st.beam_width == 0 || !(st.max_length_ratio >= 0.0 && st.max_length_ratio.is_finite()) {
            return Err("beam_width must be positive and max_length_ratio finite".into());
        }
        let Some(layout) = &self.layout else {
            return if self.params.is_empty() {
                Ok(())
            } else {
                Err("weights without a layout".into())
            };
        };
        for vocab in [&self.src_vocab, &self.tgt_vocab] {
            if !vocab.is_consistent() || RESERVED.iter().any(|r| vocab.get(r).is_none()) {
                return Err("vocabulary is missing reserved tokens or has duplicates".into());
            }
            if vocab.len() > self.params.len() {
                return Err("vocabulary larger than the weights".into());
            }
        }
        let expected = Layout::new(self.src_vocab.len(), self.tgt_vocab.len(), st.embed_dim, st.hidden_dim);
        if *layout != expected || self.params.len() != expected.total {
            return Err("weight layout does not match the settings and vocabularies".into());
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err("non-finite weight".into());
        }
        Ok(())
    }

    /// Fixes both vocabularies from `pairs` and draws the initial weights.
    /// Does nothing once the model is initialized.
    pub fn initialize(&mut self, pairs: &[(&Sentence, &Sentence)]) -> Result<(), ModelError> {
        if self.layout.is_some() {
            return Ok(());
        }
        let cap = self.settings.vocab_size;
        let src = build_vocab(pairs.iter().map(|p| p.0), cap).map_err(|e| ModelError::Config(e.to_string()))?;
        let tgt = build_vocab(pairs.iter().map(|p| p.1), cap).map_err(|e| ModelError::Config(e.to_string()))?;
        self.src_vocab = Interner::from(src.entries().iter().map(|e| e.0.clone()).collect::<Vec<_>>());
        self.tgt_vocab = Interner::from(tgt.entries().iter().map(|e| e.0.clone()).collect::<Vec<_>>());
        let layout = Layout::new(
            self.src_vocab.len(),
            self.tgt_vocab.len(),
            self.settings.embed_dim,
            self.settings.hidden_dim,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.settings.init_scale;
        let mut params: Vec<f64> = (0..layout.total).map(|_| rng.gen_range(-s..=s)).collect();
        for b in [&layout.enc_fwd.bz, &layout.enc_fwd.bh, &layout.enc_bwd.bz, &layout.enc_bwd.bh] {
            params[b.offset..b.offset + b.len()].fill(0.0);
        }
        for b in [&layout.dec.bz, &layout.dec.bh, &layout.init_b, &layout.out_b] {
            params[b.offset..b.offset + b.len()].fill(0.0);
        }
        self.params = params;
        self.layout = Some(layout);
        Ok(())
    }

    fn src_ids(&self, s: &Sentence) -> Vec<usize> {
        let unk = self.src_vocab.get(UNK).expect("reserved") as usize;
        s.tokens()
            .iter()
            .map(|w| self.src_vocab.get(w).map_or(unk, |i| i as usize))
            .collect()
    }

    fn tgt_ids(&self, s: &Sentence) -> Vec<usize> {
        let unk = self.tgt_vocab.get(UNK).expect("reserved") as usize;
        s.tokens()
            .iter()
            .map(|w| self.tgt_vocab.get(w).map_or(unk, |i| i as usize))
            .collect()
    }

    fn bos(&self) -> usize {
        self.tgt_vocab.get(BOS).expect("reserved") as usize
    }

    fn eos(&self) -> usize {
        self.tgt_vocab.get(EOS).expect("reserved") as usize
    }

    fn layout(&self) -> Result<&Layout, ModelError> {
        self.layout.as_ref().ok_or(ModelError::Untrained)
    }

    fn embedding(&self, b: &Block, id: usize) -> Vec<f64> {
        self.params[b.offset + id * b.cols..b.offset + (id + 1) * b.cols].to_vec()
    }

    fn encode(&self, l: &Layout, src: &[usize]) -> Encoding {
        let p = &self.params;
        let h = self.settings.hidden_dim;
        let n = src.len();
        let mut fwd = Vec::with_capacity(n);
        let mut state = vec![0.0; h];
        for &w in src {
            let t = cell_forward(p, &l.enc_fwd, self.embedding(&l.src_emb, w), state);
            state = t.out.clone();
            fwd.push(t);
        }
        let mut bwd: Vec<CellTrace> = Vec::with_capacity(n);
        let mut state = vec![0.0; h];
        for &w in src.iter().rev() {
            let t = cell_forward(p, &l.enc_bwd, self.embedding(&l.src_emb, w), state);
            state = t.out.clone();
            bwd.push(t);
        }
        bwd.reverse();
        let annotations: Vec<Vec<f64>> = (0..n)
            .map(|j| fwd[j].out.iter().chain(&bwd[j].out).copied().collect())
            .collect();
        let keys = annotations
            .iter()
            .map(|a| {
                let mut k = vec![0.0; h];
                affine(p, &l.att_u, a, &mut k);
                k
            })
            .collect();
        let mut mean = vec![0.0; 2 * h];
        for a in &annotations {
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v / n.max(1) as f64;
            }
        }
        let mut init = slice(p, &l.init_b).to_vec();
        affine(p, &l.init_w, &mean, &mut init);
        init.iter_mut().for_each(|v| *v = v.tanh());
        Encoding { fwd, bwd, annotations, keys, mean, init }
    }

    fn decode_step(&self, l: &Layout, enc: &Encoding, prev_word: usize, prev_state: &[f64]) -> StepTrace {
        let p = &self.params;
        let h = self.settings.hidden_dim;
        let mut query = vec![0.0; h];
        affine(p, &l.att_w, prev_state, &mut query);
        let v = slice(p, &l.att_v);
        let mut att_hidden = Vec::with_capacity(enc.keys.len());
        let mut weights = Vec::with_capacity(enc.keys.len());
        for key in &enc.keys {
            let hid: Vec<f64> = query.iter().zip(key).map(|(a, b)| (a + b).tanh()).collect();
            weights.push(hid.iter().zip(v).map(|(a, b)| a * b).sum());
            att_hidden.push(hid);
        }
        softmax(&mut weights);
        let mut context = vec![0.0; 2 * h];
        for (a, ann) in weights.iter().zip(&enc.annotations) {
            for (c, x) in context.iter_mut().zip(ann) {
                *c += a * x;
            }
        }
        let emb = self.embedding(&l.tgt_emb, prev_word);
        let input: Vec<f64> = emb.iter().chain(&context).copied().collect();
        let cell = cell_forward(p, &l.dec, input, prev_state.to_vec());
        let features: Vec<f64> = cell.out.iter().chain(&context).chain(&emb).copied().collect();
        let mut probs = slice(p, &l.out_b).to_vec();
        affine(p, &l.out_w, &features, &mut probs);
        softmax(&mut probs);
        StepTrace {
            prev_word,
            prev_state: prev_state.to_vec(),
            att_hidden,
            weights,
            cell,
            features,
            probs,
        }
    }

    /// Adds `scale * d(-log p(target | source))` to `g` and returns the
    /// unscaled negative log-likelihood.
    fn sentence_gradient(&self, l: &Layout, src: &[usize], tgt: &[usize], scale: f64, g: &mut [f64]) -> f64 {
        let p = &self.params;
        let h = self.settings.hidden_dim;
        let e = self.settings.embed_dim;
        let enc = self.encode(l, src);
        let mut steps = Vec::with_capacity(tgt.len() + 1);
        let mut prev_word = self.bos();
        let mut state = enc.init.clone();
        let mut nll = 0.0;
        let eos = self.eos();
        let gold: Vec<usize> = tgt.iter().copied().chain(std::iter::once(eos)).collect();
        for &y in &gold {
            let st = self.decode_step(l, &enc, prev_word, &state);
            nll -= st.probs[y].ln();
            state = st.cell.out.clone();
            prev_word = y;
            steps.push(st);
        }

        let n = src.len();
        let mut d_ann = vec![vec![0.0; 2 * h]; n];
        let mut d_keys = vec![vec![0.0; h]; n];
        let mut d_state = vec![0.0; h];
        for (st, &y) in steps.iter().zip(&gold).rev() {
            let mut d_logits: Vec<f64> = st.probs.iter().map(|v| v * scale).collect();
            d_logits[y] -= scale;
            let mut d_feat = vec![0.0; st.features.len()];
            affine_back(p, g, &l.out_w, &st.features, &d_logits, Some(&mut d_feat));
            add_to(g, &l.out_b, &d_logits);
            let mut d_out: Vec<f64> = d_feat[..h].to_vec();
            for (a, b) in d_out.iter_mut().zip(&d_state) {
                *a += b;
            }
            let mut d_ctx = d_feat[h..3 * h].to_vec();
            let mut d_emb = d_feat[3 * h..].to_vec();
            let (d_in, mut d_prev) = cell_backward(p, g, &l.dec, &st.cell, &d_out);
            for (a, b) in d_emb.iter_mut().zip(&d_in[..e]) {
                *a += b;
            }
            for (a, b) in d_ctx.iter_mut().zip(&d_in[e..]) {
                *a += b;
            }
            let tgt_row = l.tgt_emb.offset + st.prev_word * e;
            for (gv, d) in g[tgt_row..tgt_row + e].iter_mut().zip(&d_emb) {
                *gv += d;
            }

            let d_w: Vec<f64> = enc
                .annotations
                .iter()
                .map(|ann| ann.iter().zip(&d_ctx).map(|(a, b)| a * b).sum())
                .collect();
            for (j, ann_grad) in d_ann.iter_mut().enumerate() {
                for (a, c) in ann_grad.iter_mut().zip(&d_ctx) {
                    *a += st.weights[j] * c;
                }
            }
            let dot: f64 = st.weights.iter().zip(&d_w).map(|(a, b)| a * b).sum();
            let v = slice(p, &l.att_v).to_vec();
            let mut d_query = vec![0.0; h];
            for j in 0..n {
                let d_score = st.weights[j] * (d_w[j] - dot);
                if d_score == 0.0 {
                    continue;
                }
                let hid = &st.att_hidden[j];
                add_to(g, &l.att_v, &hid.iter().map(|x| x * d_score).collect::<Vec<_>>());
                for k in 0..h {
                    let d_pre = d_score * v[k] * (1.0 - hid[k] * hid[k]);
                    d_query[k] += d_pre;
                    d_keys[j][k] += d_pre;
                }
            }
            affine_back(p, g, &l.att_w, &st.prev_state, &d_query, Some(&mut d_prev));
            d_state = d_prev;
        }

        for j in 0..n {
            affine_back(p, g, &l.att_u, &enc.annotations[j], &d_keys[j], Some(&mut d_ann[j]));
        }
        let d_init_pre: Vec<f64> = d_state
            .iter()
            .zip(&enc.init)
            .map(|(d, s)| d * (1.0 - s * s))
            .collect();
        let mut d_mean = vec![0.0; 2 * h];
        affine_back(p, g, &l.init_w, &enc.mean, &d_init_pre, Some(&mut d_mean));
        add_to(g, &l.init_b, &d_init_pre);
        for ann_grad in &mut d_ann {
            for (a, m) in ann_grad.iter_mut().zip(&d_mean) {
                *a += m / n as f64;
            }
        }

        let mut carry = vec![0.0; h];
        for j in (0..n).rev() {
            let d_out: Vec<f64> = d_ann[j][..h].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let (d_in, d_prev) = cell_backward(p, g, &l.enc_fwd, &enc.fwd[j], &d_out);
            let row = l.src_emb.offset + src[j] * e;
            for (gv, d) in g[row..row + e].iter_mut().zip(&d_in) {
                *gv += d;
            }
            carry = d_prev;
        }
        let mut carry = vec![0.0; h];
        for j in 0..n {
            let d_out: Vec<f64> = d_ann[j][h..].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let (d_in, d_prev) = cell_backward(p, g, &l.enc_bwd, &enc.bwd[j], &d_out);
            let row = l.src_emb.offset + src[j] * e;
            for (gv, d) in g[row..row + e].iter_mut().zip(&d_in) {
                *gv += d;
            }
            carry = d_prev;
        }
        nll
    }

    /// Mean over sentences of the summed token negative log-likelihood
    /// (end-of-sentence included), with its gradient.
    pub fn loss_and_gradient(&self, pairs: &[(&Sentence, &Sentence)]) -> Result<BatchGradient, ModelError> {
        let l = self.layout()?;
        let ids: Vec<(Vec<usize>, Vec<usize>)> =
            pairs.iter().map(|(a, b)| (self.src_ids(a), self.tgt_ids(b))).collect();
        Ok(self.batch_gradient(l, &ids))
    }

    fn batch_gradient(&self, l: &Layout, batch: &[(Vec<usize>, Vec<usize>)]) -> BatchGradient {
        let mut gradient = vec![0.0; l.total];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        let mut tokens = 0;
        for (src, tgt) in batch {
            if src.is_empty() {
                continue;
            }
            loss += scale * self.sentence_gradient(l, src, tgt, scale, &mut gradient);
            tokens += tgt.len() + 1;
        }
        BatchGradient { loss, tokens, gradient }
    }

    /// Next-word distribution after `prefix` (target ids, without the
    /// start symbol) given the source ids, with that step's attention weights.
    pub fn next_token_distribution(&self, source: &[usize], prefix: &[usize]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let l = self.layout()?;
        if source.is_empty() {
            return Err(ModelError::InvalidInput("empty source".into()));
        }
        if let Some(&bad) = source.iter().find(|&&i| i >= self.src_vocab.len()) {
            return Err(ModelError::InvalidInput(format!("source id {bad} outside vocabulary of {}", self.src_vocab.len())));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i >= self.tgt_vocab.len()) {
            return Err(ModelError::InvalidInput(format!("target id {bad} outside vocabulary of {}", self.tgt_vocab.len())));
        }
        let enc = self.encode(l, source);
        let mut prev = self.bos();
        let mut state = enc.init.clone();
        for &y in prefix {
            state = self.decode_step(l, &enc, prev, &state).cell.out;
            prev = y;
        }
        let st = self.decode_step(l, &enc, prev, &state);
        Ok((st.probs, st.weights))
    }

    /// Sets the attention scoring vector to zero, making attention uniform.
    pub fn zero_attention_vector(&mut self) {
        if let Some(l) = &self.layout {
            let b = l.att_v;
            self.params[b.offset..b.offset + b.len()].fill(0.0);
        }
    }

    pub fn source_vocab_size(&self) -> usize {
        self.src_vocab.len()
    }

    /// Negative log-likelihood of each pair without gradients.
    pub fn sentence_losses(&self, pairs: &[(&Sentence, &Sentence)]) -> Result<Vec<f64>, ModelError> {
        let l = self.layout()?;
        Ok(pairs
            .iter()
            .map(|(a, b)| {
                let src = self.src_ids(a);
                let tgt = self.tgt_ids(b);
                self.force_score(l, &src, &tgt).0
            })
            .collect())
    }

    /// Returns (negative log-likelihood, token count) under teacher forcing.
    fn force_score(&self, l: &Layout, src: &[usize], tgt: &[usize]) -> (f64, usize) {
        if src.is_empty() {
            return (0.0, 0);
        }
        let enc = self.encode(l, src);
        let mut prev = self.bos();
        let mut state = enc.init.clone();
        let mut nll = 0.0;
        for &y in tgt.iter().chain(std::iter::once(&self.eos())) {
            let st = self.decode_step(l, &enc, prev, &state);
            nll -= st.probs[y].ln();
            state = st.cell.out;
            prev = y;
        }
        (nll, tgt.len() + 1)
    }

    pub fn begin_phase(&mut self, pairs: &[(&Sentence, &Sentence)]) -> Result<(), ModelError> {
        self.initialize(pairs)?;
        let ids = pairs
            .iter()
            .filter(|(a, _)| !a.is_empty())
            .map(|(a, b)| (self.src_ids(a), self.tgt_ids(b)))
            .collect();
        self.phase = Some(ids);
        self.order.clear();
        self.cursor = 0;
        Ok(())
    }

    pub fn end_phase(&mut self) {
        self.phase = None;
    }

    /// One Adam update on the next minibatch of the phase data.
    pub fn step(&mut self, batch_size: usize, learning_rate: f64) -> Result<f64, ModelError> {
        let l = *self.layout()?;
        let data = self.phase.take().ok_or(ModelError::Untrained)?;
        if data.is_empty() {
            self.phase = Some(data);
            return Ok(0.0);
        }
        if self.cursor >= self.order.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1 + self.batches_drawn);
            self.batches_drawn += 1;
            self.order = (0..data.len()).collect();
            self.order.shuffle(&mut rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size.max(1)).min(self.order.len());
        let batch: Vec<(Vec<usize>, Vec<usize>)> =
            self.order[self.cursor..end].iter().map(|&i| data[i].clone()).collect();
        self.cursor = end;
        self.phase = Some(data);

        let mut grad = self.batch_gradient(&l, &batch);
        if !grad.loss.is_finite() || grad.gradient.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("attention loss"));
        }
        let clip = self.settings.clip_norm;
        if clip > 0.0 {
            let norm = grad.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.gradient.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let adam = self.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; l.total],
            v: vec![0.0; l.total],
            t: 0,
        });
        adam.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - b1.powi(adam.t as i32);
        let c2 = 1.0 - b2.powi(adam.t as i32);
        for (k, g) in grad.gradient.iter().enumerate() {
            adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g;
            adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * g * g;
            self.params[k] -= learning_rate * (adam.m[k] / c1) / ((adam.v[k] / c2).sqrt() + eps);
        }
        Ok(grad.loss)
    }

    /// Beam search (greedy at width one). Returns the output and the mean
    /// log-probability per emitted token, end-of-sentence included.
    pub fn translate(&self, input: &Sentence) -> Result<(Sentence, f64), ModelError> {
        let l = self.layout()?;
        if input.is_empty() {
            return Ok((Sentence::empty(), 0.0));
        }
        let src = self.src_ids(input);
        let enc = self.encode(l, &src);
        let max_len = (self.settings.max_length_ratio * src.len() as f64).ceil() as usize + 5;
        let width = self.settings.beam_width.max(1);
        let eos = self.eos();

        struct Hyp {
            words: Vec<usize>,
            state: Vec<f64>,
            logp: f64,
        }
        let mut beam = vec![Hyp { words: Vec::new(), state: enc.init.clone(), logp: 0.0 }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..max_len {
            let mut expansions: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
            for (h_idx, hyp) in beam.iter().enumerate() {
                let prev = hyp.words.last().copied().unwrap_or_else(|| self.bos());
                let st = self.decode_step(l, &enc, prev, &hyp.state);
                let mut ranked: Vec<(usize, f64)> = st.probs.iter().copied().enumerate().collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for (w, pr) in ranked.into_iter().take(width) {
                    expansions.push((h_idx, w, hyp.logp + pr.ln(), st.cell.out.clone()));
                }
            }
            expansions.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
            let mut next = Vec::new();
            for (h_idx, w, logp, state) in expansions {
                if next.len() >= width {
                    break;
                }
                let mut words = beam[h_idx].words.clone();
                words.push(w);
                if w == eos {
                    let n = words.len() as f64;
                    finished.push((words, logp / n));
                } else {
                    next.push(Hyp { words, state, logp });
                }
            }
            if finished.len() >= width || next.is_empty() {
                break;
            }
            beam = next;
        }
        if finished.is_empty() {
            finished = beam
                .into_iter()
                .map(|h| {
                    let n = h.words.len().max(1) as f64;
                    (h.words, h.logp / n)
                })
                .collect();
        }
        let (words, score) = finished
            .into_iter()
            .fold((Vec::new(), f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best });
        let tokens = words
            .iter()
            .filter(|&&w| w != eos)
            .map(|&w| self.tgt_vocab.word(w as u32).to_owned());
        Ok((Sentence::from_tokens(tokens), score))
    }

    /// Mean per-token log-probability of `output` given `input`.
    pub fn score(&self, input: &Sentence, output: &Sentence) -> Result<f64, ModelError> {
        let l = self.layout()?;
        let (nll, n) = self.force_score(l, &self.src_ids(input), &self.tgt_ids(output));
        Ok(if n == 0 { 0.0 } else { -nll / n as f64 })
    }

    /// Element-wise mean of the parameter vectors; vocabularies and
    /// settings come from the last model.
    pub fn average(models: &[&AttentionModel]) -> AttentionModel {
        let last = *models.last().expect("at least one model");
        let weights: Vec<&[f64]> = models.iter().map(|m| m.params.as_slice()).collect();
        last.with_average(&weights)
    }

    /// This model with its weights replaced by the mean of `weights`.
    pub fn with_average(&self, weights: &[&[f64]]) -> AttentionModel {
        let mut out = self.snapshot();
        if let [only] = weights {
            out.params = only.to_vec();
            return out;
        }
        let k = weights.len() as f64;
        out.params.iter_mut().for_each(|v| *v = 0.0);
        for w in weights {
            for (a, v) in out.params.iter_mut().zip(w.iter()) {
                *a += v / k;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: &str) -> Sentence {
        Sentence::from_tokens(t.split_whitespace())
    }

    fn tiny() -> AttentionModel {
        let settings = AttentionSettings {
            embed_dim: 5,
            hidden_dim: 4,
            vocab_size: 20,
            init_scale: 0.5,
            ..AttentionSettings::default()
        };
        let mut m = AttentionModel::new(settings, 3);
        let data = [(s("a b c"), s("x y")), (s("b c d e"), s("y z w")), (s("e a"), s("w x x"))];
        let refs: Vec<(&Sentence, &Sentence)> = data.iter().map(|(a, b)| (a, b)).collect();
        m.initialize(&refs).unwrap();
        m
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut m = tiny();
        let data = [(s("a b c"), s("x y")), (s("d e a q"), s("z w x"))];
        let refs: Vec<(&Sentence, &Sentence)> = data.iter().map(|(a, b)| (a, b)).collect();
        let analytic = m.loss_and_gradient(&refs).unwrap().gradient;
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for k in 0..analytic.len() {
            let orig = m.params[k];
            m.params[k] = orig + eps;
            let up = m.loss_and_gradient(&refs).unwrap().loss;
            m.params[k] = orig - eps;
            let down = m.loss_and_gradient(&refs).unwrap().loss;
            m.params[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((analytic[k] - numeric).abs() / denom);
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn duplicating_the_batch_keeps_the_loss() {
        let m = tiny();
        let a = (s("a b"), s("x"));
        let b = (s("c d e"), s("y z"));
        let once = m.loss_and_gradient(&[(&a.0, &a.1), (&b.0, &b.1)]).unwrap();
        let twice = m
            .loss_and_gradient(&[(&a.0, &a.1), (&b.0, &b.1), (&a.0, &a.1), (&b.0, &b.1)])
            .unwrap();
        assert!((once.loss - twice.loss).abs() < 1e-12);
        for (x, y) in once.gradient.iter().zip(&twice.gradient) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_confidence_matches_forced_score() {
        let m = tiny();
        let input = s("a b c");
        let (out, conf) = m.translate(&input).unwrap();
        if out.len() + 1 < (2.0 * 3.0) as usize + 5 {
            assert!((m.score(&input, &out).unwrap() - conf).abs() < 1e-9);
        }
    }

    #[test]
    fn serde_roundtrip_preserves_outputs() {
        let m = tiny();
        let json = serde_json::to_string(&m).unwrap();
        let back: AttentionModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.translate(&s("a b")).unwrap(), m.translate(&s("a b")).unwrap());
    }
}
