//! Transformer encoder with a masked-language-model head.
//!
//! Post-LayerNorm encoder layers (attention, then a GELU feed-forward block),
//! learned token and position embeddings, and a dense-GELU-LayerNorm-decoder
//! prediction head. Two parameter-isolation variants hang off the shared
//! backbone:
//!
//! - per-domain bottleneck adapters, one after each layer's feed-forward block;
//! - per-domain copies of the top two layers and the head ("layer expansion").
//!
//! At most one of them is active for a forward pass, selected by [`Branch`].
//!
//! Parameter count for `V` vocab, `P` positions, `H` hidden, `F` ffn, `K`
//! layers (no adapters or expansions):
//!
//! ```text
//! V·H + P·H + 2H                      embeddings + embedding LayerNorm
//! + K·(4H² + 2HF + 9H + F)            encoder layers
//! + H² + 3H + H·V + V                 MLM head
//! ```
//!
//! Each adapter adds `K·(2Hr + r + H)` for bottleneck `r`; each expansion adds
//! `2·(4H² + 2HF + 9H + F) + H² + 3H + H·V + V`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub(crate) use checkpoint::sha256_hex;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{ParamId, Tape, Var};
use crate::corpus::{DomainId, MaskedBatch, TokenBatch, BOS, FIRST_REGULAR, IGNORE};
use crate::rng::{derive_seed, normal, seeded, Rng};
use crate::tensor::{log_sum_exp, Matrix};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Number of positions, including the start token.
    pub max_seq_len: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout_prob: f64,
    pub adapter_bottleneck_dim: usize,
    /// Train the MLM head while an adapter is active.
    pub adapter_trains_head: bool,
    /// Train LayerNorm parameters while an adapter is active.
    pub adapter_trains_layer_norm: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            max_seq_len: 64,
            n_layers: 4,
            hidden_dim: 128,
            n_heads: 4,
            ffn_dim: 512,
            dropout_prob: 0.1,
            adapter_bottleneck_dim: 16,
            adapter_trains_head: true,
            adapter_trains_layer_norm: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_layers < 2 {
            return bad("n_layers must be >= 2 (layer expansion replaces the top two layers)");
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad("hidden_dim must be a positive multiple of n_heads");
        }
        if self.ffn_dim == 0 || self.adapter_bottleneck_dim == 0 {
            return bad("ffn_dim and adapter_bottleneck_dim must be positive");
        }
        if self.vocab_size <= FIRST_REGULAR as usize {
            return bad("vocab_size must exceed the special-token range");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must be in [0, 1)");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count of the bare model (no adapters/expansions).
    pub fn base_param_count(&self) -> usize {
        let (v, p, h, k) = (self.vocab_size, self.max_seq_len, self.hidden_dim, self.n_layers);
        v * h + p * h + 2 * h + k * self.layer_param_count() + self.head_param_count()
    }

    pub fn layer_param_count(&self) -> usize {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        4 * h * h + 2 * h * f + 9 * h + f
    }

    pub fn head_param_count(&self) -> usize {
        let (h, v) = (self.hidden_dim, self.vocab_size);
        h * h + 3 * h + h * v + v
    }

    pub fn adapter_param_count(&self) -> usize {
        let (h, r) = (self.hidden_dim, self.adapter_bottleneck_dim);
        self.n_layers * (2 * h * r + r + h)
    }

    pub fn expansion_param_count(&self) -> usize {
        2 * self.layer_param_count() + self.head_param_count()
    }

    /// Canonical text form; its SHA-256 is the config digest.
    pub fn canonical(&self) -> String {
        format!(
            "vocab_size={};max_seq_len={};n_layers={};hidden_dim={};n_heads={};ffn_dim={};dropout_prob={:016x};adapter_bottleneck_dim={};adapter_trains_head={};adapter_trains_layer_norm={};init_std={:016x}",
            self.vocab_size,
            self.max_seq_len,
            self.n_layers,
            self.hidden_dim,
            self.n_heads,
            self.ffn_dim,
            self.dropout_prob.to_bits(),
            self.adapter_bottleneck_dim,
            self.adapter_trains_head,
            self.adapter_trains_layer_norm,
            self.init_std.to_bits()
        )
    }

    pub fn digest(&self) -> String {
        crate::model::checkpoint::sha256_hex(self.canonical().as_bytes())
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: String, value: Matrix) -> ParamId {
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

impl LayerParams {
    fn ids(&self) -> [ParamId; 16] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g, self.ln1_b, self.w1, self.b1, self.w2,
            self.b2, self.ln2_g, self.ln2_b,
        ]
    }

    fn from_ids(i: [ParamId; 16]) -> Self {
        Self {
            wq: i[0],
            bq: i[1],
            wk: i[2],
            bk: i[3],
            wv: i[4],
            bv: i[5],
            wo: i[6],
            bo: i[7],
            ln1_g: i[8],
            ln1_b: i[9],
            w1: i[10],
            b1: i[11],
            w2: i[12],
            b2: i[13],
            ln2_g: i[14],
            ln2_b: i[15],
        }
    }

    fn layer_norm_ids(&self) -> [ParamId; 4] {
        [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadParams {
    dense_w: ParamId,
    dense_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

impl HeadParams {
    fn ids(&self) -> [ParamId; 6] {
        [self.dense_w, self.dense_b, self.ln_g, self.ln_b, self.dec_w, self.dec_b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AdapterParams {
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Expansion {
    layers: [LayerParams; 2],
    head: HeadParams,
}

/// Which parameter set serves the current forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Branch {
    #[default]
    Shared,
    Adapter(DomainId),
    Expansion(DomainId),
}

/// Dropout behaviour of a forward pass.
pub enum Dropout<'a> {
    Off,
    On(&'a mut Rng),
}

impl Dropout<'_> {
    fn mask(&mut self, p: f64, rows: usize, cols: usize) -> Option<Matrix> {
        match self {
            Dropout::On(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let data = (0..rows * cols).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                Some(Matrix::from_vec(rows, cols, data))
            }
            _ => None,
        }
    }
}

/// Result of an eval-mode MLM forward pass.
#[derive(Clone, Debug)]
pub struct MlmOutput {
    /// `[batch * seq_len, vocab]`, row `b * seq_len + i`.
    pub logits: Matrix,
    /// Mean cross-entropy over masked positions; 0 when nothing is masked.
    pub loss: f64,
    /// Set when the batch had no masked positions.
    pub no_masked_positions: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    init_seed: u64,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
    head: HeadParams,
    adapters: BTreeMap<DomainId, Vec<AdapterParams>>,
    adapter_order: Vec<DomainId>,
    expansions: BTreeMap<DomainId, Expansion>,
    expansion_order: Vec<DomainId>,
    active: Branch,
    pub step_counter: u64,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng) * std).collect())
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ModelState {
    /// Deterministic initialization: weights `N(0, init_std²)`, biases zero,
    /// LayerNorm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let (h, v, f, std) = (config.hidden_dim, config.vocab_size, config.ffn_dim, config.init_std);
        let mut p = ParamStore::default();
        let tok_emb = p.add("embeddings.token".into(), gaussian(&mut rng, v, h, std));
        let pos_emb = p.add("embeddings.position".into(), gaussian(&mut rng, config.max_seq_len, h, std));
        let emb_ln_g = p.add("embeddings.ln.gamma".into(), Matrix::filled(1, h, 1.0));
        let emb_ln_b = p.add("embeddings.ln.beta".into(), Matrix::zeros(1, h));
        let layers = (0..config.n_layers).map(|l| new_layer(&mut p, &mut rng, &format!("layer.{l}"), h, f, std)).collect();
        let head = new_head(&mut p, &mut rng, "head", h, v, std);
        Ok(Self {
            config,
            init_seed: seed,
            params: p,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            head,
            adapters: BTreeMap::new(),
            adapter_order: Vec::new(),
            expansions: BTreeMap::new(),
            expansion_order: Vec::new(),
            active: Branch::Shared,
            step_counter: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn active(&self) -> &Branch {
        &self.active
    }

    pub fn adapter_domains(&self) -> &[DomainId] {
        &self.adapter_order
    }

    pub fn expansion_domains(&self) -> &[DomainId] {
        &self.expansion_order
    }

    /// Adds a fresh adapter set for `domain`. The up-projection starts near
    /// zero so the adapted model initially matches the bare one.
    pub fn add_adapter(&mut self, domain: &DomainId) -> Result<()> {
        if self.adapters.contains_key(domain) {
            return Err(Error::DuplicateDomain(domain.0.clone()));
        }
        let mut rng = seeded(derive_seed(self.init_seed, stable_hash(&domain.0) ^ 0xada7));
        let (h, r, std) = (self.config.hidden_dim, self.config.adapter_bottleneck_dim, self.config.init_std);
        let sets = (0..self.config.n_layers)
            .map(|l| {
                let pre = format!("adapter.{}.layer.{l}", domain.0);
                AdapterParams {
                    down_w: self.params.add(format!("{pre}.down.w"), gaussian(&mut rng, h, r, std)),
                    down_b: self.params.add(format!("{pre}.down.b"), Matrix::zeros(1, r)),
                    up_w: self.params.add(format!("{pre}.up.w"), gaussian(&mut rng, r, h, 1e-4)),
                    up_b: self.params.add(format!("{pre}.up.b"), Matrix::zeros(1, h)),
                }
            })
            .collect();
        self.adapters.insert(domain.clone(), sets);
        self.adapter_order.push(domain.clone());
        Ok(())
    }

    /// Adds per-domain copies of the top two layers and the head, initialized
    /// from the current shared values.
    pub fn expand_layers(&mut self, domain: &DomainId) -> Result<()> {
        let k = self.config.n_layers;
        if k < 2 {
            return Err(Error::Config("layer expansion needs at least 2 layers".into()));
        }
        if self.expansions.contains_key(domain) {
            return Err(Error::DuplicateDomain(domain.0.clone()));
        }
        let copy_layer = |this: &mut Self, l: usize| {
            let pre = format!("expansion.{}.layer.{l}", domain.0);
            let ids = this.layers[l].ids().map(|id| {
                let suffix = String::from(&this.params.name(id)[format!("layer.{l}.").len()..]);
                let value = this.params.get(id).clone();
                this.params.add(format!("{pre}.{suffix}"), value)
            });
            LayerParams::from_ids(ids)
        };
        let l0 = copy_layer(self, k - 2);
        let l1 = copy_layer(self, k - 1);
        let src = self.head;
        let pre = format!("expansion.{}.head", domain.0);
        let mut cp = |id: ParamId, name: &str| {
            let value = self.params.get(id).clone();
            self.params.add(format!("{pre}.{name}"), value)
        };
        let head = HeadParams {
            dense_w: cp(src.dense_w, "dense.w"),
            dense_b: cp(src.dense_b, "dense.b"),
            ln_g: cp(src.ln_g, "ln.gamma"),
            ln_b: cp(src.ln_b, "ln.beta"),
            dec_w: cp(src.dec_w, "decoder.w"),
            dec_b: cp(src.dec_b, "decoder.b"),
        };
        self.expansions.insert(domain.clone(), Expansion { layers: [l0, l1], head });
        self.expansion_order.push(domain.clone());
        Ok(())
    }

    pub fn set_active(&mut self, branch: Branch) -> Result<()> {
        match &branch {
            Branch::Adapter(d) if !self.adapters.contains_key(d) => return Err(Error::UnknownDomain(d.0.clone())),
            Branch::Expansion(d) if !self.expansions.contains_key(d) => return Err(Error::UnknownDomain(d.0.clone())),
            _ => {}
        }
        self.active = branch;
        Ok(())
    }

    pub fn set_active_adapter(&mut self, domain: &DomainId) -> Result<()> {
        self.set_active(Branch::Adapter(domain.clone()))
    }

    /// The branch a downstream task from `domain` should be evaluated with:
    /// that domain's adapter or expansion when the model has one.
    pub fn branch_for(&self, domain: &DomainId) -> Branch {
        if self.adapters.contains_key(domain) {
            Branch::Adapter(domain.clone())
        } else if self.expansions.contains_key(domain) {
            Branch::Expansion(domain.clone())
        } else {
            Branch::Shared
        }
    }

    /// Per-parameter flag: does the active branch train this tensor?
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        let mut set = |ids: &[ParamId]| {
            for id in ids {
                mask[id.0] = true;
            }
        };
        match &self.active {
            Branch::Shared => {
                set(&[self.tok_emb, self.pos_emb, self.emb_ln_g, self.emb_ln_b]);
                for l in &self.layers {
                    set(&l.ids());
                }
                set(&self.head.ids());
            }
            Branch::Adapter(d) => {
                for a in &self.adapters[d] {
                    set(&[a.down_w, a.down_b, a.up_w, a.up_b]);
                }
                if self.config.adapter_trains_head {
                    set(&self.head.ids());
                }
                if self.config.adapter_trains_layer_norm {
                    set(&[self.emb_ln_g, self.emb_ln_b]);
                    for l in &self.layers {
                        set(&l.layer_norm_ids());
                    }
                }
            }
            Branch::Expansion(d) => {
                let e = &self.expansions[d];
                set(&e.layers[0].ids());
                set(&e.layers[1].ids());
                set(&e.head.ids());
            }
        }
        mask
    }

    fn check_input(&self, input: &TokenBatch) -> Result<()> {
        if input.batch == 0 {
            return Err(Error::Empty("empty batch".into()));
        }
        if input.seq_len > self.config.max_seq_len {
            return Err(Error::Config(format!("batch width {} exceeds max_seq_len {}", input.seq_len, self.config.max_seq_len)));
        }
        if let Some(t) = input.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Config(format!("token id {t} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn leaf(&self, tape: &mut Tape, id: ParamId, trainable: Option<&[bool]>) -> Var {
        let t = trainable.is_some_and(|m| m[id.0]);
        tape.param(id, self.params.get(id), t)
    }

    /// Records the encoder on `tape` and returns the final-layer token states
    /// `[batch * seq_len, hidden]`. With `track_grads`, parameters trained by
    /// the active branch become differentiable leaves.
    pub fn encode(&self, tape: &mut Tape, input: &TokenBatch, dropout: &mut Dropout<'_>, track_grads: bool) -> Result<Var> {
        self.check_input(input)?;
        let mask_vec = track_grads.then(|| self.trainable_mask());
        let tr = mask_vec.as_deref();
        let c = &self.config;
        let (b, l, h) = (input.batch, input.seq_len, c.hidden_dim);
        let rows = b * l;
        let p = c.dropout_prob;

        let tok = self.leaf(tape, self.tok_emb, tr);
        let pos = self.leaf(tape, self.pos_emb, tr);
        let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..rows).map(|r| r % l).collect();
        let te = tape.gather(tok, ids);
        let pe = tape.gather(pos, positions);
        let x = tape.add(te, pe);
        let g = self.leaf(tape, self.emb_ln_g, tr);
        let bb = self.leaf(tape, self.emb_ln_b, tr);
        let mut x = tape.layer_norm(x, g, bb);
        if let Some(m) = dropout.mask(p, rows, h) {
            x = tape.mul_const(x, m);
        }
        let key_valid = input.key_valid();
        let adapter = match &self.active {
            Branch::Adapter(d) => Some(&self.adapters[d]),
            _ => None,
        };
        let expansion = match &self.active {
            Branch::Expansion(d) => Some(&self.expansions[d]),
            _ => None,
        };
        for li in 0..c.n_layers {
            let lp = match expansion {
                Some(e) if li + 2 >= c.n_layers => e.layers[li + 2 - c.n_layers],
                _ => self.layers[li],
            };
            let mut ld = |id| self.leaf(tape, id, tr);
            let (wq, bq, wk, bk, wv, bv, wo, bo) = (ld(lp.wq), ld(lp.bq), ld(lp.wk), ld(lp.bk), ld(lp.wv), ld(lp.bv), ld(lp.wo), ld(lp.bo));
            let (ln1g, ln1b, w1, b1, w2, b2, ln2g, ln2b) =
                (ld(lp.ln1_g), ld(lp.ln1_b), ld(lp.w1), ld(lp.b1), ld(lp.w2), ld(lp.b2), ld(lp.ln2_g), ld(lp.ln2_b));
            let q = tape.linear(x, wq, bq);
            let k = tape.linear(x, wk, bk);
            let v = tape.linear(x, wv, bv);
            let att = tape.attention(q, k, v, c.n_heads, b, l, key_valid.clone());
            let mut a = tape.linear(att, wo, bo);
            if let Some(m) = dropout.mask(p, rows, h) {
                a = tape.mul_const(a, m);
            }
            let res = tape.add(x, a);
            x = tape.layer_norm(res, ln1g, ln1b);
            let f1 = tape.linear(x, w1, b1);
            let f1 = tape.gelu(f1);
            let mut f = tape.linear(f1, w2, b2);
            if let Some(m) = dropout.mask(p, rows, h) {
                f = tape.mul_const(f, m);
            }
            if let Some(sets) = adapter {
                let ap = sets[li];
                let (dw, db, uw, ub) = (self.leaf(tape, ap.down_w, tr), self.leaf(tape, ap.down_b, tr), self.leaf(tape, ap.up_w, tr), self.leaf(tape, ap.up_b, tr));
                let z = tape.linear(f, dw, db);
                let z = tape.gelu(z);
                let z = tape.linear(z, uw, ub);
                f = tape.add(f, z);
            }
            let res = tape.add(x, f);
            x = tape.layer_norm(res, ln2g, ln2b);
        }
        Ok(x)
    }

    /// MLM head logits for the given rows of `hidden` (all rows when `None`).
    pub fn head_logits(&self, tape: &mut Tape, hidden: Var, rows: Option<Vec<usize>>, track_grads: bool) -> Var {
        let mask_vec = track_grads.then(|| self.trainable_mask());
        let tr = mask_vec.as_deref();
        let hp = match &self.active {
            Branch::Expansion(d) => self.expansions[d].head,
            _ => self.head,
        };
        let x = match rows {
            Some(r) => tape.gather(hidden, r),
            None => hidden,
        };
        let (dw, db, lg, lb, ow, ob) = (
            self.leaf(tape, hp.dense_w, tr),
            self.leaf(tape, hp.dense_b, tr),
            self.leaf(tape, hp.ln_g, tr),
            self.leaf(tape, hp.ln_b, tr),
            self.leaf(tape, hp.dec_w, tr),
            self.leaf(tape, hp.dec_b, tr),
        );
        let t = tape.linear(x, dw, db);
        let t = tape.gelu(t);
        let t = tape.layer_norm(t, lg, lb);
        tape.linear(t, ow, ob)
    }

    /// Unit-norm start-token representations `[batch, hidden]` from `hidden`.
    pub fn sentence_rows(tape: &mut Tape, hidden: Var, input: &TokenBatch) -> Var {
        let rows = (0..input.batch).map(|b| b * input.seq_len).collect();
        let s = tape.gather(hidden, rows);
        tape.l2_normalize(s)
    }

    /// Eval-mode MLM forward: full logits and the masked-position loss.
    pub fn forward_mlm(&self, batch: &MaskedBatch) -> Result<MlmOutput> {
        let mut tape = Tape::new();
        let hidden = self.encode(&mut tape, &batch.input, &mut Dropout::Off, false)?;
        let logits_var = self.head_logits(&mut tape, hidden, None, false);
        let logits = tape.value(logits_var).clone();
        let (loss, none) = masked_cross_entropy(&logits, batch);
        Ok(MlmOutput { logits, loss, no_masked_positions: none })
    }

    /// Final-layer, pre-head token states `[batch * seq_len, hidden]`.
    pub fn token_representations(&self, input: &TokenBatch, dropout: &mut Dropout<'_>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let hidden = self.encode(&mut tape, input, dropout, false)?;
        Ok(tape.value(hidden).clone())
    }

    /// `l2`-normalized final-layer state of each row's start token.
    pub fn sentence_representation(&self, input: &TokenBatch, dropout: &mut Dropout<'_>) -> Result<Matrix> {
        check_start_tokens(input)?;
        let mut tape = Tape::new();
        let hidden = self.encode(&mut tape, input, dropout, false)?;
        let s = Self::sentence_rows(&mut tape, hidden, input);
        Ok(tape.value(s).clone())
    }
}

pub fn check_start_tokens(input: &TokenBatch) -> Result<()> {
    for b in 0..input.batch {
        if input.get(b, 0) != BOS {
            return Err(Error::MissingStartToken(b));
        }
    }
    Ok(())
}

/// Mean cross-entropy at masked positions of full `[batch * seq_len, vocab]`
/// logits. Returns `(0, true)` when nothing is masked.
pub fn masked_cross_entropy(logits: &Matrix, batch: &MaskedBatch) -> (f64, bool) {
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, &t) in batch.targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t as usize];
        n += 1;
    }
    if n == 0 {
        (0.0, true)
    } else {
        (total / n as f64, false)
    }
}

fn new_layer(p: &mut ParamStore, rng: &mut Rng, pre: &str, h: usize, f: usize, std: f64) -> LayerParams {
    LayerParams {
        wq: p.add(format!("{pre}.attn.q.w"), gaussian(rng, h, h, std)),
        bq: p.add(format!("{pre}.attn.q.b"), Matrix::zeros(1, h)),
        wk: p.add(format!("{pre}.attn.k.w"), gaussian(rng, h, h, std)),
        bk: p.add(format!("{pre}.attn.k.b"), Matrix::zeros(1, h)),
        wv: p.add(format!("{pre}.attn.v.w"), gaussian(rng, h, h, std)),
        bv: p.add(format!("{pre}.attn.v.b"), Matrix::zeros(1, h)),
        wo: p.add(format!("{pre}.attn.o.w"), gaussian(rng, h, h, std)),
        bo: p.add(format!("{pre}.attn.o.b"), Matrix::zeros(1, h)),
        ln1_g: p.add(format!("{pre}.ln1.gamma"), Matrix::filled(1, h, 1.0)),
        ln1_b: p.add(format!("{pre}.ln1.beta"), Matrix::zeros(1, h)),
        w1: p.add(format!("{pre}.ffn.in.w"), gaussian(rng, h, f, std)),
        b1: p.add(format!("{pre}.ffn.in.b"), Matrix::zeros(1, f)),
        w2: p.add(format!("{pre}.ffn.out.w"), gaussian(rng, f, h, std)),
        b2: p.add(format!("{pre}.ffn.out.b"), Matrix::zeros(1, h)),
        ln2_g: p.add(format!("{pre}.ln2.gamma"), Matrix::filled(1, h, 1.0)),
        ln2_b: p.add(format!("{pre}.ln2.beta"), Matrix::zeros(1, h)),
    }
}

fn new_head(p: &mut ParamStore, rng: &mut Rng, pre: &str, h: usize, v: usize, std: f64) -> HeadParams {
    HeadParams {
        dense_w: p.add(format!("{pre}.dense.w"), gaussian(rng, h, h, std)),
        dense_b: p.add(format!("{pre}.dense.b"), Matrix::zeros(1, h)),
        ln_g: p.add(format!("{pre}.ln.gamma"), Matrix::filled(1, h, 1.0)),
        ln_b: p.add(format!("{pre}.ln.beta"), Matrix::zeros(1, h)),
        dec_w: p.add(format!("{pre}.decoder.w"), gaussian(rng, h, v, std)),
        dec_b: p.add(format!("{pre}.decoder.b"), Matrix::zeros(1, v)),
    }
}
