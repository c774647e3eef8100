//! The difficulty-assisted matching inference network.
//!
//! Each utterance is encoded by a BiLSTM over word, positional and POS
//! embeddings and summarized by a role-specific attention whose logits are
//! damped by term frequency. Every utterance vector is then matched (dot
//! product) against all preceding utterance vectors of its dialogue; the
//! matching row and the vector are fused, run through a dialogue-level
//! LSTM with attention over earlier states, and classified.

mod checkpoint;
pub mod params;
pub mod tape;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{positional_encoding, FeaturizedDialogue, FeaturizedUtterance};
use crate::metrics::SessionPrediction;

pub use checkpoint::Checkpoint;
pub use params::{glorot_bound, EncoderMode, ModelConfig, ModelParams, EMBEDDING_INIT_RANGE};
use tape::{softmax_col, Mat, Tape, Var};

/// Column layout shared by the batched forward pass.
///
/// Utterances are numbered dialogue-major (`utterance_offset[i] + t`).
/// Dialogue-level tensors are step-major: column `t * n_dialogues + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub n_dialogues: usize,
    pub steps: usize,
    pub dialogue_lens: Vec<usize>,
    pub utterance_offset: Vec<usize>,
    pub n_utterances: usize,
    pub max_tokens: usize,
    pub token_lens: Vec<usize>,
}

impl BatchLayout {
    fn new(batch: &[&FeaturizedDialogue]) -> Self {
        let dialogue_lens: Vec<usize> = batch.iter().map(|d| d.len()).collect();
        let mut utterance_offset = Vec::with_capacity(batch.len());
        let mut token_lens = Vec::new();
        for d in batch {
            utterance_offset.push(token_lens.len());
            token_lens.extend(d.utterances.iter().map(FeaturizedUtterance::len));
        }
        BatchLayout {
            n_dialogues: batch.len(),
            steps: dialogue_lens.iter().copied().max().unwrap_or(0),
            n_utterances: token_lens.len(),
            max_tokens: token_lens.iter().copied().max().unwrap_or(0),
            dialogue_lens,
            utterance_offset,
            token_lens,
        }
    }

    /// Step-major column of utterance `t` of dialogue `i`.
    pub fn step_col(&self, i: usize, t: usize) -> usize {
        t * self.n_dialogues + i
    }
}

/// Handles to the interesting intermediate tensors of one forward pass.
pub struct ForwardPass {
    pub layout: BatchLayout,
    /// `(4k+1) x utterances`, dialogue-major.
    pub utterance_vectors: Var,
    /// `max_tokens x utterances` token attention weights.
    pub token_attention: Var,
    /// `max_dialogue_len x (steps * dialogues)` matching features; row `j`
    /// of the step-major column for utterance `t` is `v_t . v_j`.
    pub matching: Var,
    /// `steps x (steps * dialogues)` context attention weights.
    pub context_attention: Var,
    /// `2 x (steps * dialogues)` classifier logits.
    pub logits: Var,
}

/// Strictly lower-triangular `L x L` matrix of utterance-vector dot products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingMatrix {
    pub values: Vec<Vec<f64>>,
}

impl MatchingMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Row `t` zero-padded to `width`, the fused layer's input layout.
    pub fn padded_row(&self, t: usize, width: usize) -> Vec<f64> {
        let mut row = self.values[t].clone();
        row.resize(width, 0.0);
        row
    }

    pub fn is_strictly_lower_triangular(&self) -> bool {
        self.values
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().skip(i).all(|&x| x == 0.0))
    }
}

/// Matching features of a dialogue: entry `(t, j)` is `v_t . v_j` for
/// `j < t` and zero otherwise.
pub fn matching_features(vectors: &[Vec<f64>], config: &ModelConfig) -> Result<MatchingMatrix> {
    let l = vectors.len();
    if l > config.max_dialogue_len {
        return Err(Error::DialogueTooLong {
            len: l,
            max: config.max_dialogue_len,
        });
    }
    let dim = config.utterance_dim();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Shape {
            tensor: "utterance_vector".into(),
            expected: vec![dim],
            found: vec![v.len()],
        });
    }
    let mut values = vec![vec![0.0; l]; l];
    for t in 0..l {
        for j in 0..t {
            values[t][j] = vectors[t].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(MatchingMatrix { values })
}

struct Ids {
    embedding: usize,
    enc: [(usize, usize, usize); 2],
    attn: Attn,
    fuse: (usize, usize),
    ctx: (usize, usize, usize),
    ctx_attn: usize,
    proj: (usize, usize),
    cls: (usize, usize),
}

enum Attn {
    RoleMixed {
        w: [usize; 2],
        b: [usize; 2],
        g: [usize; 2],
    },
    Shared {
        w: usize,
        b: usize,
        g: usize,
    },
    Uniform,
}

impl Ids {
    fn resolve(params: &ModelParams, mode: EncoderMode) -> Result<Ids> {
        let id = |name: &str| {
            params
                .index(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let lstm = |prefix: &str| -> Result<(usize, usize, usize)> {
            Ok((id(&format!("{prefix}_w_ih"))?, id(&format!("{prefix}_w_hh"))?, id(&format!("{prefix}_b"))?))
        };
        let attn = match mode {
            EncoderMode::Difficulty => Attn::RoleMixed {
                w: [id("attn_w_customer")?, id("attn_w_agent")?],
                b: [id("attn_b_customer")?, id("attn_b_agent")?],
                g: [id("attn_g_customer")?, id("attn_g_agent")?],
            },
            EncoderMode::BirnnSelfAttention => Attn::Shared {
                w: id("attn_w")?,
                b: id("attn_b")?,
                g: id("attn_g")?,
            },
            EncoderMode::PlainBirnn => Attn::Uniform,
        };
        Ok(Ids {
            embedding: id("word_embedding")?,
            enc: [lstm("enc_fwd")?, lstm("enc_bwd")?],
            attn,
            fuse: (id("fuse_w")?, id("fuse_b")?),
            ctx: lstm("ctx")?,
            ctx_attn: id("ctx_attn_w")?,
            proj: (id("proj_w")?, id("proj_b")?),
            cls: (id("cls_w")?, id("cls_b")?),
        })
    }
}

/// A configured network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Dami {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Dami {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed, None)?;
        Ok(Dami { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Dami { config, params })
    }

    fn check_input(&self, batch: &[&FeaturizedDialogue]) -> Result<()> {
        let cfg = &self.config;
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        for d in batch {
            if d.is_empty() {
                return Err(Error::Config(format!("session `{}` has no utterances", d.session_id)));
            }
            if d.len() > cfg.max_dialogue_len {
                return Err(Error::DialogueTooLong {
                    len: d.len(),
                    max: cfg.max_dialogue_len,
                });
            }
            for u in &d.utterances {
                check_utterance(u, cfg)?;
            }
        }
        Ok(())
    }

    /// Records the batched forward pass on `tape`. Dropout is applied only
    /// when `dropout_rng` is given.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&FeaturizedDialogue],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ForwardPass> {
        self.check_input(batch)?;
        let cfg = &self.config;
        let ids = Ids::resolve(&self.params, cfg.encoder_mode)?;
        let layout = BatchLayout::new(batch);
        let utts: Vec<&FeaturizedUtterance> = batch.iter().flat_map(|d| d.utterances.iter()).collect();

        let (utterance_vectors, token_attention) = self.encode(tape, &ids, &utts, &layout)?;
        check_finite(tape, utterance_vectors, "utterance_encoder")?;

        let (nd, steps) = (layout.n_dialogues, layout.steps);
        let step_index: Vec<Option<usize>> = (0..steps)
            .flat_map(|t| {
                let layout = &layout;
                (0..nd).map(move |i| (t < layout.dialogue_lens[i]).then(|| layout.utterance_offset[i] + t))
            })
            .collect();
        let v_steps = tape.select_cols(utterance_vectors, step_index);

        let matching = if cfg.use_matching {
            tape.causal_dots(v_steps, v_steps, nd, layout.dialogue_lens.clone(), cfg.max_dialogue_len)
        } else {
            tape.constant(Mat::zeros((cfg.max_dialogue_len, steps * nd)))
        };
        let fused_in = tape.concat_rows(&[matching, v_steps]);
        let fw = tape.param(ids.fuse.0);
        let fb = tape.param(ids.fuse.1);
        let fused = tape.affine(fw, fused_in, fb);
        let mut fused = tape.relu(fused);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            fused = dropout(tape, fused, cfg.dropout_rate, rng);
        }
        check_finite(tape, fused, "fusion")?;

        let step_masks: Vec<Vec<f64>> = (0..steps)
            .map(|t| layout.dialogue_lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect())
            .collect();
        let hs = run_lstm(tape, ids.ctx, fused, &step_masks, nd, cfg.hidden);
        let h_all = tape.concat_cols(&hs);
        check_finite(tape, h_all, "context_lstm")?;

        let wa = tape.param(ids.ctx_attn);
        let wh = tape.matmul(wa, h_all);
        let scores = tape.causal_dots(h_all, wh, nd, layout.dialogue_lens.clone(), steps);
        let valid: Vec<usize> = (0..steps)
            .flat_map(|t| {
                let lens = &layout.dialogue_lens;
                (0..nd).map(move |i| if t < lens[i] { t } else { 0 })
            })
            .collect();
        let context_attention = tape.masked_softmax_cols(scores, valid);
        let context = tape.causal_weighted_sum(h_all, context_attention, nd);

        let proj_in = tape.concat_rows(&[h_all, context]);
        let pw = tape.param(ids.proj.0);
        let pb = tape.param(ids.proj.1);
        let hidden = tape.affine(pw, proj_in, pb);
        let mut hidden = tape.relu(hidden);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            hidden = dropout(tape, hidden, cfg.dropout_rate, rng);
        }
        let cw = tape.param(ids.cls.0);
        let cb = tape.param(ids.cls.1);
        let logits = tape.affine(cw, hidden, cb);
        check_finite(tape, logits, "classifier")?;

        Ok(ForwardPass {
            layout,
            utterance_vectors,
            token_attention,
            matching,
            context_attention,
            logits,
        })
    }

    /// Utterance encoder over all utterances of the batch. Returns the
    /// utterance vectors and token attention weights.
    fn encode(
        &self,
        tape: &mut Tape<'_>,
        ids: &Ids,
        utts: &[&FeaturizedUtterance],
        layout: &BatchLayout,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (n, s_max, k) = (utts.len(), layout.max_tokens, cfg.hidden);
        let difficulty = cfg.encoder_mode == EncoderMode::Difficulty;

        // Real tokens are packed one column each, customer utterances
        // first, so per-token work skips padding and each role's attention
        // parameters see one contiguous block. Both directions share the
        // packed features since a token's position and tag do not depend
        // on reading order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&u| utts[u].role == 0);
        let mut start = vec![0; n];
        let mut role_ids: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
        let mut packed = 0;
        for &u in &order {
            start[u] = packed;
            packed += utts[u].len();
            role_ids[usize::from(utts[u].role == 0)].extend(&utts[u].token_ids);
        }
        let n_customer = role_ids[0].len();
        let blocks = [0..n_customer, n_customer..packed];

        let mut parts: Vec<Vec<Var>> = Vec::with_capacity(2);
        let feats = if difficulty {
            let (d, np) = (cfg.embed_dim, cfg.n_pos);
            let longest = utts.iter().flat_map(|u| u.positions.iter()).copied().max().unwrap_or(0) as usize;
            let table: Vec<Vec<f64>> = (1..=longest).map(|p| positional_encoding(p, d)).collect::<Result<_>>()?;
            let mut m = Mat::zeros((d + np, packed));
            for &u in &order {
                let utt = utts[u];
                for s in 0..utt.len() {
                    let col = start[u] + s;
                    for (r, v) in table[utt.positions[s] as usize - 1].iter().enumerate() {
                        m[[r, col]] = *v;
                    }
                    m[[d + utt.pos_tags[s] as usize, col]] = 1.0;
                }
            }
            Some(m)
        } else {
            None
        };
        for (r, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                continue;
            }
            let words = tape.gather(ids.embedding, std::mem::take(&mut role_ids[r]));
            let mut p = vec![words];
            if let Some(m) = &feats {
                p.push(tape.constant(m.slice(ndarray::s![.., block.clone()]).to_owned()));
            }
            parts.push(p);
        }

        // Sequences run longest first so the set still running at step s
        // is a prefix and the recurrent batch shrinks instead of padding.
        let mut by_len: Vec<usize> = (0..n).collect();
        by_len.sort_by_key(|&u| std::cmp::Reverse(utts[u].len()));
        let mut rank = vec![0; n];
        for (r, &u) in by_len.iter().enumerate() {
            rank[u] = r;
        }
        let steps = |reversed: bool| -> Vec<Vec<usize>> {
            (0..s_max)
                .map(|s| {
                    by_len
                        .iter()
                        .take_while(|&&u| utts[u].len() > s)
                        .map(|&u| if reversed { start[u] + utts[u].len() - 1 - s } else { start[u] + s })
                        .collect()
                })
                .collect()
        };
        let (fwd_seq, offsets) = run_lstm_ragged(tape, ids.enc[0], &parts, &steps(false), k);
        let (bwd_seq, _) = run_lstm_ragged(tape, ids.enc[1], &parts, &steps(true), k);
        // grid column s * n + u holds token s of utterance u in both
        // directions; padding stays zero
        let grid = |reversed: bool| -> Vec<Option<usize>> {
            (0..s_max * n)
                .map(|col| {
                    let (s, u) = (col / n, col % n);
                    let len = utts[u].len();
                    (s < len).then(|| offsets[if reversed { len - 1 - s } else { s }] + rank[u])
                })
                .collect()
        };
        let finals: Vec<Option<usize>> = (0..n).map(|u| Some(offsets[utts[u].len() - 1] + rank[u])).collect();
        let fwd_all = tape.select_cols(fwd_seq, grid(false));
        let bwd_all = tape.select_cols(bwd_seq, grid(true));
        let fwd_last = tape.select_cols(fwd_seq, finals.clone());
        let bwd_last = tape.select_cols(bwd_seq, finals);
        let outputs = tape.concat_rows(&[fwd_all, bwd_all]);

        let valid: Vec<usize> = utts.iter().map(|u| u.len()).collect();
        let flat_logits = match &ids.attn {
            Attn::RoleMixed { w, b, g } => {
                let present = blocks.iter().enumerate().filter(|(_, b)| !b.is_empty()).map(|(r, _)| r);
                let mut scores = Vec::with_capacity(2);
                for (r, x) in present.zip(&parts) {
                    let wv = tape.param(w[r]);
                    let bv = tape.param(b[r]);
                    let hidden = tape.affine_split(wv, x, bv);
                    let hidden = tape.tanh(hidden);
                    let gv = tape.param(g[r]);
                    let gt = tape.transpose(gv);
                    scores.push(tape.matmul(gt, hidden));
                }
                let scores = tape.concat_cols(&scores);
                let mut damp = Mat::zeros((1, packed));
                for (u, utt) in utts.iter().enumerate() {
                    for s in 0..utt.len() {
                        damp[[0, start[u] + s]] = 1.0 - utt.term_freqs[s];
                    }
                }
                let damped = tape.mul_const(scores, damp);
                let grid = (0..s_max * n)
                    .map(|c| {
                        let (s, u) = (c / n, c % n);
                        (s < utts[u].len()).then(|| start[u] + s)
                    })
                    .collect();
                Some(tape.select_cols(damped, grid))
            }
            Attn::Shared { w, b, g } => {
                let wv = tape.param(*w);
                let bv = tape.param(*b);
                let hidden = tape.affine(wv, outputs, bv);
                let hidden = tape.tanh(hidden);
                let gv = tape.param(*g);
                let gt = tape.transpose(gv);
                Some(tape.matmul(gt, hidden))
            }
            Attn::Uniform => None,
        };
        let attention = match flat_logits {
            Some(l) => {
                let grid = tape.reshape(l, s_max, n);
                tape.masked_softmax_cols(grid, valid)
            }
            None => {
                let mut w = Mat::zeros((s_max, n));
                for (u, utt) in utts.iter().enumerate() {
                    let len = utt.len();
                    for s in 0..len {
                        w[[s, u]] = 1.0 / len as f64;
                    }
                }
                tape.constant(w)
            }
        };
        let flat = tape.reshape(attention, 1, s_max * n);
        let weighted = tape.mul_row(outputs, flat);
        let summary = tape.sum_col_blocks(weighted, s_max);

        let emotion = Mat::from_shape_fn((1, n), |(_, u)| if cfg.use_emotion { utts[u].emotion } else { 0.0 });
        let emotion = tape.constant(emotion);
        let v = tape.concat_rows(&[fwd_last, bwd_last, summary, emotion]);
        Ok((v, attention))
    }

    /// Per-utterance class probabilities `[normal, transferable]` for each
    /// dialogue of the batch, without dropout.
    pub fn predict_batch(&self, batch: &[&FeaturizedDialogue]) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut tape = Tape::new(&self.params);
        let pass = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, batch, None)?;
        let logits = tape.value(pass.logits);
        let layout = &pass.layout;
        Ok((0..layout.n_dialogues)
            .map(|i| {
                (0..layout.dialogue_lens[i])
                    .map(|t| {
                        let p = softmax_col(logits.column(layout.step_col(i, t)).iter().copied());
                        [p[0], p[1]]
                    })
                    .collect()
            })
            .collect())
    }

    /// Labels one dialogue: transferable probability per utterance and the
    /// argmax label.
    pub fn label_dialogue(&self, dialogue: &FeaturizedDialogue) -> Result<SessionPrediction> {
        let probs = self.predict_batch(&[dialogue])?.remove(0);
        Ok(SessionPrediction::from_probs(
            dialogue.session_id.clone(),
            probs.iter().map(|p| p[1]).collect(),
            0.5,
        ))
    }

    /// The `4k + 1` utterance vector `s_t ⊕ a_t ⊕ e_t`.
    pub fn encode_utterance(&self, utt: &FeaturizedUtterance) -> Result<Vec<f64>> {
        Ok(self.encode_with_attention(utt)?.0)
    }

    /// Utterance vector plus the token attention weights.
    pub fn encode_with_attention(&self, utt: &FeaturizedUtterance) -> Result<(Vec<f64>, Vec<f64>)> {
        check_utterance(utt, &self.config)?;
        let ids = Ids::resolve(&self.params, self.config.encoder_mode)?;
        let layout = BatchLayout {
            n_dialogues: 1,
            steps: 1,
            dialogue_lens: vec![1],
            utterance_offset: vec![0],
            n_utterances: 1,
            max_tokens: utt.len(),
            token_lens: vec![utt.len()],
        };
        let mut tape = Tape::new(&self.params);
        let (v, a) = self.encode(&mut tape, &ids, &[utt], &layout)?;
        Ok((tape.value(v).column(0).to_vec(), tape.value(a).column(0).to_vec()))
    }

    /// Matching matrix of one dialogue computed by the network's batched path.
    pub fn dialogue_matching(&self, dialogue: &FeaturizedDialogue) -> Result<MatchingMatrix> {
        let mut tape = Tape::new(&self.params);
        let pass = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &[dialogue], None)?;
        let m = tape.value(pass.matching);
        let l = dialogue.len();
        Ok(MatchingMatrix {
            values: (0..l).map(|t| (0..l).map(|j| m[[j, t]]).collect()).collect(),
        })
    }

    /// Sum of squared parameters, the L2 penalty before scaling.
    pub fn squared_norm(&self) -> f64 {
        self.params.squared_norm()
    }
}

fn check_utterance(u: &FeaturizedUtterance, cfg: &ModelConfig) -> Result<()> {
    let n = u.len();
    if n == 0 {
        return Err(Error::Featurize("utterance without tokens".into()));
    }
    for (name, len) in [("pos_tags", u.pos_tags.len()), ("term_freqs", u.term_freqs.len()), ("positions", u.positions.len())] {
        if len != n {
            return Err(Error::Shape {
                tensor: name.into(),
                expected: vec![n],
                found: vec![len],
            });
        }
    }
    if let Some(&id) = u.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Shape {
            tensor: "word_embedding".into(),
            expected: vec![cfg.embed_dim, cfg.vocab_size],
            found: vec![cfg.embed_dim, id as usize + 1],
        });
    }
    if cfg.encoder_mode == EncoderMode::Difficulty {
        if let Some(&t) = u.pos_tags.iter().find(|&&t| t as usize >= cfg.n_pos) {
            return Err(Error::Shape {
                tensor: "pos_onehots".into(),
                expected: vec![n, cfg.n_pos],
                found: vec![n, t as usize + 1],
            });
        }
        if u.positions.contains(&0) {
            return Err(Error::Featurize("positions are 1-based".into()));
        }
    }
    Ok(())
}

fn check_finite(tape: &Tape<'_>, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(layer.into()))
    }
}

/// Masked LSTM over `masks.len()` column blocks of `input`
/// (`in x steps*n`). Padded columns carry their state through unchanged.
/// Returns the per-step hidden outputs.
fn run_lstm(
    tape: &mut Tape<'_>,
    (w_ih, w_hh, b): (usize, usize, usize),
    input: Var,
    masks: &[Vec<f64>],
    n: usize,
    k: usize,
) -> Vec<Var> {
    let wi = tape.param(w_ih);
    let wh = tape.param(w_hh);
    let bv = tape.param(b);
    let proj = tape.affine(wi, input, bv);
    let mut state = tape.constant(Mat::zeros((2 * k, n)));
    let mut outs = Vec::with_capacity(masks.len());
    for (s, mask) in masks.iter().enumerate() {
        let xs = tape.slice_cols(proj, s * n, (s + 1) * n);
        let h = tape.slice_rows(state, 0, k);
        let c = tape.slice_rows(state, k, 2 * k);
        let rec = tape.matmul(wh, h);
        let gates = tape.add(xs, rec);
        let next = tape.lstm_cell(gates, c);
        state = if mask.iter().all(|&m| m == 1.0) {
            next
        } else {
            tape.blend(next, state, mask.clone())
        };
        outs.push(tape.slice_rows(state, 0, k));
    }
    outs
}

/// LSTM over sequences sorted longest first. `parts` holds column blocks
/// of row-stacked inputs that are projected and concatenated;
/// `cols[s]` lists the projected column of every sequence still running
/// at step `s`, so its length never grows. Returns all hidden outputs
/// side by side (`k x sum(cols[s].len())`) and the column offset of each
/// step within them.
fn run_lstm_ragged(
    tape: &mut Tape<'_>,
    (w_ih, w_hh, b): (usize, usize, usize),
    parts: &[Vec<Var>],
    cols: &[Vec<usize>],
    k: usize,
) -> (Var, Vec<usize>) {
    let wi = tape.param(w_ih);
    let wh = tape.param(w_hh);
    let bv = tape.param(b);
    let blocks: Vec<Var> = parts.iter().map(|x| tape.affine_split(wi, x, bv)).collect();
    let proj = if blocks.len() == 1 { blocks[0] } else { tape.concat_cols(&blocks) };
    let width = cols.first().map_or(0, Vec::len);
    let mut h = tape.constant(Mat::zeros((k, width)));
    let mut c = tape.constant(Mat::zeros((k, width)));
    let mut outs = Vec::with_capacity(cols.len());
    let mut offsets = Vec::with_capacity(cols.len());
    let mut offset = 0;
    for step in cols {
        let active = step.len();
        if active < tape.shape(h).1 {
            h = tape.slice_cols(h, 0, active);
            c = tape.slice_cols(c, 0, active);
        }
        let xs = tape.select_cols(proj, step.iter().map(|&i| Some(i)).collect());
        let rec = tape.matmul(wh, h);
        let gates = tape.add(xs, rec);
        let state = tape.lstm_cell(gates, c);
        h = tape.slice_rows(state, 0, k);
        c = tape.slice_rows(state, k, 2 * k);
        outs.push(h);
        offsets.push(offset);
        offset += active;
    }
    (tape.concat_cols(&outs), offsets)
}

fn dropout<R: Rng>(tape: &mut Tape<'_>, x: Var, rate: f64, rng: &mut R) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let dim = tape.shape(x);
    let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    tape.mul_const(x, mask)
}

/// Token attention weights of utterance `u` from a forward pass.
pub fn attention_column(tape: &Tape<'_>, pass: &ForwardPass, u: usize) -> Vec<f64> {
    let a = tape.value(pass.token_attention);
    a.index_axis(Axis(1), u).iter().take(pass.layout.token_lens[u]).copied().collect()
}
