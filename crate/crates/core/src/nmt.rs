//! Attention-based RNN encoder-decoder translation model.
//!
//! A bidirectional GRU encodes the source into per-position annotations.
//! The decoder interleaves two GRUs: a feedback GRU folds the previous
//! target word into the state before attention, and a context GRU folds the
//! attention-weighted context in afterwards. The output layer is a tanh
//! hidden layer (with optional dropout during training) followed by a linear
//! projection and softmax. The projection starts at zero so an untrained
//! model emits the uniform distribution.
//!
//! All forward passes are recorded on a [`Tape`], so one `backward` call
//! yields gradients for every parameter.

use crate::binfile;
use crate::corpus::{Vocabulary, EOS_ID};
use crate::numerics::{Binding, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &[u8; 4] = b"DNCK";
const CKPT_VERSION: u32 = 1;

/// Uniform half-width for every trained layer except the zero-started ones.
pub const INIT_SCALE: f64 = 0.05;

/// Token fed to the decoder before the first real target word. The end
/// marker doubles as the start marker; it never appears mid-sentence.
pub const START_ID: u32 = EOS_ID;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("cannot encode an empty sentence")]
    EmptySentence,
    #[error("model config invalid: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NmtError>;

/// Which model family a checkpoint file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Baseline,
    Cache,
}

impl CheckpointKind {
    pub(crate) fn tag(self) -> u32 {
        match self {
            CheckpointKind::Baseline => 0,
            CheckpointKind::Cache => 1,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Result<CheckpointKind> {
        match tag {
            0 => Ok(CheckpointKind::Baseline),
            1 => Ok(CheckpointKind::Cache),
            other => Err(NmtError::BadCheckpoint(format!(
                "unknown checkpoint kind tag {other}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Baseline => "baseline",
            CheckpointKind::Cache => "cache",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmtConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub out_dim: usize,
    /// Dropout rate on the output hidden layer; training only.
    pub dropout: f64,
}

impl Default for NmtConfig {
    fn default() -> Self {
        NmtConfig {
            emb_dim: 32,
            hidden_dim: 64,
            attn_dim: 64,
            out_dim: 64,
            dropout: 0.5,
        }
    }
}

impl NmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 || self.out_dim == 0 {
            return Err(NmtError::BadConfig("all dimensions must be nonzero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NmtError::BadConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binfile::write_u32(w, self.emb_dim as u32)?;
        binfile::write_u32(w, self.hidden_dim as u32)?;
        binfile::write_u32(w, self.attn_dim as u32)?;
        binfile::write_u32(w, self.out_dim as u32)?;
        binfile::write_f64(w, self.dropout)?;
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> std::io::Result<NmtConfig> {
        Ok(NmtConfig {
            emb_dim: binfile::read_u32(r)? as usize,
            hidden_dim: binfile::read_u32(r)? as usize,
            attn_dim: binfile::read_u32(r)? as usize,
            out_dim: binfile::read_u32(r)? as usize,
            dropout: binfile::read_f64(r)?,
        })
    }
}

/// Parameter ids for one GRU cell.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GruIds {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

fn register_gru(
    set: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    hid: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GruIds> {
    let mut gate = |set: &mut ParamSet, g: &str| -> Result<(ParamId, ParamId, ParamId)> {
        let w = set.register(
            &format!("{prefix}.w{g}"),
            Tensor::uniform(in_dim, hid, INIT_SCALE, rng),
        )?;
        let u = set.register(
            &format!("{prefix}.u{g}"),
            Tensor::uniform(hid, hid, INIT_SCALE, rng),
        )?;
        let b = set.register(&format!("{prefix}.b{g}"), Tensor::zeros(1, hid))?;
        Ok((w, u, b))
    };
    let (wz, uz, bz) = gate(set, "z")?;
    let (wr, ur, br) = gate(set, "r")?;
    let (wh, uh, bh) = gate(set, "h")?;
    Ok(GruIds {
        wz,
        uz,
        bz,
        wr,
        ur,
        br,
        wh,
        uh,
        bh,
    })
}

fn wire_gru(set: &ParamSet, prefix: &str) -> Result<GruIds> {
    let id = |g: &str| -> Result<ParamId> {
        set.id_of(&format!("{prefix}.{g}"))
            .ok_or_else(|| NmtError::BadCheckpoint(format!("missing parameter {prefix}.{g}")))
    };
    Ok(GruIds {
        wz: id("wz")?,
        uz: id("uz")?,
        bz: id("bz")?,
        wr: id("wr")?,
        ur: id("ur")?,
        br: id("br")?,
        wh: id("wh")?,
        uh: id("uh")?,
        bh: id("bh")?,
    })
}

/// One GRU transition `h' = GRU(x, h)`.
pub(crate) fn gru_step(
    tape: &mut Tape,
    bind: &Binding,
    ids: &GruIds,
    x: Var,
    h: Var,
) -> Result<Var> {
    let pre = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId| -> Result<Var> {
        let xw = tape.matmul(x, bind.var(w))?;
        let hu = tape.matmul(h, bind.var(u))?;
        let s = tape.add(xw, hu)?;
        Ok(tape.add(s, bind.var(b))?)
    };
    let z_pre = pre(tape, ids.wz, ids.uz, ids.bz)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = pre(tape, ids.wr, ids.ur, ids.br)?;
    let r = tape.sigmoid(r_pre);

    let rh = tape.mul(r, h)?;
    let xw = tape.matmul(x, bind.var(ids.wh))?;
    let ru = tape.matmul(rh, bind.var(ids.uh))?;
    let h_pre = tape.add(xw, ru)?;
    let h_pre = tape.add(h_pre, bind.var(ids.bh))?;
    let h_bar = tape.tanh(h_pre);

    let keep = tape.affine(z, -1.0, 1.0); // 1 - z
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, h_bar)?;
    Ok(tape.add(old, new)?)
}

#[derive(Debug, Clone)]
pub(crate) struct NmtParamIds {
    src_emb: ParamId,
    enc_fwd: GruIds,
    enc_bwd: GruIds,
    init_w: ParamId,
    init_b: ParamId,
    tgt_emb: ParamId,
    fb: GruIds,
    ctx: GruIds,
    att_w: ParamId,
    att_u: ParamId,
    att_v: ParamId,
    out_ws: ParamId,
    out_wc: ParamId,
    out_wy: ParamId,
    out_b: ParamId,
    out_wo: ParamId,
    out_bo: ParamId,
}

/// Encoded source sentence: one annotation row per token plus the initial
/// decoder state, all recorded on the sentence's tape.
pub struct Encoded {
    /// `[len, 2*hidden]`, forward and backward states concatenated.
    pub annotations: Var,
    /// Annotations premultiplied by the attention projection, `[len, attn]`.
    pub att_proj: Var,
    /// `[1, hidden]`.
    pub init_state: Var,
    pub len: usize,
}

/// Everything one decoder step produces, as tape handles.
pub struct StepOutput {
    /// New decoder state `[1, hidden]`.
    pub state: Var,
    /// Attention-weighted context `[1, 2*hidden]`.
    pub context: Var,
    /// Attention weights over source positions `[1, len]`.
    pub attention: Var,
    /// Embedding of the previous target word `[1, emb]`.
    pub prev_embedding: Var,
    /// Pre-softmax scores `[1, vocab]`.
    pub logits: Var,
    /// Output distribution `[1, vocab]`.
    pub probs: Var,
}

#[derive(Debug)]
pub struct NmtModel {
    pub cfg: NmtConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub params: ParamSet,
    ids: NmtParamIds,
}

impl NmtModel {
    pub fn new(
        cfg: NmtConfig,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        seed: u64,
    ) -> Result<NmtModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let (e, h, a, o) = (cfg.emb_dim, cfg.hidden_dim, cfg.attn_dim, cfg.out_dim);

        let src_emb = set.register(
            "enc.emb",
            Tensor::uniform(src_vocab_size, e, INIT_SCALE, &mut rng),
        )?;
        let enc_fwd = register_gru(&mut set, "enc.fwd", e, h, &mut rng)?;
        let enc_bwd = register_gru(&mut set, "enc.bwd", e, h, &mut rng)?;
        let init_w = set.register("dec.init.w", Tensor::uniform(h, h, INIT_SCALE, &mut rng))?;
        let init_b = set.register("dec.init.b", Tensor::zeros(1, h))?;
        let tgt_emb = set.register(
            "dec.emb",
            Tensor::uniform(tgt_vocab_size, e, INIT_SCALE, &mut rng),
        )?;
        let fb = register_gru(&mut set, "dec.fb", e, h, &mut rng)?;
        let ctx = register_gru(&mut set, "dec.ctx", 2 * h, h, &mut rng)?;
        let att_w = set.register("att.w", Tensor::uniform(h, a, INIT_SCALE, &mut rng))?;
        let att_u = set.register("att.u", Tensor::uniform(2 * h, a, INIT_SCALE, &mut rng))?;
        let att_v = set.register("att.v", Tensor::uniform(a, 1, INIT_SCALE, &mut rng))?;
        let out_ws = set.register("out.ws", Tensor::uniform(h, o, INIT_SCALE, &mut rng))?;
        let out_wc = set.register("out.wc", Tensor::uniform(2 * h, o, INIT_SCALE, &mut rng))?;
        let out_wy = set.register("out.wy", Tensor::uniform(e, o, INIT_SCALE, &mut rng))?;
        let out_b = set.register("out.b", Tensor::zeros(1, o))?;
        // Zero start: logits are identically zero, so the softmax is uniform.
        let out_wo = set.register("out.wo", Tensor::zeros(o, tgt_vocab_size))?;
        let out_bo = set.register("out.bo", Tensor::zeros(1, tgt_vocab_size))?;

        Ok(NmtModel {
            cfg,
            src_vocab_size,
            tgt_vocab_size,
            params: set,
            ids: NmtParamIds {
                src_emb,
                enc_fwd,
                enc_bwd,
                init_w,
                init_b,
                tgt_emb,
                fb,
                ctx,
                att_w,
                att_u,
                att_v,
                out_ws,
                out_wc,
                out_wy,
                out_b,
                out_wo,
                out_bo,
            },
        })
    }

    /// Rebuild a model around an existing parameter set (e.g. from a file).
    pub fn from_params(
        cfg: NmtConfig,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        params: ParamSet,
    ) -> Result<NmtModel> {
        cfg.validate()?;
        let id = |name: &str| -> Result<ParamId> {
            params
                .id_of(name)
                .ok_or_else(|| NmtError::BadCheckpoint(format!("missing parameter {name}")))
        };
        let ids = NmtParamIds {
            src_emb: id("enc.emb")?,
            enc_fwd: wire_gru(&params, "enc.fwd")?,
            enc_bwd: wire_gru(&params, "enc.bwd")?,
            init_w: id("dec.init.w")?,
            init_b: id("dec.init.b")?,
            tgt_emb: id("dec.emb")?,
            fb: wire_gru(&params, "dec.fb")?,
            ctx: wire_gru(&params, "dec.ctx")?,
            att_w: id("att.w")?,
            att_u: id("att.u")?,
            att_v: id("att.v")?,
            out_ws: id("out.ws")?,
            out_wc: id("out.wc")?,
            out_wy: id("out.wy")?,
            out_b: id("out.b")?,
            out_wo: id("out.wo")?,
            out_bo: id("out.bo")?,
        };
        let model = NmtModel {
            cfg,
            src_vocab_size,
            tgt_vocab_size,
            params,
            ids,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let (e, h, o) = (self.cfg.emb_dim, self.cfg.hidden_dim, self.cfg.out_dim);
        let expect = [
            ("enc.emb", (self.src_vocab_size, e)),
            ("dec.emb", (self.tgt_vocab_size, e)),
            ("dec.init.w", (h, h)),
            ("att.u", (2 * h, self.cfg.attn_dim)),
            ("out.wo", (o, self.tgt_vocab_size)),
        ];
        for (name, shape) in expect {
            let got = self
                .params
                .by_name(name)
                .ok_or_else(|| NmtError::BadCheckpoint(format!("missing parameter {name}")))?
                .shape();
            if got != shape {
                return Err(NmtError::BadCheckpoint(format!(
                    "parameter {name} has shape {}x{}, expected {}x{}",
                    got.0, got.1, shape.0, shape.1
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn tgt_emb_id(&self) -> ParamId {
        self.ids.tgt_emb
    }

    /// Run the bidirectional encoder over a source sentence. A sentence of
    /// `n` tokens yields exactly `n` annotations; nothing is appended.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, src_ids: &[u32]) -> Result<Encoded> {
        if src_ids.is_empty() {
            return Err(NmtError::EmptySentence);
        }
        let h = self.cfg.hidden_dim;
        let table = bind.var(self.ids.src_emb);
        let embs: Vec<Var> = src_ids
            .iter()
            .map(|&id| tape.embed(table, &[id as usize]))
            .collect::<std::result::Result<_, _>>()?;

        let mut fwd = Vec::with_capacity(embs.len());
        let mut state = tape.leaf(Tensor::zeros(1, h));
        for &x in &embs {
            state = gru_step(tape, bind, &self.ids.enc_fwd, x, state)?;
            fwd.push(state);
        }
        let mut bwd = vec![state; embs.len()]; // placeholder, overwritten below
        let mut state = tape.leaf(Tensor::zeros(1, h));
        for (j, &x) in embs.iter().enumerate().rev() {
            state = gru_step(tape, bind, &self.ids.enc_bwd, x, state)?;
            bwd[j] = state;
        }

        let rows: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect::<std::result::Result<_, _>>()?;
        let annotations = tape.concat_rows(&rows)?;
        let att_proj = tape.matmul(annotations, bind.var(self.ids.att_u))?;

        // Initial decoder state from the final backward state (position 0).
        let init = tape.matmul(bwd[0], bind.var(self.ids.init_w))?;
        let init = tape.add(init, bind.var(self.ids.init_b))?;
        let init_state = tape.tanh(init);

        Ok(Encoded {
            annotations,
            att_proj,
            init_state,
            len: src_ids.len(),
        })
    }

    /// One decoder step: fold in the previous word, attend, update the
    /// state, and produce the output distribution. `dropout_rng` enables
    /// training-mode dropout on the output hidden layer; decoding passes
    /// `None`.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        enc: &Encoded,
        prev_state: Var,
        y_prev: u32,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput> {
        let e_prev = tape.embed(bind.var(self.ids.tgt_emb), &[y_prev as usize])?;
        let s_tilde = gru_step(tape, bind, &self.ids.fb, e_prev, prev_state)?;

        let query = tape.matmul(s_tilde, bind.var(self.ids.att_w))?;
        let pre = tape.add_row(enc.att_proj, query)?;
        let pre = tape.tanh(pre);
        let scores = tape.matmul(pre, bind.var(self.ids.att_v))?;
        let scores = tape.transpose(scores);
        let attention = tape.softmax_rows(scores)?;
        let context = tape.matmul(attention, enc.annotations)?;

        let state = gru_step(tape, bind, &self.ids.ctx, context, s_tilde)?;

        let rs = tape.matmul(state, bind.var(self.ids.out_ws))?;
        let rc = tape.matmul(context, bind.var(self.ids.out_wc))?;
        let ry = tape.matmul(e_prev, bind.var(self.ids.out_wy))?;
        let sum = tape.add(rs, rc)?;
        let sum = tape.add(sum, ry)?;
        let sum = tape.add(sum, bind.var(self.ids.out_b))?;
        let mut hidden = tape.tanh(sum);
        if let Some(rng) = dropout_rng {
            if self.cfg.dropout > 0.0 {
                hidden = tape.dropout(hidden, self.cfg.dropout, rng);
            }
        }
        let logits = tape.matmul(hidden, bind.var(self.ids.out_wo))?;
        let logits = tape.add(logits, bind.var(self.ids.out_bo))?;
        let probs = tape.softmax_rows(logits)?;

        Ok(StepOutput {
            state,
            context,
            attention,
            prev_embedding: e_prev,
            logits,
            probs,
        })
    }

    /// Negative log-likelihood of a target sentence, with a hook that may
    /// replace each step's output distribution (e.g. by mixing in another
    /// scorer). The hook receives the step outputs, the previous target id
    /// and the step index; returning `step.probs` unchanged recovers the
    /// plain model, executing the exact same float operations.
    ///
    /// The end marker is appended to the target internally, so a sentence of
    /// `m` words is scored over `m + 1` predictions.
    pub fn sentence_nll_mixed<F>(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        src_ids: &[u32],
        tgt_ids: &[u32],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        mut mix: F,
    ) -> Result<Var>
    where
        F: FnMut(&mut Tape, &StepOutput, u32, usize) -> Result<Var>,
    {
        let enc = self.encode(tape, bind, src_ids)?;
        let mut state = enc.init_state;
        let mut y_prev = START_ID;
        let mut log_probs = Vec::with_capacity(tgt_ids.len() + 1);
        for (t, &y) in tgt_ids.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
            let step =
                self.decoder_step(tape, bind, &enc, state, y_prev, dropout_rng.as_deref_mut())?;
            let dist = mix(tape, &step, y_prev, t)?;
            let p = tape.pick(dist, 0, y as usize)?;
            log_probs.push(tape.ln(p));
            state = step.state;
            y_prev = y;
        }
        let row = tape.concat_cols(&log_probs)?;
        let total = tape.sum(row);
        Ok(tape.affine(total, -1.0, 0.0))
    }

    /// Plain sentence negative log-likelihood.
    pub fn sentence_nll(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        src_ids: &[u32],
        tgt_ids: &[u32],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.sentence_nll_mixed(tape, bind, src_ids, tgt_ids, dropout_rng, |_, step, _, _| {
            Ok(step.probs)
        })
    }

    pub fn save_checkpoint<P: AsRef<Path>>(
        &self,
        path: P,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binfile::write_header(&mut w, CKPT_MAGIC, CKPT_VERSION)?;
        binfile::write_u32(&mut w, CheckpointKind::Baseline.tag())?;
        self.cfg.write_to(&mut w)?;
        write_vocab_pair(&mut w, src_vocab, tgt_vocab)?;
        self.params.write_to(&mut w).map_err(NmtError::Numerics)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<Path>>(
        path: P,
    ) -> Result<(NmtModel, Vocabulary, Vocabulary)> {
        let mut r = BufReader::new(File::open(path)?);
        let kind = read_ckpt_kind(&mut r)?;
        if kind != CheckpointKind::Baseline {
            return Err(NmtError::WrongKind {
                expected: CheckpointKind::Baseline.name(),
                found: kind.name(),
            });
        }
        let cfg = NmtConfig::read_from(&mut r)?;
        let (src_vocab, tgt_vocab) = read_vocab_pair(&mut r)?;
        let params = ParamSet::read_from(&mut r).map_err(NmtError::Numerics)?;
        let model = NmtModel::from_params(cfg, src_vocab.size(), tgt_vocab.size(), params)?;
        Ok((model, src_vocab, tgt_vocab))
    }
}

pub(crate) fn write_vocab_pair<W: Write>(
    w: &mut W,
    src: &Vocabulary,
    tgt: &Vocabulary,
) -> Result<()> {
    src.write_to(w)?;
    tgt.write_to(w)?;
    Ok(())
}

pub(crate) fn read_vocab_pair<R: Read>(r: &mut R) -> Result<(Vocabulary, Vocabulary)> {
    let src = Vocabulary::read_from(r)?;
    let tgt = Vocabulary::read_from(r)?;
    Ok((src, tgt))
}

pub(crate) fn write_ckpt_header<W: Write>(w: &mut W, kind: CheckpointKind) -> Result<()> {
    binfile::write_header(w, CKPT_MAGIC, CKPT_VERSION)?;
    binfile::write_u32(w, kind.tag())?;
    Ok(())
}

pub(crate) fn read_ckpt_kind<R: Read>(r: &mut R) -> Result<CheckpointKind> {
    let version = binfile::read_header(r, CKPT_MAGIC)
        .map_err(|e| NmtError::BadCheckpoint(e.to_string()))?;
    if version != CKPT_VERSION {
        return Err(NmtError::BadCheckpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    CheckpointKind::from_tag(binfile::read_u32(r)?)
}

/// Kind tag of a checkpoint file without loading the parameters.
pub fn checkpoint_kind<P: AsRef<Path>>(path: P) -> Result<CheckpointKind> {
    let mut r = BufReader::new(File::open(path)?);
    read_ckpt_kind(&mut r)
}
