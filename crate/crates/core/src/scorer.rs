//! Cache scoring network, gate network, and the mixed output distribution.
//!
//! The cache model wraps the base translation model and two small MLPs. At
//! each decoder step the scorer assigns every cache member a score from the
//! decoder state, the attention context and the previous word's embedding
//! plus the member's own embedding; a softmax over members (zero elsewhere)
//! gives the cache distribution. A gate computed from the same step features
//! (or held fixed for ablations) blends it with the model distribution:
//!
//! With an empty cache the step reduces to the plain model, executing the
//! identical float operations, so an all-empty run reproduces baseline
//! losses exactly.

use crate::binfile;
use crate::cache::CacheState;
use crate::corpus::{StopWordIds, Vocabulary};
use crate::nmt::{
    read_ckpt_kind, read_vocab_pair, write_ckpt_header, write_vocab_pair, CheckpointKind,
    NmtConfig, NmtError, NmtModel, Result, StepOutput, INIT_SCALE,
};
use crate::numerics::{Binding, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Salt so the scorer's init stream differs from the base model's.
const SCORER_SEED_SALT: u64 = 0x5ca1_ab1e;

/// How the mixing weight on the model distribution is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Sigmoid output of the gate network, trained with everything else.
    Learned,
    /// Constant weight on the model distribution; the gate network is
    /// bypassed. `Fixed(1.0)` reproduces the base model exactly.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerConfig {
    pub score_hidden: (usize, usize),
    pub gate_hidden: (usize, usize),
    pub gate_mode: GateMode,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            score_hidden: (64, 32),
            gate_hidden: (32, 16),
            gate_mode: GateMode::Learned,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.score_hidden.0 == 0
            || self.score_hidden.1 == 0
            || self.gate_hidden.0 == 0
            || self.gate_hidden.1 == 0
        {
            return Err(NmtError::BadConfig(
                "scorer hidden sizes must be nonzero".into(),
            ));
        }
        if let GateMode::Fixed(v) = self.gate_mode {
            if !(0.0..=1.0).contains(&v) {
                return Err(NmtError::BadConfig(format!(
                    "fixed gate must be in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binfile::write_u32(w, self.score_hidden.0 as u32)?;
        binfile::write_u32(w, self.score_hidden.1 as u32)?;
        binfile::write_u32(w, self.gate_hidden.0 as u32)?;
        binfile::write_u32(w, self.gate_hidden.1 as u32)?;
        match self.gate_mode {
            GateMode::Learned => {
                binfile::write_u32(w, 0)?;
                binfile::write_f64(w, 0.0)?;
            }
            GateMode::Fixed(v) => {
                binfile::write_u32(w, 1)?;
                binfile::write_f64(w, v)?;
            }
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<ScorerConfig> {
        let score_hidden = (
            binfile::read_u32(r)? as usize,
            binfile::read_u32(r)? as usize,
        );
        let gate_hidden = (
            binfile::read_u32(r)? as usize,
            binfile::read_u32(r)? as usize,
        );
        let tag = binfile::read_u32(r)?;
        let value = binfile::read_f64(r)?;
        let gate_mode = match tag {
            0 => GateMode::Learned,
            1 => GateMode::Fixed(value),
            other => {
                return Err(NmtError::BadCheckpoint(format!(
                    "unknown gate mode tag {other}"
                )))
            }
        };
        Ok(ScorerConfig {
            score_hidden,
            gate_hidden,
            gate_mode,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ScorerIds {
    sw1: ParamId,
    sb1: ParamId,
    sw2: ParamId,
    sb2: ParamId,
    sw3: ParamId,
    sb3: ParamId,
    gw1: ParamId,
    gb1: ParamId,
    gw2: ParamId,
    gb2: ParamId,
    gw3: ParamId,
    gb3: ParamId,
}

/// Output of one mixed decoder step. With an empty cache `probs` is the
/// model distribution itself and the other fields are absent.
pub struct MixedStep {
    pub probs: Var,
    /// Gate weight on the model distribution, `[1, 1]`.
    pub alpha: Option<Var>,
    /// Cache distribution over the full vocabulary, `[1, vocab]`.
    pub p_cache: Option<Var>,
}

/// Per-step cache membership for scoring one target sentence during
/// training: the document cache as of the sentence start, grown with the
/// reference prefix word by word.
#[derive(Debug, Clone)]
pub struct TrainingCachePlan {
    memberships: Vec<Vec<u32>>,
}

impl TrainingCachePlan {
    /// `state` is the cache at the start of the sentence; it is not
    /// modified. Step `t` sees the state after the first `t` reference
    /// words, so the plan has `tgt_ids.len() + 1` entries (the final one
    /// scores the end marker).
    pub fn build(state: &CacheState, tgt_ids: &[u32], stop: &StopWordIds) -> TrainingCachePlan {
        let mut work = state.clone();
        let mut memberships = Vec::with_capacity(tgt_ids.len() + 1);
        for &y in tgt_ids {
            memberships.push(work.members());
            work.dynamic.insert(y, stop);
        }
        memberships.push(work.members());
        TrainingCachePlan { memberships }
    }

    /// A plan whose every step has an empty cache; scoring with it executes
    /// exactly the base model's operations.
    pub fn empty(steps: usize) -> TrainingCachePlan {
        TrainingCachePlan {
            memberships: vec![Vec::new(); steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.memberships.len()
    }

    pub fn membership(&self, t: usize) -> &[u32] {
        &self.memberships[t]
    }
}

/// The base model plus cache scorer and gate, sharing one parameter set.
#[derive(Debug)]
pub struct CacheModel {
    pub nmt: NmtModel,
    pub scorer_cfg: ScorerConfig,
    ids: ScorerIds,
}

impl CacheModel {
    pub fn new(
        nmt_cfg: NmtConfig,
        scorer_cfg: ScorerConfig,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        seed: u64,
    ) -> Result<CacheModel> {
        scorer_cfg.validate()?;
        let mut nmt = NmtModel::new(nmt_cfg, src_vocab_size, tgt_vocab_size, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SCORER_SEED_SALT);
        let ids = register_scorer(&mut nmt.params, &nmt_cfg, &scorer_cfg, &mut rng)?;
        Ok(CacheModel {
            nmt,
            scorer_cfg,
            ids,
        })
    }

    pub fn from_params(
        nmt_cfg: NmtConfig,
        scorer_cfg: ScorerConfig,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        params: ParamSet,
    ) -> Result<CacheModel> {
        scorer_cfg.validate()?;
        let nmt = NmtModel::from_params(nmt_cfg, src_vocab_size, tgt_vocab_size, params)?;
        let id = |name: &str| -> Result<ParamId> {
            nmt.params
                .id_of(name)
                .ok_or_else(|| NmtError::BadCheckpoint(format!("missing parameter {name}")))
        };
        let ids = ScorerIds {
            sw1: id("cache.w1")?,
            sb1: id("cache.b1")?,
            sw2: id("cache.w2")?,
            sb2: id("cache.b2")?,
            sw3: id("cache.w3")?,
            sb3: id("cache.b3")?,
            gw1: id("gate.w1")?,
            gb1: id("gate.b1")?,
            gw2: id("gate.w2")?,
            gb2: id("gate.b2")?,
            gw3: id("gate.w3")?,
            gb3: id("gate.b3")?,
        };
        Ok(CacheModel {
            nmt,
            scorer_cfg,
            ids,
        })
    }

    /// Copy all base-model parameters from a trained baseline, leaving the
    /// scorer and gate at their fresh initialization.
    pub fn init_from_baseline(&mut self, baseline: &NmtModel) -> Result<()> {
        self.nmt
            .params
            .copy_values_from(&baseline.params)
            .map_err(NmtError::Numerics)
    }

    /// Cache distribution over the full vocabulary: a softmax over the
    /// member scores, scattered to the members' ids, zero everywhere else.
    pub fn p_cache(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        step: &StepOutput,
        members: &[u32],
    ) -> Result<Var> {
        if members.is_empty() {
            return Err(NmtError::Numerics(NumericsError::EmptyInput(
                "cache members",
            )));
        }
        let feats = tape.concat_cols(&[step.state, step.context, step.prev_embedding])?;
        let tiled = tape.broadcast_rows(feats, members.len())?;
        let ids: Vec<usize> = members.iter().map(|&m| m as usize).collect();
        let cand = tape.embed(bind.var(self.nmt.tgt_emb_id()), &ids)?;
        let input = tape.concat_cols(&[tiled, cand])?;

        let h1 = tape.matmul(input, bind.var(self.ids.sw1))?;
        let h1 = tape.add_row(h1, bind.var(self.ids.sb1))?;
        let h1 = tape.tanh(h1);
        let h2 = tape.matmul(h1, bind.var(self.ids.sw2))?;
        let h2 = tape.add_row(h2, bind.var(self.ids.sb2))?;
        let h2 = tape.tanh(h2);
        let scores = tape.matmul(h2, bind.var(self.ids.sw3))?;
        let scores = tape.add_row(scores, bind.var(self.ids.sb3))?;

        let row = tape.transpose(scores);
        let over_members = tape.softmax_rows(row)?;
        Ok(tape.scatter_cols(over_members, &ids, self.nmt.tgt_vocab_size)?)
    }

    /// Learned gate value for one step, `[1, 1]` in `(0, 1)`.
    pub fn gate_value(&self, tape: &mut Tape, bind: &Binding, step: &StepOutput) -> Result<Var> {
        let feats = tape.concat_cols(&[step.state, step.context, step.prev_embedding])?;
        let h1 = tape.matmul(feats, bind.var(self.ids.gw1))?;
        let h1 = tape.add(h1, bind.var(self.ids.gb1))?;
        let h1 = tape.tanh(h1);
        let h2 = tape.matmul(h1, bind.var(self.ids.gw2))?;
        let h2 = tape.add(h2, bind.var(self.ids.gb2))?;
        let h2 = tape.tanh(h2);
        let pre = tape.matmul(h2, bind.var(self.ids.gw3))?;
        let pre = tape.add(pre, bind.var(self.ids.gb3))?;
        Ok(tape.sigmoid(pre))
    }

    /// One decoder step's final distribution. An empty cache returns the
    /// model distribution untouched — not merely equal values, the same
    /// tape node — so empty-cache runs are bit-identical to the base model.
    pub fn mixed_step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        step: &StepOutput,
        members: &[u32],
    ) -> Result<MixedStep> {
        if members.is_empty() {
            return Ok(MixedStep {
                probs: step.probs,
                alpha: None,
                p_cache: None,
            });
        }
        let p_cache = self.p_cache(tape, bind, step, members)?;
        let alpha = match self.scorer_cfg.gate_mode {
            GateMode::Learned => self.gate_value(tape, bind, step)?,
            GateMode::Fixed(v) => tape.leaf(Tensor::scalar(v)),
        };
        let probs = mix_distributions(tape, p_cache, step.probs, alpha)?;
        Ok(MixedStep {
            probs,
            alpha: Some(alpha),
            p_cache: Some(p_cache),
        })
    }

    /// Joint negative log-likelihood of one sentence under the mixed
    /// distribution, with per-step cache membership from `plan`.
    pub fn sentence_nll(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        src_ids: &[u32],
        tgt_ids: &[u32],
        plan: &TrainingCachePlan,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if plan.steps() != tgt_ids.len() + 1 {
            return Err(NmtError::BadConfig(format!(
                "cache plan covers {} steps, sentence needs {}",
                plan.steps(),
                tgt_ids.len() + 1
            )));
        }
        self.nmt
            .sentence_nll_mixed(tape, bind, src_ids, tgt_ids, dropout_rng, |tape, step, _, t| {
                let mixed = self.mixed_step(tape, bind, step, plan.membership(t))?;
                Ok(mixed.probs)
            })
    }

    pub fn save_checkpoint<P: AsRef<Path>>(
        &self,
        path: P,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_ckpt_header(&mut w, CheckpointKind::Cache)?;
        self.nmt.cfg.write_to(&mut w)?;
        self.scorer_cfg.write_to(&mut w)?;
        write_vocab_pair(&mut w, src_vocab, tgt_vocab)?;
        self.nmt
            .params
            .write_to(&mut w)
            .map_err(NmtError::Numerics)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<Path>>(
        path: P,
    ) -> Result<(CacheModel, Vocabulary, Vocabulary)> {
        let mut r = BufReader::new(File::open(path)?);
        let kind = read_ckpt_kind(&mut r)?;
        if kind != CheckpointKind::Cache {
            return Err(NmtError::WrongKind {
                expected: CheckpointKind::Cache.name(),
                found: kind.name(),
            });
        }
        let nmt_cfg = NmtConfig::read_from(&mut r)?;
        let scorer_cfg = ScorerConfig::read_from(&mut r)?;
        let (src_vocab, tgt_vocab) = read_vocab_pair(&mut r)?;
        let params = ParamSet::read_from(&mut r).map_err(NmtError::Numerics)?;
        let model = CacheModel::from_params(
            nmt_cfg,
            scorer_cfg,
            src_vocab.size(),
            tgt_vocab.size(),
            params,
        )?;
        Ok((model, src_vocab, tgt_vocab))
    }
}

fn register_scorer(
    set: &mut ParamSet,
    nmt_cfg: &NmtConfig,
    scorer_cfg: &ScorerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScorerIds> {
    let (e, h) = (nmt_cfg.emb_dim, nmt_cfg.hidden_dim);
    let score_in = h + 2 * h + e + e;
    let gate_in = h + 2 * h + e;
    let (s1, s2) = scorer_cfg.score_hidden;
    let (g1, g2) = scorer_cfg.gate_hidden;
    let reg = |set: &mut ParamSet, name: &str, t: Tensor| -> Result<ParamId> {
        set.register(name, t).map_err(NmtError::Numerics)
    };
    Ok(ScorerIds {
        sw1: reg(set, "cache.w1", Tensor::uniform(score_in, s1, INIT_SCALE, rng))?,
        sb1: reg(set, "cache.b1", Tensor::zeros(1, s1))?,
        sw2: reg(set, "cache.w2", Tensor::uniform(s1, s2, INIT_SCALE, rng))?,
        sb2: reg(set, "cache.b2", Tensor::zeros(1, s2))?,
        // Zero start: every member scores 0, so the cache distribution
        // opens uniform over members.
        sw3: reg(set, "cache.w3", Tensor::zeros(s2, 1))?,
        sb3: reg(set, "cache.b3", Tensor::zeros(1, 1))?,
        gw1: reg(set, "gate.w1", Tensor::uniform(gate_in, g1, INIT_SCALE, rng))?,
        gb1: reg(set, "gate.b1", Tensor::zeros(1, g1))?,
        gw2: reg(set, "gate.w2", Tensor::uniform(g1, g2, INIT_SCALE, rng))?,
        gb2: reg(set, "gate.b2", Tensor::zeros(1, g2))?,
        // Zero start: sigmoid(0), an exact half-and-half gate.
        gw3: reg(set, "gate.w3", Tensor::zeros(g2, 1))?,
        gb3: reg(set, "gate.b3", Tensor::zeros(1, 1))?,
    })
}

/// `(1 - alpha) * p_cache + alpha * p_model`, elementwise over `[1, vocab]`
/// rows with a `[1, 1]` gate.
pub fn mix_distributions(tape: &mut Tape, p_cache: Var, p_model: Var, alpha: Var) -> Result<Var> {
    let keep = tape.affine(alpha, -1.0, 1.0);
    let cache_part = tape.mul_scalar(p_cache, keep)?;
    let model_part = tape.mul_scalar(p_model, alpha)?;
    Ok(tape.add(cache_part, model_part)?)
}
