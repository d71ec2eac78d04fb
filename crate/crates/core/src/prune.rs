//! The prune decoder, the pruning schedule, top-k masks and their sigmoid
//! relaxation used during training.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backbone::TokenState;
use crate::error::{Error, Result};
use crate::layers::{self, attention_specs, ffn_specs, linear_specs, norm_specs};
use crate::numerics::{Real, Tape, Var};
use crate::params::{Graph, Init, ParamSpec};

pub const DEFAULT_ALPHA: f32 = 10.0;

fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}

/// Stage boundaries `l_1 < … < l_M` (prune after layer `l_m`, 1-based) with
/// one pruning rate per boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub boundaries: Vec<usize>,
    pub rates: Vec<f32>,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self::empty()
    }
}

impl PruneSchedule {
    pub fn empty() -> Self {
        Self {
            boundaries: Vec::new(),
            rates: Vec::new(),
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn new(boundaries: Vec<usize>, rates: Vec<f32>) -> Self {
        Self {
            boundaries,
            rates,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.boundaries.len() != self.rates.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} boundaries but {} rates",
                self.boundaries.len(),
                self.rates.len()
            )));
        }
        let mut prev = 0;
        for &b in &self.boundaries {
            if b <= prev || b > num_layers {
                return Err(Error::InvalidSchedule(format!(
                    "boundaries {:?} must be strictly increasing within [1, {num_layers}]",
                    self.boundaries
                )));
            }
            prev = b;
        }
        for &r in &self.rates {
            check_rate(r)?;
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidSchedule(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Layer ranges of the `M + 1` stages: before the first boundary,
    /// between consecutive boundaries, and after the last.
    pub fn stage_ranges(&self, num_layers: usize) -> Result<Vec<Range<usize>>> {
        self.validate(num_layers)?;
        let mut edges = vec![0];
        edges.extend(&self.boundaries);
        edges.push(num_layers);
        Ok(edges.windows(2).map(|w| w[0]..w[1]).collect())
    }
}

fn check_rate(r: f32) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidRate(r))
    }
}

/// Tokens kept at rate `r`: `ceil((1 − r)·N)`, computed as `N − floor(r·N)`.
/// The rate is first snapped to six decimals, since an `f32` such as 0.7 is
/// stored as 0.69999999 and would otherwise keep an extra token.
pub fn retained_count(n: usize, r: f32) -> Result<usize> {
    check_rate(r)?;
    let r = ((r as f64) * 1e6).round() / 1e6;
    let dropped = (r * (n as f64) + 1e-9).floor() as usize;
    Ok((n - dropped.min(n)).max(1))
}

/// Indices of the `k` highest scores, highest first; equal scores go to the
/// lower index.
pub fn topk_indices<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].to_f64().total_cmp(&scores[a].to_f64()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn topk_prune_mask<T: Real>(scores: &[T], r: f32) -> Result<Vec<bool>> {
    let k = retained_count(scores.len(), r)?;
    let mut mask = vec![false; scores.len()];
    for i in topk_indices(scores, k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// The `k`-th highest score, the cut between retained and frozen tokens.
pub fn threshold<T: Real>(scores: &[T], r: f32) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::Config("threshold: empty score vector".into()));
    }
    let k = retained_count(scores.len(), r)?;
    Ok(scores[topk_indices(scores, k)[k - 1]])
}

/// `sigmoid(α·(s − τ))` with `τ` held constant.
pub fn soft_gate_with_threshold<T: Real>(tape: &mut Tape<T>, scores: Var, tau: f64, alpha: f64) -> Result<Var> {
    let shifted = tape.add_scalar(scores, -tau)?;
    let z = tape.scale(shifted, alpha)?;
    tape.sigmoid(z)
}

/// Sigmoid relaxation of [`topk_prune_mask`]; the threshold is taken from
/// the current score values and receives no gradient.
pub fn soft_gate<T: Real>(tape: &mut Tape<T>, scores: Var, r: f32, alpha: f32) -> Result<Var> {
    let tau = threshold(tape.value(scores).data(), r)?;
    soft_gate_with_threshold(tape, scores, tau.to_f64(), alpha as f64)
}

pub fn prune_decoder_specs(embed_dim: usize, guide_dim: usize, ffn_mult: usize) -> Vec<ParamSpec> {
    let d = guide_dim;
    let mut s = linear_specs("prune.neck", embed_dim, d);
    s.push(ParamSpec::new("prune.query", &[1, d], Init::FanIn(d)));
    s.extend(attention_specs("prune.self_attn", d));
    s.extend(ffn_specs("prune.self_ffn", d, ffn_mult * d));
    s.extend(attention_specs("prune.cat_to_img", d));
    s.extend(ffn_specs("prune.cat_ffn", d, ffn_mult * d));
    s.extend(attention_specs("prune.img_to_cat", d));
    for block in DECODER_BLOCKS {
        s.extend(norm_specs(&format!("prune.{block}.norm"), d));
    }
    s
}

const DECODER_BLOCKS: [&str; 5] = ["self_attn", "self_ffn", "cat_to_img", "cat_ffn", "img_to_cat"];

/// `LN(x + update)`, the post-norm residual wrapper of every decoder block.
fn add_norm<T: Real>(g: &mut Graph<T>, x: Var, update: Var, block: &str) -> Result<Var> {
    let sum = g.tape.add(x, update)?;
    layers::layer_norm(g, sum, &format!("prune.{block}.norm"))
}

/// Relevance score of each of the `N` rows of `tokens` (N×D) to the guidance
/// row `seg` (1×d), as an `N`-vector.
///
/// ```text
/// T_img  = neck(tokens)
/// T_cat  = FFN(MHSA(T_q | T_seg))
/// T_cat' = FFN(MHSA(tgt = T_cat, src = T_img))
/// T_img' = MHSA(tgt = T_img, src = T_cat')
/// P_s    = T_img' · T_cat'[0]ᵀ
/// ```
///
/// Each MHSA and FFN block is wrapped as `LN(x + block(x))`, as in the
/// two-way transformer blocks the design is taken from.
pub fn prune_decoder_forward<T: Real>(g: &mut Graph<T>, tokens: Var, seg: Var) -> Result<Var> {
    let img = layers::linear(g, tokens, "prune.neck")?;
    let d = g.tape.shape(img)[1];
    if g.tape.value(seg).len() != d {
        return Err(Error::Dimension {
            op: "prune_decoder_forward",
            lhs: g.tape.shape(seg).to_vec(),
            rhs: vec![1, d],
        });
    }
    let seg = g.tape.reshape(seg, &[1, d])?;
    let query = g.param("prune.query")?;
    let cat = g.tape.concat_rows(&[query, seg])?;
    let a = layers::attention(g, cat, cat, "prune.self_attn", 1)?;
    let cat = add_norm(g, cat, a, "self_attn")?;
    let f = layers::ffn(g, cat, "prune.self_ffn")?;
    let cat = add_norm(g, cat, f, "self_ffn")?;
    let a = layers::attention(g, cat, img, "prune.cat_to_img", 1)?;
    let cat = add_norm(g, cat, a, "cat_to_img")?;
    let f = layers::ffn(g, cat, "prune.cat_ffn")?;
    let cat = add_norm(g, cat, f, "cat_ffn")?;
    let a = layers::attention(g, img, cat, "prune.img_to_cat", 1)?;
    let img = add_norm(g, img, a, "img_to_cat")?;
    let q = g.tape.slice_rows(cat, 0, 1)?;
    let qt = g.tape.transpose(q)?;
    let scores = g.tape.matmul(img, qt)?;
    let n = g.tape.shape(scores)[0];
    g.tape.reshape(scores, &[n])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Soft gates, every token computed.
    Train,
    /// Hard top-k, frozen tokens skipped.
    Infer,
}

/// Scores all `N` tokens (frozen ones included) and sets the next stage's
/// active set (infer) or gates (train).
pub fn apply_pruning_stage<T: Real>(
    g: &mut Graph<T>,
    state: TokenState,
    seg: Var,
    schedule: &PruneSchedule,
    stage: usize,
    mode: Mode,
) -> Result<TokenState> {
    let &rate = schedule
        .rates
        .get(stage)
        .ok_or_else(|| Error::InvalidSchedule(format!("stage {stage} of a {}-stage schedule", schedule.len())))?;
    let scores = prune_decoder_forward(g, state.values, seg)?;
    let values: Vec<f32> = g.tape.value(scores).data().iter().map(|v| v.to_f32()).collect();
    match mode {
        Mode::Infer => Ok(TokenState {
            active: topk_prune_mask(&values, rate)?,
            scores: Some(values),
            gates: None,
            ..state
        }),
        Mode::Train => {
            let gates = soft_gate(&mut g.tape, scores, rate, schedule.alpha)?;
            Ok(TokenState {
                active: vec![true; state.n_tokens()],
                scores: Some(values),
                gates: Some(gates),
                ..state
            })
        }
    }
}

/// `g·v_new + (1 − g)·v_old`, row by row.
pub fn blend_gated<T: Real>(tape: &mut Tape<T>, gates: Var, v_new: Var, v_old: Var) -> Result<Var> {
    let delta = tape.sub(v_new, v_old)?;
    let scaled = tape.scale_rows(delta, gates)?;
    tape.add(v_old, scaled)
}

/// All `N` rows in patch order: active tokens with their final values,
/// frozen tokens with the values they were frozen at.
pub fn merge_for_decoder(state: &TokenState) -> Var {
    state.values
}
