//! FLOPs accounting for staged token pruning.
//!
//! Costs are linear in the retained-token fraction in calibrated mode and
//! follow a per-layer operation count in analytic mode. A multiply-accumulate
//! counts as two FLOPs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::{retained_count, PruneSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Global,
    /// Attention restricted to consecutive windows of this many tokens.
    Windowed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerCost {
    /// A fixed cost per layer at full token count, scaled by the retained
    /// fraction.
    Calibrated { per_layer: f64 },
    /// The analytic count at the actual retained token count.
    Analytic {
        n_tokens: usize,
        embed_dim: usize,
        heads: usize,
        ffn_mult: usize,
        attention: AttentionMode,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub total_layers: usize,
    pub layer_cost: LayerCost,
    /// Charged once per prune-decoder invocation.
    pub prune_decoder_cost: f64,
    pub include_decoder_overhead: bool,
}

impl CostConfig {
    /// `baseline / layers` per layer, e.g. 2976 / 32 = 93 GFLOPs.
    pub fn calibrated(total_layers: usize, baseline: f64) -> Result<Self> {
        if total_layers == 0 || !(baseline.is_finite() && baseline > 0.0) {
            return Err(Error::Config(format!(
                "calibrated cost needs positive layers and baseline, got {total_layers} and {baseline}"
            )));
        }
        Ok(Self {
            total_layers,
            layer_cost: LayerCost::Calibrated {
                per_layer: baseline / total_layers as f64,
            },
            prune_decoder_cost: 0.0,
            include_decoder_overhead: false,
        })
    }

    pub fn analytic(total_layers: usize, n_tokens: usize, embed_dim: usize, heads: usize, ffn_mult: usize) -> Self {
        Self {
            total_layers,
            layer_cost: LayerCost::Analytic {
                n_tokens,
                embed_dim,
                heads,
                ffn_mult,
                attention: AttentionMode::Global,
            },
            prune_decoder_cost: 0.0,
            include_decoder_overhead: false,
        }
    }

    pub fn with_decoder_overhead(mut self, cost: f64) -> Self {
        self.prune_decoder_cost = cost;
        self.include_decoder_overhead = true;
        self
    }

    fn validate(&self) -> Result<()> {
        let ok = match &self.layer_cost {
            LayerCost::Calibrated { per_layer } => per_layer.is_finite() && *per_layer > 0.0,
            LayerCost::Analytic {
                n_tokens,
                embed_dim,
                heads,
                ffn_mult,
                attention,
            } => {
                *n_tokens > 0
                    && *embed_dim > 0
                    && *heads > 0
                    && *ffn_mult > 0
                    && !matches!(attention, AttentionMode::Windowed(0))
            }
        };
        if ok && self.total_layers > 0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cost configuration {self:?}")))
        }
    }
}

/// FLOPs of one transformer layer over `n` tokens:
/// `2·4·n·D²` for the Q/K/V/output projections, `2·2·n²·D` for attention
/// scores and the weighted sum, `2·2·n·D·mult·D` for the FFN.
pub fn analytic_layer_cost(n: usize, d: usize, _heads: usize, ffn_mult: usize, attention: AttentionMode) -> f64 {
    let (n, d, m) = (n as f64, d as f64, ffn_mult as f64);
    let projections = 2.0 * 4.0 * n * d * d;
    let ffn = 2.0 * 2.0 * n * d * m * d;
    projections + ffn + attention_cost(n as usize, d, attention)
}

fn attention_cost(n: usize, d: f64, attention: AttentionMode) -> f64 {
    let quad = |t: usize| 2.0 * 2.0 * (t * t) as f64 * d;
    match attention {
        AttentionMode::Global => quad(n),
        AttentionMode::Windowed(w) => {
            let full = n / w;
            full as f64 * quad(w) + quad(n % w)
        }
    }
}

/// Matmul FLOPs of one prune-decoder call over `n` tokens of width `D`
/// with guidance width `d`.
pub fn prune_decoder_cost(n: usize, embed_dim: usize, guide_dim: usize, ffn_mult: usize) -> f64 {
    let (n, big, d, m) = (n as f64, embed_dim as f64, guide_dim as f64, ffn_mult as f64);
    let mm = |a: f64, b: f64, c: f64| 2.0 * a * b * c;
    let attn = |tgt: f64, src: f64| 2.0 * mm(tgt, d, d) + 2.0 * mm(src, d, d) + mm(tgt, d, src) + mm(tgt, src, d);
    let ffn2 = 2.0 * mm(2.0, d, m * d);
    mm(n, big, d) + attn(2.0, 2.0) + ffn2 + attn(2.0, n) + ffn2 + attn(n, 2.0) + mm(n, d, 1.0)
}

/// Total cost of running every layer under `schedule`.
///
/// Layers `1..=l_1` run at full token count; layers after boundary `l_m`
/// run with the fraction retained at stage `m`.
pub fn flops_estimate(schedule: &PruneSchedule, cfg: &CostConfig) -> Result<f64> {
    cfg.validate()?;
    let ranges = schedule.stage_ranges(cfg.total_layers)?;
    let mut total = 0.0;
    for (stage, range) in ranges.iter().enumerate() {
        let rate = if stage == 0 { 0.0 } else { schedule.rates[stage - 1] };
        let layers = range.len() as f64;
        total += layers
            * match &cfg.layer_cost {
                LayerCost::Calibrated { per_layer } => per_layer * (1.0 - rate as f64),
                LayerCost::Analytic {
                    n_tokens,
                    embed_dim,
                    heads,
                    ffn_mult,
                    attention,
                } => {
                    let k = retained_count(*n_tokens, rate)?;
                    analytic_layer_cost(k, *embed_dim, *heads, *ffn_mult, *attention)
                }
            };
    }
    if cfg.include_decoder_overhead {
        total += cfg.prune_decoder_cost * schedule.len() as f64;
    }
    Ok(total)
}

/// One row of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub boundaries: Vec<usize>,
    pub rates: Vec<f32>,
    pub flops: f64,
}

/// Grid for [`sweep`]: every boundary set is paired with every rate set of
/// the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub boundaries: Vec<Vec<usize>>,
    pub rates: Vec<Vec<f32>>,
}

/// Cross product of the grids, sorted by ascending cost. Pairs whose lengths
/// differ are skipped; invalid schedules are an error.
pub fn sweep(grid: &SweepGrid, cfg: &CostConfig) -> Result<Vec<SweepRow>> {
    if grid.boundaries.is_empty() || grid.rates.is_empty() {
        return Err(Error::Config("sweep grid must list at least one boundary set and one rate set".into()));
    }
    let mut rows = Vec::new();
    for b in &grid.boundaries {
        for r in grid.rates.iter().filter(|r| r.len() == b.len()) {
            let schedule = PruneSchedule::new(b.clone(), r.clone());
            rows.push(SweepRow {
                boundaries: b.clone(),
                rates: r.clone(),
                flops: flops_estimate(&schedule, cfg)?,
            });
        }
    }
    rows.sort_by(|a, b| a.flops.total_cmp(&b.flops));
    Ok(rows)
}

/// Rates as whole percentages, e.g. `0.5` → `50`.
pub fn rate_percent(r: f32) -> String {
    let pct = r as f64 * 100.0;
    if (pct - pct.round()).abs() < 1e-4 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

/// `boundaries,rates,gflops` with `|`-separated lists.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("boundaries,rates,gflops\n");
    for row in rows {
        let b: Vec<String> = row.boundaries.iter().map(|v| v.to_string()).collect();
        let r: Vec<String> = row.rates.iter().map(|&v| rate_percent(v)).collect();
        let _ = writeln!(out, "{},{},{:.1}", b.join("|"), r.join("|"), row.flops);
    }
    out
}
