use serde::Serialize;

use crate::costmodel::{flops_estimate, prune_decoder_cost, CostConfig};
use crate::error::Result;
use crate::model::{forward, ModelConfig, StageTrace};
use crate::numerics::Tensor;
use crate::objectives::{binarize, iou, miou, prune_precision, prune_recall, SampleMetrics};
use crate::params::{Graph, ParamStore, Trainable};
use crate::prune::{Mode, PruneSchedule};
use crate::synthdata::Dataset;

/// Inference-mode output for one image and task.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `H×W` mask logits.
    pub logits: Tensor,
    pub stages: Vec<StageTrace>,
}

pub fn predict(params: &ParamStore, model: &ModelConfig, image: &Tensor, task: usize, schedule: &PruneSchedule) -> Result<Prediction> {
    let mut g: Graph<f32> = Graph::new(params, Trainable::None);
    let out = forward(&mut g, image, task, schedule, Mode::Infer, model)?;
    Ok(Prediction {
        logits: g.tape.value(out.logits).clone(),
        stages: out.stages,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    /// Corpus-mean fraction of relevant tokens retained, per stage.
    pub prune_recall: Vec<f64>,
    pub prune_precision: Vec<f64>,
    /// Analytic backbone FLOPs under the schedule, prune-decoder calls
    /// included.
    pub flops: f64,
    pub flops_unpruned: f64,
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn flops_reduction(&self) -> f64 {
        1.0 - self.flops / self.flops_unpruned
    }
}

/// Analytic cost model of `model`'s backbone with prune-decoder overhead.
pub fn cost_config(model: &ModelConfig) -> CostConfig {
    let v = &model.vit;
    CostConfig::analytic(v.num_layers, v.n_tokens(), v.embed_dim, v.num_heads, v.ffn_mult)
        .with_decoder_overhead(prune_decoder_cost(v.n_tokens(), v.embed_dim, model.guide_dim, model.decoder_ffn_mult))
}

/// Hard top-k evaluation over every sample of `data`.
pub fn evaluate(params: &ParamStore, model: &ModelConfig, data: &Dataset, schedule: &PruneSchedule) -> Result<EvalReport> {
    let cost = cost_config(model);
    let mut samples = Vec::with_capacity(data.samples.len());
    let mut recall = vec![0.0; schedule.len()];
    let mut precision = vec![0.0; schedule.len()];
    for (i, s) in data.samples.iter().enumerate() {
        let pred = predict(params, model, &s.image, s.task_id, schedule)?;
        let gt: Vec<bool> = s.mask.data().iter().map(|&v| v > 0.5).collect();
        let sample_iou = iou(&binarize(pred.logits.data()), &gt)?;
        let (mut r_sum, mut p_sum) = (0.0, 0.0);
        for (m, st) in pred.stages.iter().enumerate() {
            let r = prune_recall(&st.active, s.labels.data());
            let p = prune_precision(&st.active, s.labels.data());
            recall[m] += r;
            precision[m] += p;
            r_sum += r;
            p_sum += p;
        }
        let stages = pred.stages.len().max(1) as f64;
        samples.push(SampleMetrics {
            sample: i,
            iou: sample_iou,
            prune_recall: if pred.stages.is_empty() { 1.0 } else { r_sum / stages },
            prune_precision: if pred.stages.is_empty() { 1.0 } else { p_sum / stages },
        });
    }
    let n = samples.len().max(1) as f64;
    let ious: Vec<f64> = samples.iter().map(|s| s.iou).collect();
    Ok(EvalReport {
        miou: miou(&ious),
        prune_recall: recall.into_iter().map(|v| v / n).collect(),
        prune_precision: precision.into_iter().map(|v| v / n).collect(),
        flops: flops_estimate(schedule, &cost)?,
        flops_unpruned: flops_estimate(&PruneSchedule::empty(), &cost)?,
        samples,
    })
}
