use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};

use serde::{Deserialize, Serialize};

use super::{adam_step, evaluate, load_checkpoint, save_checkpoint, AdamState, CheckpointMeta, Phase, RunConfig};
use crate::error::{Error, Result};
use crate::model::{encode_prefix, forward, forward_tokens, ModelConfig};
use crate::numerics::Tensor;
use crate::objectives::{binarize, iou, vltp_loss};
use crate::params::{Graph, ParamStore, Trainable};
use crate::prune::{Mode, PruneSchedule};
use crate::rng::SplitMix64;
use crate::synthdata::{Dataset, GUIDE_PARAM};

/// One line of the metrics history. Means over the epoch's training
/// samples, taken from the forward passes used for the updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub lx: f64,
    pub lp: f64,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochMetrics>,
    pub meta: CheckpointMeta,
}

/// Loads data and initial weights per `cfg`, trains, and writes the
/// checkpoint, its sidecar and (optionally) the metrics history.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.train_data)?;
    let init = match cfg.phase {
        Phase::A => None,
        Phase::B => {
            let path = cfg.init_checkpoint.as_ref().expect("validated");
            let (params, meta) = load_checkpoint(path)?;
            if meta.model != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            Some(params)
        }
    };
    let mut metrics = match &cfg.metrics {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut write_err = None;
    let (params, history) = train_on(cfg, &data, init, |m| {
        if let Some(w) = metrics.as_mut() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|()| w.flush()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(w) = metrics.as_mut() {
        let path = cfg.metrics.as_ref().expect("metrics path");
        if let Some(e) = write_err {
            return Err(Error::io(path, e));
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }

    let schedule = cfg.effective_schedule();
    let (mut eval_miou, mut eval_miou_scheduled) = (None, None);
    if let Some(path) = &cfg.eval_data {
        let eval = Dataset::load(path)?;
        eval_miou = Some(evaluate(&params, &cfg.model, &eval, &PruneSchedule::empty())?.miou);
        if !schedule.is_empty() {
            eval_miou_scheduled = Some(evaluate(&params, &cfg.model, &eval, &schedule)?.miou);
        }
    }
    let meta = CheckpointMeta {
        phase: cfg.phase,
        model: cfg.model.clone(),
        schedule,
        seed: cfg.seed,
        epochs: cfg.epochs,
        eval_miou,
        eval_miou_scheduled,
    };
    save_checkpoint(&cfg.checkpoint, &params, &meta)?;
    Ok(TrainOutcome { params, history, meta })
}

fn check_data(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let vit = &model.vit;
    if data.meta.scene.height != vit.image_height || data.meta.scene.width != vit.image_width || data.meta.scene.patch_size != vit.patch_size {
        return Err(Error::Config(format!(
            "dataset images are {}×{} with patch {}, model expects {}×{} with patch {}",
            data.meta.scene.height, data.meta.scene.width, data.meta.scene.patch_size, vit.image_height, vit.image_width, vit.patch_size
        )));
    }
    if data.guidance.num_tasks() > model.num_tasks || data.guidance.dim() != model.guide_dim {
        return Err(Error::Config(format!(
            "dataset guidance table is {}×{}, model has {} tasks of width {}",
            data.guidance.num_tasks(),
            data.guidance.dim(),
            model.num_tasks,
            model.guide_dim
        )));
    }
    Ok(())
}

/// Fresh phase A parameters, with the dataset's guidance rows copied into
/// the leading rows of the model's table.
fn initial_params(model: &ModelConfig, data: &Dataset, seed: u64) -> Result<ParamStore> {
    let mut params = ParamStore::init(&model.param_specs(), seed);
    let src = data.guidance.table().data();
    params.get_mut(GUIDE_PARAM)?.data_mut()[..src.len()].copy_from_slice(src);
    Ok(params)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// The training loop over an in-memory dataset. `init` must be given for
/// phase B. `on_epoch` sees each epoch's metrics as they are produced.
pub fn train_on(
    cfg: &RunConfig,
    data: &Dataset,
    init: Option<ParamStore>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ParamStore, Vec<EpochMetrics>)> {
    cfg.model.validate()?;
    check_data(&cfg.model, data)?;
    let model = &cfg.model;
    let mut params = match (cfg.phase, init) {
        (_, Some(p)) => p,
        (Phase::A, None) => initial_params(model, data, cfg.seed)?,
        (Phase::B, None) => return Err(Error::Config("phase B needs initial parameters".into())),
    };
    params.check(&model.param_specs())?;
    let schedule = cfg.effective_schedule();
    let ranges = schedule.stage_ranges(model.vit.num_layers)?;
    let trainable = cfg.phase.trainable();

    // With the backbone frozen, layers before the first boundary are fixed
    // per sample and computed once.
    let prefix_layers = ranges[0].end;
    let cache: Vec<Tensor> = match cfg.phase {
        Phase::A => Vec::new(),
        Phase::B => data
            .samples
            .iter()
            .map(|s| {
                let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
                let x = encode_prefix(&mut g, &s.image, prefix_layers, model)?;
                Ok(g.tape.value(x).clone())
            })
            .collect::<Result<_>>()?,
    };

    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = data.samples.len();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::indexed(cfg.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut lx_sum, mut lp_sum, mut iou_sum) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
            for &i in batch {
                let sample = &data.samples[i];
                let mut g: Graph<f32> = Graph::new(&params, trainable.clone());
                let out = match cfg.phase {
                    Phase::A => forward(&mut g, &sample.image, sample.task_id, &schedule, Mode::Train, model),
                    Phase::B => {
                        let x = g.input(cache[i].clone());
                        forward_tokens(&mut g, x, prefix_layers, sample.task_id, &schedule, Mode::Train, model)
                    }
                }
                .map_err(|e| diverged(epoch, step, e))?;
                let parts = vltp_loss(&mut g.tape, out.logits, &sample.mask, &out.gates, Some(&sample.labels))
                    .map_err(|e| diverged(epoch, step, e))?;
                let scalar = |v| g.tape.value(v).data()[0] as f64;
                loss_sum += scalar(parts.total);
                lx_sum += scalar(parts.lx);
                lp_sum += parts.lp.map_or(0.0, scalar);
                let pred = binarize(g.tape.value(out.logits).data());
                let gt: Vec<bool> = sample.mask.data().iter().map(|&v| v > 0.5).collect();
                iou_sum += iou(&pred, &gt)?;

                for (name, grad) in g.backward(parts.total).map_err(|e| diverged(epoch, step, e))? {
                    let (_, sum) = acc.entry(name).or_insert_with(|| (grad.shape().to_vec(), vec![0.0; grad.len()]));
                    for (s, &v) in sum.iter_mut().zip(grad.data()) {
                        *s += v as f64;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: BTreeMap<String, Tensor> = acc
                .into_iter()
                .map(|(name, (shape, sum))| {
                    let data = sum.into_iter().map(|v| (v * scale) as f32).collect();
                    Ok((name, Tensor::new(shape, data)?))
                })
                .collect::<Result<_>>()?;
            adam_step(&mut params, &grads, &mut adam, &cfg.optimizer)?;
            step += 1;
        }
        let denom = n.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / denom,
            lx: lx_sum / denom,
            lp: lp_sum / denom,
            miou: iou_sum / denom,
        };
        if !metrics.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                detail: format!("epoch mean loss is {}", metrics.loss),
            });
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((params, history))
}
