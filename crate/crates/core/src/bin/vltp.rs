use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vltp_core::costmodel::{self, CostConfig, SweepGrid};
use vltp_core::error::{Error, Result};
use vltp_core::objectives::binarize;
use vltp_core::pipeline::{self, Phase, RunConfig};
use vltp_core::prune::PruneSchedule;
use vltp_core::synthdata::{Dataset, SceneConfig};
use vltp_core::viz;

#[derive(Parser)]
#[command(name = "vltp", version, about = "Guidance-conditioned token pruning for a staged ViT segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task-oriented segmentation dataset.
    GenData(GenData),
    /// Train phase A (unpruned) or phase B (pruned, frozen backbone).
    Train(Train),
    /// Evaluate a checkpoint with hard top-k pruning.
    Eval(Eval),
    /// Estimate backbone GFLOPs for a schedule with the calibrated model.
    Flops(Flops),
    /// Estimate GFLOPs over a grid of schedules and write CSV.
    Sweep(Sweep),
    /// Write input, prediction, ground truth and retained-patch maps as PPM.
    DumpMasks(DumpMasks),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

// Aliases keep clap from treating the fields as repeated single values.
type Layers = Vec<usize>;
type Rates = Vec<f32>;

fn parse_layers(s: &str) -> std::result::Result<Layers, String> {
    parse_list(s)
}

fn parse_percents(s: &str) -> std::result::Result<Rates, String> {
    let v: Vec<f32> = parse_list(s)?;
    match v.iter().find(|p| !(0.0..100.0).contains(*p)) {
        Some(p) => Err(format!("rate {p}% is outside [0, 100)")),
        None => Ok(v.into_iter().map(|p| p / 100.0).collect()),
    }
}

/// `--boundaries` and `--rates` (percent), both comma-separated.
#[derive(Args)]
struct ScheduleArgs {
    /// Layers after which tokens are pruned, e.g. `16,24`.
    #[arg(long, value_parser = parse_layers, default_value = "")]
    boundaries: Layers,
    /// Pruning rates in percent, one per boundary, e.g. `50,50`.
    #[arg(long, value_parser = parse_percents, default_value = "")]
    rates: Rates,
}

impl ScheduleArgs {
    fn schedule(&self) -> PruneSchedule {
        PruneSchedule::new(self.boundaries.clone(), self.rates.clone())
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2048)]
    samples: usize,
    /// Number of task predicates to draw from (2 to 8).
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    tasks: u8,
    /// Width of the guidance embeddings.
    #[arg(long, default_value_t = 32)]
    guide_dim: usize,
}

#[derive(Args)]
struct Train {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the phase in the configuration.
    #[arg(long, value_parser = parse_phase)]
    phase: Option<Phase>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    match s {
        "a" | "A" => Ok(Phase::A),
        "b" | "B" => Ok(Phase::B),
        _ => Err(format!("unknown phase `{s}`, expected a or b")),
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Per-sample metrics as JSON lines.
    #[arg(long)]
    samples_out: Option<PathBuf>,
}

#[derive(Args)]
struct Flops {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    baseline_gflops: f64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    include_decoder_overhead: bool,
    /// Prune-decoder cost per invocation.
    #[arg(long, default_value_t = 6.0)]
    decoder_gflops: f64,
}

#[derive(Args)]
struct Sweep {
    /// JSON grid: `{"layers", "baseline_gflops", "boundaries": [[..]], "rates": [[percent..]]}`.
    #[arg(long)]
    grid_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct GridFile {
    layers: usize,
    baseline_gflops: f64,
    boundaries: Vec<Vec<usize>>,
    /// Percentages.
    rates: Vec<Vec<f32>>,
    #[serde(default)]
    decoder_gflops: Option<f64>,
}

#[derive(Args)]
struct DumpMasks {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Schedule to render; defaults to the checkpoint's own.
    #[arg(long, value_parser = parse_layers)]
    boundaries: Option<Layers>,
    #[arg(long, value_parser = parse_percents)]
    rates: Option<Rates>,
    /// Integer upscaling factor of the written images.
    #[arg(long, default_value_t = 8)]
    scale: usize,
}

fn gen_data(a: &GenData) -> Result<()> {
    let data = Dataset::generate(a.seed, a.samples, a.tasks as usize, a.guide_dim, SceneConfig::default())?;
    data.save(&a.out)?;
    eprintln!(
        "wrote {} samples from {} images to {} (positive pixel fraction {:.3})",
        data.meta.n_samples,
        data.meta.n_images,
        a.out.display(),
        data.meta.positive_fraction
    );
    Ok(())
}

fn train(a: &Train) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(p) = a.phase {
        cfg.phase = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = pipeline::train(&cfg)?;
    for m in &out.history {
        eprintln!(
            "epoch {:>3}  loss {:.4}  lx {:.4}  lp {:.4}  miou {:.4}",
            m.epoch, m.loss, m.lx, m.lp, m.miou
        );
    }
    println!("{}", serde_json::to_string(&out.meta).expect("sidecar serializes"));
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let (params, meta) = pipeline::load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let report = pipeline::evaluate(&params, &meta.model, &data, &a.schedule.schedule())?;
    if let Some(path) = &a.samples_out {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for s in &report.samples {
            writeln!(w, "{}", serde_json::to_string(s).expect("metrics serialize")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let summary = serde_json::json!({
        "miou": report.miou,
        "prune_recall": report.prune_recall,
        "prune_precision": report.prune_precision,
        "flops": report.flops,
        "flops_unpruned": report.flops_unpruned,
        "flops_reduction": report.flops_reduction(),
    });
    println!("{summary}");
    Ok(())
}

fn flops(a: &Flops) -> Result<()> {
    let mut cfg = CostConfig::calibrated(a.layers, a.baseline_gflops)?;
    if a.include_decoder_overhead {
        cfg = cfg.with_decoder_overhead(a.decoder_gflops);
    }
    println!("{:.1}", costmodel::flops_estimate(&a.schedule.schedule(), &cfg)?);
    Ok(())
}

fn sweep(a: &Sweep) -> Result<()> {
    let text = fs::read_to_string(&a.grid_file).map_err(|e| Error::io(&a.grid_file, e))?;
    let grid: GridFile = serde_json::from_str(&text).map_err(|e| Error::json(&a.grid_file, e))?;
    let mut cfg = CostConfig::calibrated(grid.layers, grid.baseline_gflops)?;
    if let Some(d) = grid.decoder_gflops {
        cfg = cfg.with_decoder_overhead(d);
    }
    let grid = SweepGrid {
        boundaries: grid.boundaries,
        rates: grid.rates.into_iter().map(|r| r.into_iter().map(|p| p / 100.0).collect()).collect(),
    };
    let rows = costmodel::sweep(&grid, &cfg)?;
    fs::write(&a.out, costmodel::sweep_csv(&rows)).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("wrote {} schedules to {}", rows.len(), a.out.display());
    Ok(())
}

fn dump_masks(a: &DumpMasks) -> Result<()> {
    let (params, meta) = pipeline::load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let sample = data
        .samples
        .get(a.index)
        .ok_or_else(|| Error::Config(format!("--index {} is out of range for {} samples", a.index, data.samples.len())))?;
    let mut schedule = meta.schedule.clone();
    if let Some(b) = &a.boundaries {
        schedule.boundaries = b.clone();
    }
    if let Some(r) = &a.rates {
        schedule.rates = r.clone();
    }
    let pred = pipeline::predict(&params, &meta.model, &sample.image, sample.task_id, &schedule)?;
    let vit = &meta.model.vit;
    let (h, w) = (vit.image_height, vit.image_width);
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let write = |name: String, img: viz::Rgb| img.scaled(a.scale).write(&a.out_dir.join(name));
    write("input.ppm".into(), viz::image_rgb(&sample.image)?)?;
    write("pred.ppm".into(), viz::mask_rgb(&binarize(pred.logits.data()), h, w))?;
    let gt: Vec<bool> = sample.mask.data().iter().map(|&v| v > 0.5).collect();
    write("gt.ppm".into(), viz::mask_rgb(&gt, h, w))?;
    for (m, st) in pred.stages.iter().enumerate() {
        write(format!("stage{}_layer{}.ppm", m + 1, st.layer), viz::patch_map_rgb(&st.active, h, w, vit.patch_size))?;
    }
    eprintln!("wrote {} images to {}", 3 + pred.stages.len(), a.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops(a),
        Command::Sweep(a) => sweep(a),
        Command::DumpMasks(a) => dump_masks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
