use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use avlink::backbone::Modality;
use avlink::checkpoint::{self, load_backbone, load_linked, save_backbone, save_linked};
use avlink::config::{create_run_dir, run_root, write_json, RunConfig};
use avlink::data::{read_dataset, write_dataset, DatasetReader, DATA_MAGIC};
use avlink::eval::{write_sweep, EvalSummary, GradCheckOptions};
use avlink::fusion::{Direction, LinkedModel};
use avlink::infer::{generate, Layout, StepDiag};
use avlink::pipeline::{self, Split};
use avlink::train::encode_samples;
use avlink::{Error, Result};

#[derive(Parser)]
#[command(name = "avlink", version, about = "Linked audio/video flow-matching transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config; keys not given keep the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset: `desk` or `toy`.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Dotted override, e.g. `--set train_fusion.total_steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of run directories (default: $AVLINK_RUN_ROOT or ./runs).
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Audio,
    Video,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    V2a,
    A2v,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::V2a => Direction::V2A,
            DirectionArg::A2v => Direction::A2V,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Fusion checkpoint.
    #[arg(long)]
    fusion: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    video: PathBuf,
    /// Direction to run (default: the one the fusion blocks were trained for).
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset split.
    GenData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Number of clips (default: the config's split size).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one single-modality backbone.
    TrainBase {
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train fusion blocks between two frozen backbones.
    TrainFusion {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Required parameter digest of the audio backbone.
        #[arg(long)]
        expect_audio: Option<String>,
        /// Required parameter digest of the video backbone.
        #[arg(long)]
        expect_video: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the missing modality for dataset clips.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// First clip to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of clips (default: all from `index`).
        #[arg(long)]
        count: Option<usize>,
        /// Write per-step norms of the first clip to `diag.csv`.
        #[arg(long)]
        diag: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generation over the configured conditioning-time grid.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score generated clips, or generate from a model and score.
    Eval {
        /// Dataset written by `generate`.
        #[arg(long, conflicts_with_all = ["fusion", "audio", "video"])]
        generated: Option<PathBuf>,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        /// Reference clips when generating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of a DiT block and a fusion block (64-bit).
    GradCheck {
        #[arg(long, default_value_t = 2000)]
        max_entries: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the header of a checkpoint or dataset file.
    InspectCkpt { path: PathBuf },
}

/// A run directory with an append-only log.
struct Run {
    dir: PathBuf,
    log: std::fs::File,
}

impl Run {
    fn create(common: &Common, command: &str, cfg: &RunConfig) -> Result<Self> {
        let dir = create_run_dir(&run_root(common.run_root.as_deref()), command, cfg)?;
        let path = dir.join("run.log");
        let log = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut run = Self { dir, log };
        run.note(&format!("{command} config_digest={}", cfg.digest()));
        Ok(run)
    }

    fn note(&mut self, msg: &str) {
        info!("{msg}");
        let _ = writeln!(self.log, "{} {msg}", chrono::Local::now().format("%H:%M:%S"));
    }

    fn output(&self, explicit: Option<PathBuf>, name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.dir.join(name))
    }
}

fn progress(every: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if step % every == 0 {
            info!("step {step} loss {loss:.5}");
        }
    }
}

/// Adopts the dataset's generator config so encoding matches the file.
fn load_data(cfg: &mut RunConfig, path: &Path, run: &mut Run) -> Result<Vec<avlink::data::AVSample>> {
    let (data_cfg, clips) = read_dataset(path)?;
    if data_cfg != cfg.data {
        run.note(&format!("using generator config of {}", path.display()));
        cfg.data = data_cfg;
    }
    run.note(&format!("{} clips from {}", clips.len(), path.display()));
    Ok(clips)
}

fn load_model(m: &ModelArgs, cfg: &mut RunConfig) -> Result<(LinkedModel<f32>, Direction)> {
    let (audio, _) = load_backbone(&m.audio)?;
    let (video, _) = load_backbone(&m.video)?;
    let model = load_linked(&m.fusion, audio, video)?;
    cfg.audio = model.audio.config.clone();
    cfg.video = model.video.config.clone();
    cfg.fusion = model.config.clone();
    let dir = m.direction.map(Direction::from).unwrap_or(model.config.direction);
    Ok((model, dir))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.preset, &common.sets, common.seed)?;
    match cli.cmd {
        Cmd::GenData { split, n, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            if let Some(n) = n {
                match split {
                    Split::Train => cfg.dataset.train = n,
                    Split::Eval => cfg.dataset.eval = n,
                }
            }
            let mut run = Run::create(common, "gen-data", &cfg)?;
            let clips = pipeline::clips(&cfg, split)?;
            let name = if split == Split::Train { "train.avd" } else { "eval.avd" };
            let path = run.output(out, name);
            write_dataset(&path, &cfg.data, &clips)?;
            run.note(&format!("wrote {} clips to {}", clips.len(), path.display()));
            println!("{}", path.display());
        }
        Cmd::TrainBase { modality, data, out } => {
            let m = match modality {
                ModalityArg::Audio => Modality::Audio,
                ModalityArg::Video => Modality::Video,
            };
            let mut run = Run::create(common, &format!("train-base-{m}"), &cfg)?;
            let clips = load_data(&mut cfg, &data, &mut run)?;
            let mut p = progress(100);
            let (bb, log) = pipeline::train_backbone(&cfg, m, &clips, Some(&mut p))?;
            log.write_csv(&run.dir.join("loss.csv"))?;
            let path = run.output(out, &format!("{m}.ckpt"));
            save_backbone(&path, &bb, pipeline::stage_meta(&cfg, &format!("base-{m}"), &log))?;
            run.note(&format!("{m} backbone param_digest={} -> {}", bb.store.digest(), path.display()));
            println!("{}", path.display());
        }
        Cmd::TrainFusion { audio, video, data, expect_audio, expect_video, out } => {
            let mut run = Run::create(common, "train-fusion", &cfg)?;
            let clips = load_data(&mut cfg, &data, &mut run)?;
            let (a, _) = load_backbone(&audio)?;
            let (v, _) = load_backbone(&video)?;
            cfg.audio = a.config.clone();
            cfg.video = v.config.clone();
            let expected = match (&expect_audio, &expect_video) {
                (None, None) => None,
                _ => Some((
                    expect_audio.clone().unwrap_or_else(|| a.store.digest()),
                    expect_video.clone().unwrap_or_else(|| v.store.digest()),
                )),
            };
            let mut p = progress(100);
            let expected_ref = expected.as_ref().map(|(a, v)| (a.as_str(), v.as_str()));
            let (model, log) = pipeline::train_linked(&cfg, a, v, &clips, expected_ref, Some(&mut p))?;
            log.write_csv(&run.dir.join("loss.csv"))?;
            let path = run.output(out, "fusion.ckpt");
            save_linked(&path, &model, pipeline::stage_meta(&cfg, "fusion", &log))?;
            run.note(&format!("fusion param_digest={} -> {}", model.fusion.store.digest(), path.display()));
            println!("{}", path.display());
        }
        Cmd::Generate { model, data, index, count, diag, out } => {
            let mut run = Run::create(common, "generate", &cfg)?;
            let clips = load_data(&mut cfg, &data, &mut run)?;
            let (linked, dir) = load_model(&model, &mut cfg)?;
            let end = count.map_or(clips.len(), |c| (index + c).min(clips.len()));
            if index >= end {
                return Err(Error::Config(format!("no clips in range {index}..{end} of {}", clips.len())));
            }
            let chosen = &clips[index..end];
            let ic = pipeline::infer_config(&cfg);
            let generated = avlink::infer::generate_clips(&linked, dir, chosen, &cfg.data, &ic)?;
            if diag {
                let enc = encode_samples(&chosen[..1], &cfg.data, cfg.video.patch)?;
                let e = &enc[0];
                let mut steps: Vec<StepDiag> = Vec::new();
                let seed = rand::Rng::gen(&mut avlink::rng::substream(ic.seed, avlink::rng::Stream::Inference, 0));
                generate(
                    &linked,
                    dir,
                    e.tokens(dir.conditioning()),
                    &Layout::of(e.tokens(dir.generated())),
                    (e.audio_prompt.as_deref(), e.video_prompt.as_deref()),
                    &ic,
                    seed,
                    Some(&mut steps),
                )?;
                avlink::eval::write_rows(&run.dir.join("diag.csv"), &steps)?;
            }
            let path = run.output(out, "generated.avd");
            write_dataset(&path, &cfg.data, &generated)?;
            run.note(&format!("{dir}: wrote {} generated clips to {}", generated.len(), path.display()));
            println!("{}", path.display());
        }
        Cmd::Sweep { model, data } => {
            let mut run = Run::create(common, "sweep", &cfg)?;
            let clips = load_data(&mut cfg, &data, &mut run)?;
            let (linked, dir) = load_model(&model, &mut cfg)?;
            let points = pipeline::sweep(&cfg, &linked, dir, &clips)?;
            let path = run.dir.join("sweep.csv");
            write_sweep(&path, &points)?;
            for p in &points {
                run.note(&format!("t_cond={} score={:.4}", p.t_cond, p.score));
            }
            println!("{}", path.display());
        }
        Cmd::Eval { generated, fusion, audio, video, direction, data } => {
            let mut run = Run::create(common, "eval", &cfg)?;
            let summary = match (generated, fusion, audio, video) {
                (Some(path), ..) => {
                    let clips = load_data(&mut cfg, &path, &mut run)?;
                    let dir = direction.map(Direction::from).unwrap_or(cfg.fusion.direction);
                    EvalSummary::of_clips(dir, &clips, &cfg.data, &cfg.eval, cfg.seed)?
                }
                (None, Some(fusion), Some(audio), Some(video)) => {
                    let data = data.ok_or_else(|| Error::Config("eval: --data is required with a model".into()))?;
                    let clips = load_data(&mut cfg, &data, &mut run)?;
                    let (linked, dir) = load_model(&ModelArgs { fusion, audio, video, direction }, &mut cfg)?;
                    pipeline::evaluate_linked(&cfg, &linked, dir, &clips)?
                }
                _ => return Err(Error::Config("eval: give --generated, or --fusion, --audio and --video".into())),
            };
            write_json(&run.dir.join("eval.json"), &summary)?;
            run.note(&format!(
                "{} {} = {:.4} (random baseline {:.4}, precision {:.4})",
                summary.direction, summary.metric, summary.score, summary.baseline, summary.precision
            ));
            println!("{} {:.4} baseline {:.4} precision {:.4}", summary.metric, summary.score, summary.baseline, summary.precision);
        }
        Cmd::GradCheck { max_entries, tolerance } => {
            let mut run = Run::create(common, "grad-check", &cfg)?;
            let opts = GradCheckOptions { max_entries: Some(max_entries), seed: cfg.seed, ..Default::default() };
            let reports = [
                ("dit_block_audio", pipeline::grad_check_dit_block(&cfg.audio, cfg.seed, &opts)?),
                ("dit_block_video", pipeline::grad_check_dit_block(&cfg.video, cfg.seed, &opts)?),
                ("fusion_block", pipeline::grad_check_fusion_block(&cfg.fusion, &cfg.audio, &cfg.video, cfg.seed, &opts)?),
            ];
            let mut worst = 0.0f64;
            let mut out = Vec::new();
            for (name, r) in &reports {
                run.note(&format!("{name}: max rel error {:.3e} over {} entries (worst {:?})", r.max_rel_error, r.checked, r.worst));
                println!("{name} {:.3e}", r.max_rel_error);
                worst = worst.max(r.max_rel_error);
                out.push(json!({ "check": name, "max_rel_error": r.max_rel_error, "checked": r.checked, "worst": r.worst }));
            }
            write_json(&run.dir.join("grad_check.json"), &out)?;
            if worst > tolerance {
                return Err(Error::contract("eval", format!("grad check error {worst:.3e} above {tolerance:.0e}")));
            }
        }
        Cmd::InspectCkpt { path } => inspect(&path)?,
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    }
    if &magic == DATA_MAGIC {
        let r = DatasetReader::open(path)?;
        println!("dataset {}", path.display());
        println!("records {}", r.count);
        println!("config_digest {}", r.config.digest());
        println!("{}", serde_json::to_string_pretty(&r.config)?);
        return Ok(());
    }
    let h = checkpoint::read_header(path)?;
    println!("checkpoint {}", path.display());
    println!("section {:?}", h.section);
    println!("param_digest {}", h.param_digest);
    println!("config_digest {}", h.config_digest);
    for r in &h.references {
        println!("requires {} backbone {}", r.modality, r.param_digest);
    }
    println!("{}", serde_json::to_string_pretty(&json!({ "config": h.config, "meta": h.meta }))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
