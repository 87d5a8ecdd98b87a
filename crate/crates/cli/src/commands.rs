use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use serde::{Deserialize, Serialize};
use timelapse_core::baselines::{interp_video, unet_predict, unet_train, UnetBaselineParams};
use timelapse_core::datapipe::{extract_sequences, generate_synthetic_dataset, split_dataset, write_index_file, DatasetSplit, ExtractionConfig};
use timelapse_core::domain::{FrameShape, PaintingVideo};
use timelapse_core::evaluation::{evaluate_methods, Interp, Method, Ours, Unet};
use timelapse_core::inference::{synthesize_many, SynthesisRequest};
use timelapse_core::io::{read_frame_png, read_json, read_video_dir, write_json, write_video_dir};
use timelapse_core::networks::{ModelParams, MODEL_FORMAT};
use timelapse_core::training::{
    train_full, train_pairwise, train_sequential_cvae, train_sequential_sampling, MetricsLog, RunControl, TrainData, TrainState,
};
use timelapse_core::Error;

use crate::config::RunConfig;
use crate::{Cli, Command, MethodArg, StageArg};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

/// Bad flags, files or configuration.
fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

/// Core errors: configuration problems are usage errors, everything else is a runtime failure.
fn core(error: Error) -> Failure {
    let code = if matches!(error, Error::Config(_)) { 1 } else { 2 };
    Failure { code, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

type CmdResult<T = ()> = Result<T, Failure>;

const VIDEOS_DIR: &str = "videos";
const TRUTH_DIR: &str = "ground_truth";
const SPLIT_FILE: &str = "split.json";
const DATASET_FILE: &str = "dataset.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const UNET_FILE: &str = "unet.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    region_count: usize,
    region_map: Vec<usize>,
    fill_order: Vec<usize>,
    fill_start: Vec<usize>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: Option<u64>,
    version: &'a str,
    args: Vec<String>,
}

pub fn run(cli: Cli) -> CmdResult {
    let cfg = RunConfig::load(cli.config.as_deref()).map_err(usage)?.resolve(cli.seed);
    match &cli.command {
        Command::GenData { n_videos } => gen_data(&cli, cfg, *n_videos),
        Command::Extract { data } => extract(&cli, &cfg, data.data.as_deref()),
        Command::Train { data, stage, checkpoint, steps } => train(&cli, cfg, data.data.as_deref(), *stage, checkpoint.as_deref(), *steps),
        Command::Synthesize { method, painting, samples, steps, checkpoint } => {
            synthesize(&cli, &cfg, *method, painting, *samples, *steps, checkpoint.as_deref())
        }
        Command::Evaluate { data, k, methods, checkpoint, unet_checkpoint } => {
            evaluate(&cli, cfg, data.data.as_deref(), *k, methods, checkpoint.as_deref(), unet_checkpoint.as_deref())
        }
    }
}

/// Creates the output directory and records the resolved config and invocation in it.
fn run_dir(cli: &Cli, cfg: &RunConfig, command: &str) -> CmdResult<PathBuf> {
    let dir = match &cli.out {
        Some(p) => p.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = cfg.paths.runs_root.join(format!("{}-{}", command, stamp));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{}", base.display(), n));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    fs::write(dir.join("config.toml"), cfg.to_toml().map_err(runtime)?).map_err(runtime)?;
    let record = RunRecord { command, seed: cfg.seed, version: env!("CARGO_PKG_VERSION"), args: std::env::args().skip(1).collect() };
    write_json(&dir.join("run.json"), &record).map_err(core)?;
    info!("writing to {}", dir.display());
    Ok(dir)
}

fn gen_data(cli: &Cli, cfg: RunConfig, n_videos: Option<usize>) -> CmdResult {
    let spec = &cfg.synthetic.spec;
    spec.validate().map_err(core)?;
    let n = n_videos.unwrap_or(cfg.synthetic.n_videos);
    if n < 3 {
        return Err(usage(anyhow!("need at least 3 videos for a train/val/test split, got {}", n)));
    }
    let root = match &cli.out {
        Some(p) => p.clone(),
        None => cfg.data_root(None).map_err(usage)?,
    };
    if root.join(DATASET_FILE).exists() {
        for sub in [VIDEOS_DIR, TRUTH_DIR] {
            if root.join(sub).exists() {
                fs::remove_dir_all(root.join(sub)).map_err(runtime)?;
            }
        }
    }
    let videos = generate_synthetic_dataset(spec, n);
    fs::create_dir_all(root.join(TRUTH_DIR)).with_context(|| format!("creating {}", root.display())).map_err(runtime)?;
    for sv in &videos {
        write_video_dir(&sv.video, &root.join(VIDEOS_DIR).join(sv.video.id())).map_err(core)?;
        let truth = GroundTruth { region_count: sv.region_count, region_map: sv.region_map.clone(), fill_order: sv.fill_order.clone(), fill_start: sv.fill_start.clone() };
        write_json(&root.join(TRUTH_DIR).join(format!("{}.json", sv.video.id())), &truth).map_err(core)?;
    }
    let ids: Vec<String> = videos.iter().map(|v| v.video.id().to_string()).collect();
    write_json(&root.join(SPLIT_FILE), &split_dataset(&ids, spec.seed).map_err(core)?).map_err(core)?;
    write_json(&root.join(DATASET_FILE), &serde_json::json!({ "n_videos": n, "spec": spec })).map_err(core)?;
    info!("wrote {} videos to {}", n, root.display());
    Ok(())
}

fn load_split(root: &Path) -> CmdResult<DatasetSplit> {
    let path = root.join(SPLIT_FILE);
    if path.exists() {
        return read_json(&path).map_err(core);
    }
    // no manifest: every video is training data
    let mut ids: Vec<String> = fs::read_dir(root.join(VIDEOS_DIR))
        .with_context(|| format!("listing {}", root.join(VIDEOS_DIR).display()))
        .map_err(usage)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    Ok(DatasetSplit { train: ids, val: vec![], test: vec![] })
}

fn load_videos(root: &Path, ids: &[String]) -> CmdResult<Vec<PaintingVideo>> {
    if ids.is_empty() {
        return Err(usage(anyhow!("no videos listed under {}", root.display())));
    }
    ids.iter().map(|id| read_video_dir(&root.join(VIDEOS_DIR).join(id)).map_err(core)).collect()
}

fn extract(cli: &Cli, cfg: &RunConfig, data: Option<&Path>) -> CmdResult {
    let root = cfg.data_root(data).map_err(usage)?;
    let videos = load_videos(&root, &load_split(&root)?.train)?;
    let dir = run_dir(cli, cfg, "extract")?;
    let mut lengths = cfg.train.seq_lengths.clone();
    lengths.push(cfg.train.tau);
    lengths.sort_unstable();
    lengths.dedup();
    for len in lengths {
        let ex = ExtractionConfig { sequence_length: len, ..cfg.train.data.extraction.clone() };
        let mut all = Vec::new();
        for v in &videos {
            all.extend(extract_sequences(v, &ex, Some(cfg.train.data.sequences_per_video), cfg.train.seed).map_err(core)?);
        }
        info!("{} sequences of length {}", all.len(), len);
        write_index_file(&dir.join(format!("sequences_len{}.tsv", len)), &all).map_err(core)?;
    }
    Ok(())
}

fn train(cli: &Cli, mut cfg: RunConfig, data: Option<&Path>, stage: StageArg, checkpoint: Option<&Path>, steps: Option<u64>) -> CmdResult {
    cfg.train.validate().map_err(core)?;
    let root = cfg.data_root(data).map_err(usage)?;
    let videos = load_videos(&root, &load_split(&root)?.train)?;
    let t = &cfg.train;
    let data = TrainData::build(videos, &t.data, &t.seq_lengths, t.tau, t.seed).map_err(core)?;
    let (h, w) = data.frame_shape();
    let shape = FrameShape { height: h, width: w };

    if stage == StageArg::Unet {
        if let Some(s) = steps {
            cfg.unet.steps = s;
        }
        let dir = run_dir(cli, &cfg, "train")?;
        let mut log = MetricsLog::append_to(&dir.join(METRICS_FILE)).map_err(core)?;
        let model = unet_train(&data, &cfg.unet, &mut log).map_err(core)?;
        model.save(&dir.join(UNET_FILE)).map_err(core)?;
        return Ok(());
    }

    let mut state = match checkpoint {
        Some(p) => TrainState::load(p).map_err(core)?.0,
        None => TrainState::new(&cfg.train).map_err(core)?,
    };
    let mut stop_at_step = None;
    match (stage, steps) {
        (StageArg::Pairwise, Some(s)) => cfg.train.pairwise_steps = state.counters.pairwise + s,
        (StageArg::SeqCvae | StageArg::SeqSample, Some(s)) => cfg.train.block_steps = s,
        (StageArg::Full, Some(s)) => stop_at_step = Some(state.counters.global_step + s),
        _ => {}
    }
    let dir = run_dir(cli, &cfg, "train")?;
    let mut log = MetricsLog::append_to(&dir.join(METRICS_FILE)).map_err(core)?;
    let mut ctl = RunControl::new(&mut log);
    ctl.checkpoint_dir = Some(dir.join("checkpoints"));
    ctl.stop_at_step = stop_at_step;
    let tc = &cfg.train;
    state = match stage {
        StageArg::Pairwise => train_pairwise(state, &data, tc, &mut ctl),
        StageArg::SeqCvae => train_sequential_cvae(state, &data, tc, &mut ctl),
        StageArg::SeqSample => train_sequential_sampling(state, &data, tc, &mut ctl),
        StageArg::Full | StageArg::Unet => train_full(state, &data, tc, &mut ctl),
    }
    .map_err(core)?;
    state.save(&dir.join(STATE_FILE), tc).map_err(core)?;
    state.params.save_with_extra(&dir.join(MODEL_FILE), tc, serde_json::json!({ "frame_shape": shape })).map_err(core)?;
    info!("finished at global step {}", state.counters.global_step);
    Ok(())
}

/// Model parameters and their training resolution, from a model or training checkpoint.
fn load_model(path: &Path) -> CmdResult<(ModelParams, Option<FrameShape>)> {
    match ModelParams::load_with_extra(path) {
        Ok((p, _, extra)) => Ok((p, serde_json::from_value(extra["frame_shape"].clone()).ok())),
        Err(Error::CheckpointVersion { found, .. }) if found != MODEL_FORMAT => Ok((TrainState::load(path).map_err(core)?.0.params, None)),
        Err(e) => Err(core(e)),
    }
}

fn require<'a>(flag: Option<&'a Path>, name: &str, method: &str) -> CmdResult<&'a Path> {
    flag.ok_or_else(|| usage(anyhow!("--{} is required for method {}", name, method)))
}

fn synthesize(cli: &Cli, cfg: &RunConfig, method: MethodArg, painting: &Path, samples: usize, steps: usize, checkpoint: Option<&Path>) -> CmdResult {
    if samples < 1 || steps < 1 {
        return Err(usage(anyhow!("--samples and --steps must be at least 1")));
    }
    let x_final = read_frame_png(painting).map_err(core)?;
    let seed = cfg.seed.unwrap_or(cfg.train.seed);
    let videos = match method {
        MethodArg::Ours => {
            let (params, trained_shape) = load_model(require(checkpoint, "checkpoint", "ours")?)?;
            let req = SynthesisRequest { steps, n_samples: samples, trained_shape, ..SynthesisRequest::new(x_final, &params, seed) };
            synthesize_many(&req).map_err(core)?
        }
        MethodArg::Interp => vec![interp_video(&x_final, steps).map_err(core)?; samples],
        MethodArg::Unet => {
            let model = UnetBaselineParams::load(require(checkpoint, "checkpoint", "unet")?).map_err(core)?;
            if steps != model.frames {
                return Err(usage(anyhow!("the encoder-decoder emits exactly {} steps", model.frames)));
            }
            vec![unet_predict(&x_final, &model).map_err(core)?; samples]
        }
    };
    let dir = run_dir(cli, cfg, "synthesize")?;
    for (i, v) in videos.iter().enumerate() {
        write_video_dir(v, &dir.join(format!("sample_{:04}", i))).map_err(core)?;
    }
    info!("wrote {} samples of {} frames", videos.len(), steps + 1);
    Ok(())
}

fn evaluate(
    cli: &Cli,
    mut cfg: RunConfig,
    data: Option<&Path>,
    k: Option<usize>,
    methods: &[MethodArg],
    checkpoint: Option<&Path>,
    unet_checkpoint: Option<&Path>,
) -> CmdResult {
    if let Some(k) = k {
        cfg.eval.k = k;
    }
    let root = cfg.data_root(data).map_err(usage)?;
    let videos = load_videos(&root, &load_split(&root)?.test)?;
    let ours = match methods.contains(&MethodArg::Ours) {
        true => Some(load_model(require(checkpoint, "checkpoint", "ours")?)?),
        false => None,
    };
    let unet = match methods.contains(&MethodArg::Unet) {
        true => Some(UnetBaselineParams::load(require(unet_checkpoint, "unet-checkpoint", "unet")?).map_err(core)?),
        false => None,
    };
    let ours_method = ours.as_ref().map(|(p, s)| Ours { params: p, trained_shape: *s });
    let unet_method = unet.as_ref().map(Unet);
    let mut list: Vec<&dyn Method> = Vec::new();
    for m in methods {
        match m {
            MethodArg::Ours => list.push(ours_method.as_ref().expect("loaded above")),
            MethodArg::Interp => list.push(&Interp),
            MethodArg::Unet => list.push(unet_method.as_ref().expect("loaded above")),
        }
    }
    let dir = run_dir(cli, &cfg, "evaluate")?;
    let report = evaluate_methods(&videos, &list, &cfg.eval).map_err(core)?;
    let table = report.render_table();
    fs::write(dir.join("report.txt"), &table).map_err(runtime)?;
    fs::write(dir.join("report.csv"), report.to_csv()).map_err(runtime)?;
    write_json(&dir.join("report.json"), &report).map_err(core)?;
    print!("{}", table);
    Ok(())
}
