//! The operations behind the `mixformer` binary, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mixformer::checkpoint;
use mixformer::config::RunConfig;
use mixformer::cost::count_params_flops;
use mixformer::data::{
    boxes_from_csv, boxes_to_csv, generate_synthetic, load_sequence, metrics_to_csv, precision, save_sequence,
    success_auc, write_atomic, Sequence, SequenceMetrics, SyntheticConfig, TrackedBox,
};
use mixformer::model::{MixFormer, SPM_PREFIX};
use mixformer::nn::{Graph, ParamStore};
use mixformer::tracker::Tracker;
use mixformer::train::{loss_csv, train_stage1, train_stage2_spm, LossRecord};
use mixformer::{Error, Result};

/// Centre-error threshold for precision, in pixels.
pub const PRECISION_THRESHOLD: f64 = 20.0;

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::desk()),
    }
}

/// Seed of the `index`-th generated training sequence.
pub fn training_seed(seed: u64, index: usize) -> u64 {
    (seed << 20) | index as u64
}

/// Sequence subdirectories of `dir`, in name order.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.join(mixformer::data::GROUNDTRUTH).is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Usage(format!("no sequences under {}", dir.display())));
    }
    Ok(out)
}

/// Sequences from `dir`, or `train_sequences` synthetic ones.
pub fn training_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<Sequence>> {
    match dir {
        Some(d) => sequence_dirs(d)?.iter().map(|p| load_sequence(p)).collect(),
        None => (0..cfg.train_sequences)
            .map(|i| generate_synthetic(&cfg.synthetic, training_seed(cfg.seed, i)))
            .collect(),
    }
}

pub struct Trained {
    pub model: MixFormer,
    pub store: ParamStore<f32>,
    pub stage1: Vec<LossRecord>,
    pub stage2: Vec<LossRecord>,
    pub seconds: f64,
}

/// Both training stages from a fresh initialization, optionally warm-started
/// from `init`, whose head and score weights may be absent or foreign.
pub fn train(
    cfg: &RunConfig,
    data: &[Sequence],
    init: Option<&Path>,
    mut progress: impl FnMut(usize, &LossRecord),
) -> Result<Trained> {
    let start = Instant::now();
    let (model, mut store) = MixFormer::init::<f32>(cfg.model(), cfg.seed)?;
    if let Some(p) = init {
        checkpoint::apply(&mut store, checkpoint::read(p)?, |n| {
            n.starts_with("head.") || n.starts_with(SPM_PREFIX)
        })?;
    }
    let mut train = cfg.train;
    train.seed = cfg.seed;
    let stage1 = train_stage1(&model, &mut store, data, &train, |r| progress(1, r))?;
    let stage2 = train_stage2_spm(&model, &mut store, data, &train, false, |r| progress(2, r))?;
    Ok(Trained {
        model,
        store,
        stage1,
        stage2,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub data: Option<&'a Path>,
    pub init: Option<&'a Path>,
    /// Directory for `loss_stage1.csv` and `loss_stage2.csv`.
    pub log_dir: Option<&'a Path>,
    pub verbose: bool,
}

pub fn cmd_train(args: &TrainArgs<'_>) -> Result<Trained> {
    let cfg = load_config(args.config)?;
    let data = training_data(&cfg, args.data)?;
    let every = 100;
    let trained = train(&cfg, &data, args.init, |stage, r| {
        if args.verbose && r.iter % every == 0 {
            eprintln!("stage {stage} iter {:>5} loss {:.4} grad_norm {:.4}", r.iter, r.loss, r.grad_norm);
        }
    })?;
    checkpoint::save(args.out, &trained.store)?;
    if let Some(dir) = args.log_dir {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("loss_stage1.csv"), loss_csv(&trained.stage1).as_bytes())?;
        write_atomic(&dir.join("loss_stage2.csv"), loss_csv(&trained.stage2).as_bytes())?;
    }
    Ok(trained)
}

/// Model for `cfg` with weights from a checkpoint that must match exactly.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(MixFormer, ParamStore<f32>)> {
    let (model, mut store) = MixFormer::init::<f32>(cfg.model(), cfg.seed)?;
    checkpoint::load_into(ckpt, &mut store)?;
    Ok((model, store))
}

/// Tracks from the first ground-truth box. Row 1 is that box with score 1.
pub fn track_sequence(model: &MixFormer, store: &ParamStore<f32>, cfg: &RunConfig, seq: &Sequence) -> Result<Vec<TrackedBox>> {
    let first = *seq
        .boxes
        .first()
        .ok_or_else(|| Error::Init(format!("{} has no initial box", seq.name)))?;
    let mut tracker = Tracker::init(model, store, cfg.tracker, &seq.frames[0], first)?;
    let mut rows = vec![TrackedBox {
        frame: 1,
        bbox: first,
        score: 1.0,
    }];
    for (i, f) in seq.frames.iter().enumerate().skip(1) {
        let r = tracker.step(f)?;
        rows.push(TrackedBox {
            frame: i + 1,
            bbox: r.bbox,
            score: r.score,
        });
    }
    Ok(rows)
}

pub fn cmd_track(config: Option<&Path>, ckpt: &Path, sequence: &Path, out: &Path) -> Result<Vec<TrackedBox>> {
    let cfg = load_config(config)?;
    let (model, store) = load_model(&cfg, ckpt)?;
    let seq = load_sequence(sequence)?;
    let rows = track_sequence(&model, &store, &cfg, &seq)?;
    write_atomic(out, boxes_to_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Success AUC and precision over every frame after the first.
pub fn evaluate(rows: &[TrackedBox], seq: &Sequence) -> Result<SequenceMetrics> {
    if !seq.has_full_groundtruth() {
        return Err(Error::Usage(format!("{} has no per-frame ground truth", seq.name)));
    }
    if rows.len() != seq.len() {
        return Err(Error::Usage(format!(
            "{} boxes for a sequence of {} frames",
            rows.len(),
            seq.len()
        )));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.frame != i + 1 {
            return Err(Error::Usage(format!("row {} is for frame {}, expected {}", i + 1, r.frame, i + 1)));
        }
    }
    let pred: Vec<_> = rows.iter().skip(1).map(|r| r.bbox).collect();
    let gt = &seq.boxes[1..];
    Ok(SequenceMetrics {
        sequence: seq.name.clone(),
        auc: success_auc(&pred, gt)?,
        precision: precision(&pred, gt, PRECISION_THRESHOLD)?,
    })
}

pub fn cmd_eval(boxes: &Path, sequence: &Path, out: &Path) -> Result<SequenceMetrics> {
    let rows = boxes_from_csv(&fs::read_to_string(boxes)?)?;
    let seq = load_sequence(sequence)?;
    let m = evaluate(&rows, &seq)?;
    write_atomic(out, metrics_to_csv(std::slice::from_ref(&m)).as_bytes())?;
    Ok(m)
}

pub struct InspectArgs<'a> {
    pub config: Option<&'a Path>,
    pub checkpoint: &'a Path,
    pub sequence: &'a Path,
    /// 1-based frame whose search crop is inspected; at least 2.
    pub frame: usize,
    /// 0-based stage and block; defaults to the last block of the last stage.
    pub stage: Option<usize>,
    pub block: Option<usize>,
    pub out_dir: &'a Path,
}

/// Tracks up to `frame`, then writes one CSV per attention view of the
/// chosen block on that frame's search crop. Returns the written paths.
pub fn cmd_inspect(args: &InspectArgs<'_>) -> Result<Vec<PathBuf>> {
    let cfg = load_config(args.config)?;
    let (model, store) = load_model(&cfg, args.checkpoint)?;
    let seq = load_sequence(args.sequence)?;
    if args.frame < 2 || args.frame > seq.len() {
        return Err(Error::Usage(format!("frame must lie in 2..={}", seq.len())));
    }
    let mut tracker = Tracker::init(&model, &store, cfg.tracker, &seq.frames[0], seq.boxes[0])?;
    for f in &seq.frames[1..args.frame - 1] {
        tracker.step(f)?;
    }
    let (search, _) = tracker.crop_search(&seq.frames[args.frame - 1])?;
    let stage = args.stage.unwrap_or(model.backbone.stages.len() - 1);
    let block = match args.block {
        Some(b) => b,
        None => model
            .backbone
            .stages
            .get(stage)
            .map_or(0, |s| s.blocks.len().saturating_sub(1)),
    };
    let mut g = Graph::inference(&store);
    let t: Vec<_> = tracker.slots.all().map(|x| g.constant(x.clone())).collect();
    let s = g.constant(search);
    let probs = model.backbone.attention_probs(&mut g, &t, s, stage, block)?;
    fs::create_dir_all(args.out_dir)?;
    let mut written = Vec::new();
    for m in probs.dump() {
        let p = args.out_dir.join(format!("{}.csv", m.kind.file_stem()));
        write_atomic(&p, m.to_csv().as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

pub fn cmd_cost(cfg: &RunConfig) -> Result<String> {
    let report = count_params_flops(&cfg.model())?;
    Ok(format!(
        "preset {} head {} templates {}\n{}",
        cfg.preset.as_str(),
        cfg.head.as_str(),
        cfg.model().backbone.templates,
        report.to_table()
    ))
}

/// Writes `count` synthetic sequences named `seq_0000`, … under `out`.
pub fn cmd_synth(synthetic: &SyntheticConfig, out: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let dir = out.join(format!("seq_{i:04}"));
            let mut seq = generate_synthetic(synthetic, seed.wrapping_add(i as u64))?;
            seq.name = format!("seq_{i:04}");
            save_sequence(&dir, &seq)?;
            Ok(dir)
        })
        .collect()
}
