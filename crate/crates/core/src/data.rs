//! Sequences: synthetic generation, on-disk format, box files and
//! tracking metrics.
//!
//! A sequence directory holds frames `00000001.ppm`, `00000002.ppm`, … and a
//! `groundtruth.txt` with one `x,y,w,h` line per frame (pixels, top-left
//! origin). A single line is accepted when only the initial box is known.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::imaging::Frame;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    /// Pixel boxes; one per frame, or only the first.
    pub boxes: Vec<BoundingBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_full_groundtruth(&self) -> bool {
        self.boxes.len() == self.frames.len()
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:08}.ppm")
}

fn format_box(b: &BoundingBox) -> String {
    let [x, y, w, h] = b.to_xywh();
    format!("{x},{y},{w},{h}")
}

/// Parses `x,y,w,h` into a corner box.
pub fn parse_xywh(line: &str, line_no: usize) -> Result<BoundingBox> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 4 comma-separated values, got {}", parts.len()),
        });
    }
    let mut v = [0f64; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("not a number: {p:?}"),
        })?;
        if !slot.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("non-finite value {p:?}"),
            });
        }
    }
    Ok(BoundingBox::from_xywh(v[0], v[1], v[2], v[3]))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_with_format(dir.join(frame_file_name(i + 1)), ImageFormat::Pnm)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&format_box(b));
        gt.push('\n');
    }
    write_atomic(&dir.join(GROUNDTRUTH), gt.as_bytes())
}

fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let text = fs::read_to_string(dir.join(GROUNDTRUTH))?;
    let boxes = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_xywh(l, i + 1))
        .collect::<Result<Vec<_>>>()?;
    if boxes.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "groundtruth is empty".into(),
        });
    }
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".ppm") {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    let count = if boxes.len() > 1 {
        boxes.len()
    } else {
        indices.iter().copied().max().unwrap_or(0).max(1)
    };
    if boxes.len() > 1 && indices.iter().any(|&i| i > count) {
        return Err(Error::Parse {
            line: boxes.len(),
            msg: format!("groundtruth has {} lines but more frames exist", boxes.len()),
        });
    }
    let mut frames = Vec::with_capacity(count);
    for i in 1..=count {
        let path = dir.join(frame_file_name(i));
        if !path.exists() {
            return Err(Error::Usage(format!("missing frame {i} ({})", path.display())));
        }
        let f = load_frame(&path)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if f.dimensions() != first.dimensions() {
                return Err(Error::Image(format!("frame {i} size differs from frame 1")));
            }
        }
        frames.push(f);
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sequence { name, frames, boxes })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    /// Object size range in pixels (each side drawn uniformly).
    pub object_min: u32,
    pub object_max: u32,
    /// Largest per-frame displacement in pixels.
    pub motion: f64,
    /// Relative amplitude of the slow size oscillation.
    pub scale_jitter: f64,
    /// Relative amplitude of per-frame global brightness changes.
    pub brightness_jitter: f64,
    /// Standard deviation of per-pixel noise in 8-bit units.
    pub noise: f64,
    pub distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 40,
            object_min: 20,
            object_max: 36,
            motion: 3.0,
            scale_jitter: 0.1,
            brightness_jitter: 0.1,
            noise: 6.0,
            distractors: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn static_scene() -> Self {
        Self {
            motion: 0.0,
            scale_jitter: 0.0,
            brightness_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("a sequence needs at least 2 frames"));
        }
        if self.object_min == 0 || self.object_min > self.object_max {
            return Err(Error::config("object size range is empty"));
        }
        let grown = (self.object_max as f64 * (1.0 + self.scale_jitter)).ceil();
        if grown >= self.width as f64 || grown >= self.height as f64 {
            return Err(Error::config(format!(
                "object up to {grown} px does not fit a {}×{} frame",
                self.width, self.height
            )));
        }
        if self.motion < 0.0 || self.scale_jitter < 0.0 || self.brightness_jitter < 0.0 || self.noise < 0.0 {
            return Err(Error::config("jitter amplitudes must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Texture {
    base: [f64; 3],
    accent: [f64; 3],
    cell: f64,
    stripes: bool,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [0; 3].map(|_: i32| rng.random_range(20.0..235.0));
        let (base, accent) = (color(), color());
        Self {
            base,
            accent,
            cell: rng.random_range(3.0..8.0),
            stripes: rng.random_bool(0.5),
        }
    }

    /// Color at a position relative to the object's top-left corner, in
    /// units of the object's reference size.
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let a = (u / self.cell).floor() as i64;
        let b = (v / self.cell).floor() as i64;
        let on = if self.stripes { a % 2 == 0 } else { (a + b) % 2 == 0 };
        if on {
            self.accent
        } else {
            self.base
        }
    }
}

struct Mover {
    size: [f64; 2],
    pos: [f64; 2],
    vel: [f64; 2],
    tex: Texture,
}

impl Mover {
    fn new(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let size = [0; 2].map(|_: i32| rng.random_range(cfg.object_min as f64..=cfg.object_max as f64).round());
        let pos = [
            rng.random_range(0.0..=(cfg.width as f64 - size[0])),
            rng.random_range(0.0..=(cfg.height as f64 - size[1])),
        ];
        Self {
            size,
            pos,
            vel: [0.0; 2],
            tex: Texture::random(rng),
        }
    }

    fn advance(&mut self, cfg: &SyntheticConfig, scale: f64, rng: &mut ChaCha8Rng) {
        if cfg.motion == 0.0 {
            return;
        }
        let kick = Normal::new(0.0, 0.4 * cfg.motion).expect("positive std");
        let bounds = [cfg.width as f64, cfg.height as f64];
        for a in 0..2 {
            self.vel[a] = (self.vel[a] + kick.sample(rng)).clamp(-cfg.motion, cfg.motion);
            let extent = (self.size[a] * scale).round();
            let hi = bounds[a] - extent;
            let p = self.pos[a] + self.vel[a];
            if p < 0.0 || p > hi {
                self.vel[a] = -self.vel[a];
            }
            self.pos[a] = p.clamp(0.0, hi.max(0.0));
        }
    }

    /// Integer pixel box at the current position and scale.
    fn rect(&self, scale: f64, cfg: &SyntheticConfig) -> [i64; 4] {
        let w = (self.size[0] * scale).round().max(1.0);
        let h = (self.size[1] * scale).round().max(1.0);
        let x0 = self.pos[0].round().clamp(0.0, cfg.width as f64 - w);
        let y0 = self.pos[1].round().clamp(0.0, cfg.height as f64 - h);
        [x0 as i64, y0 as i64, (x0 + w) as i64, (y0 + h) as i64]
    }

    fn draw(&self, img: &mut [[f64; 3]], width: usize, rect: [i64; 4], scale: f64) {
        for y in rect[1]..rect[3] {
            for x in rect[0]..rect[2] {
                let u = (x - rect[0]) as f64 / scale;
                let v = (y - rect[1]) as f64 / scale;
                img[y as usize * width + x as usize] = self.tex.at(u, v);
            }
        }
    }
}

/// Deterministic synthetic sequence: a textured rectangle moving over a
/// smooth noisy background with optional distractor rectangles. The target
/// is drawn last, so its ground-truth box is exact.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let corners: [[f64; 3]; 4] = std::array::from_fn(|_| [0; 3].map(|_: i32| rng.random_range(40.0..215.0)));
    let mut target = Mover::new(cfg, &mut rng);
    let mut others: Vec<Mover> = (0..cfg.distractors).map(|_| Mover::new(cfg, &mut rng)).collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("positive std");

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let scale = 1.0 + cfg.scale_jitter * (phase + 0.15 * t as f64).sin();
        if t > 0 {
            target.advance(cfg, scale, &mut rng);
            for d in &mut others {
                d.advance(cfg, 1.0, &mut rng);
            }
        }
        let mut img = vec![[0f64; 3]; w * h];
        for y in 0..h {
            let fy = y as f64 / (h - 1).max(1) as f64;
            for x in 0..w {
                let fx = x as f64 / (w - 1).max(1) as f64;
                img[y * w + x] = std::array::from_fn(|c| {
                    let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                    let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                    top * (1.0 - fy) + bot * fy
                });
            }
        }
        for d in &others {
            let r = d.rect(1.0, cfg);
            d.draw(&mut img, w, r, 1.0);
        }
        let r = target.rect(scale, cfg);
        target.draw(&mut img, w, r, scale);
        let gain = 1.0 + cfg.brightness_jitter * rng.random_range(-1.0..=1.0);
        let frame = RgbImage::from_fn(cfg.width, cfg.height, |x, y| {
            let p = img[y as usize * w + x as usize];
            Rgb(std::array::from_fn(|c| {
                let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (p[c] * gain + n).round().clamp(0.0, 255.0) as u8
            }))
        });
        frames.push(frame);
        boxes.push(BoundingBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64));
    }
    Ok(Sequence {
        name: format!("synthetic-{seed}"),
        frames,
        boxes,
    })
}

fn check_lengths(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    Ok(())
}

pub fn ious(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect())
}

/// Mean over thresholds `0, 0.01, …, 1` of the fraction of frames with
/// IoU strictly above the threshold.
pub fn success_auc(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    let v = ious(pred, gt)?;
    if v.is_empty() {
        return Ok(0.0);
    }
    let n = v.len() as f64;
    let total: f64 = (0..=100)
        .map(|k| {
            let t = k as f64 / 100.0;
            v.iter().filter(|&&x| x > t).count() as f64 / n
        })
        .sum();
    Ok(total / 101.0)
}

/// Fraction of frames whose centre error is at most `threshold` pixels.
pub fn precision(pred: &[BoundingBox], gt: &[BoundingBox], threshold: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p.center_distance(g) <= threshold).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One tracked frame as written by the `track` command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedBox {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

pub const BOXES_HEADER: &str = "frame,x,y,w,h,score";
pub const METRICS_HEADER: &str = "sequence,auc,precision";

pub fn boxes_to_csv(rows: &[TrackedBox]) -> String {
    let mut s = String::from(BOXES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.frame, format_box(&r.bbox), r.score);
    }
    s
}

pub fn boxes_from_csv(text: &str) -> Result<Vec<TrackedBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line.trim() == BOXES_HEADER) {
            continue;
        }
        let (frame, rest) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected frame,x,y,w,h,score".into(),
        })?;
        let (coords, score) = rest.rsplit_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected frame,x,y,w,h,score".into(),
        })?;
        let bad = |what: &str| Error::Parse {
            line: line_no,
            msg: format!("invalid {what}"),
        };
        out.push(TrackedBox {
            frame: frame.trim().parse().map_err(|_| bad("frame"))?,
            bbox: parse_xywh(coords, line_no)?,
            score: score.trim().parse().map_err(|_| bad("score"))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub sequence: String,
    pub auc: f64,
    pub precision: f64,
}

pub fn metrics_to_csv(rows: &[SequenceMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.sequence, r.auc, r.precision);
    }
    s
}
