//! Stochastic Moving MNIST.
//!
//! Digits move with constant velocity until they hit a wall. On impact the
//! position is clamped to the wall, both velocity components are redrawn
//! from `U[-max_speed, max_speed]`, and the component normal to the wall is
//! turned to point inward. Positions are continuous; frames are rendered at
//! the nearest integer offset and overlapping digits combine by per-pixel
//! max.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain, Rng};
use crate::tensor::Tensor;

pub const MNIST_SIDE: usize = 28;
const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// One 28x28 MNIST digit with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitImage {
    pub pixels: Vec<f64>,
    pub label: u8,
    pub index: usize,
    pub split: Split,
}

/// Square sprite used for rendering (a possibly resized digit).
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub size: usize,
    pub pixels: Vec<f64>,
    /// Index of the source digit in its split.
    pub source: usize,
}

impl DigitImage {
    /// Resample to `size x size` with bilinear interpolation at pixel
    /// centres (a 2x2 box mean for an exact 2x reduction).
    pub fn glyph(&self, size: usize) -> Glyph {
        Glyph {
            size,
            pixels: resize_bilinear(&self.pixels, MNIST_SIDE, size),
            source: self.index,
        }
    }
}

pub fn resize_bilinear(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    if from == to {
        return src.to_vec();
    }
    let scale = from as f64 / to as f64;
    let coord = |o: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = vec![0.0; to * to];
    for oy in 0..to {
        let (y0, y1, fy) = coord(oy);
        for ox in 0..to {
            let (x0, x1, fx) = coord(ox);
            let top = src[y0 * from + x0] * (1.0 - fx) + src[y0 * from + x1] * fx;
            let bottom = src[y1 * from + x0] * (1.0 - fx) + src[y1 * from + x1] * fx;
            out[oy * to + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{}: truncated header", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image/label file pair.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Vec<DigitImage>> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;

    let magic = read_u32(&img, 0, images)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic 0x{magic:08x} (expected 0x{IMAGES_MAGIC:08x})",
            images.display()
        )));
    }
    let magic = read_u32(&lab, 0, labels)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic 0x{magic:08x} (expected 0x{LABELS_MAGIC:08x})",
            labels.display()
        )));
    }
    let count = read_u32(&img, 4, images)? as usize;
    let rows = read_u32(&img, 8, images)? as usize;
    let cols = read_u32(&img, 12, images)? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(Error::Data(format!(
            "{}: images are {rows}x{cols}, expected 28x28",
            images.display()
        )));
    }
    let label_count = read_u32(&lab, 4, labels)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "image count {count} does not match label count {label_count}"
        )));
    }
    let px = MNIST_SIDE * MNIST_SIDE;
    let need = 16 + count * px;
    if img.len() < need {
        return Err(Error::Data(format!(
            "{}: truncated ({} bytes, header promises {need})",
            images.display(),
            img.len()
        )));
    }
    if lab.len() < 8 + count {
        return Err(Error::Data(format!(
            "{}: truncated ({} bytes, header promises {})",
            labels.display(),
            lab.len(),
            8 + count
        )));
    }
    Ok((0..count)
        .map(|i| DigitImage {
            pixels: img[16 + i * px..16 + (i + 1) * px]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            label: lab[8 + i],
            index: i,
            split,
        })
        .collect())
}

/// Load `{train,t10k}-images-idx3-ubyte` and the matching labels from `dir`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<DigitImage>> {
    let p = split.file_prefix();
    let images = dir.join(format!("{p}-images-idx3-ubyte"));
    let labels = dir.join(format!("{p}-labels-idx1-ubyte"));
    for f in [&images, &labels] {
        if !f.exists() {
            return Err(Error::Data(format!("MNIST file not found: {}", f.display())));
        }
    }
    let digits = load_mnist_idx(&images, &labels, split)?;
    if digits.is_empty() {
        return Err(Error::Data(format!("{}: no digits", images.display())));
    }
    Ok(digits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wall {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Collision {
    /// Index of the frame at which the digit sits on the wall.
    pub step: usize,
    pub wall: Wall,
}

/// Digit trajectory. `x`, `y` are the continuous top-left coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Number of steps taken so far (index of the current frame).
    pub step: usize,
    pub collisions: Vec<Collision>,
}

/// Frame extent and sprite size a trajectory lives in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub height: usize,
    pub width: usize,
    pub sprite: usize,
    pub max_speed: f64,
}

impl Bounds {
    pub fn max_x(&self) -> f64 {
        (self.width - self.sprite) as f64
    }

    pub fn max_y(&self) -> f64 {
        (self.height - self.sprite) as f64
    }

    pub fn contains(&self, s: &TrajectoryState) -> bool {
        (0.0..=self.max_x()).contains(&s.x) && (0.0..=self.max_y()).contains(&s.y)
    }
}

impl TrajectoryState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        TrajectoryState {
            x,
            y,
            vx,
            vy,
            step: 0,
            collisions: Vec::new(),
        }
    }

    /// Uniform position over the valid range and uniform velocity.
    pub fn random(bounds: &Bounds, rng: &mut Rng) -> Self {
        let x = rng.random_range(0.0..=bounds.max_x());
        let y = rng.random_range(0.0..=bounds.max_y());
        let s = bounds.max_speed;
        let vx = rng.random_range(-s..=s);
        let vy = rng.random_range(-s..=s);
        TrajectoryState::new(x, y, vx, vy)
    }

    /// Integer pixel offset used for rendering.
    pub fn offset(&self) -> (usize, usize) {
        (self.x.round() as usize, self.y.round() as usize)
    }
}

/// Advance one frame, bouncing off walls with a fresh random velocity.
pub fn step_trajectory(state: &mut TrajectoryState, rng: &mut Rng, bounds: &Bounds) {
    state.step += 1;
    let mut x = state.x + state.vx;
    let mut y = state.y + state.vy;
    let mut hit_x = None;
    let mut hit_y = None;
    if x < 0.0 {
        x = 0.0;
        hit_x = Some(Wall::Left);
    } else if x > bounds.max_x() {
        x = bounds.max_x();
        hit_x = Some(Wall::Right);
    }
    if y < 0.0 {
        y = 0.0;
        hit_y = Some(Wall::Top);
    } else if y > bounds.max_y() {
        y = bounds.max_y();
        hit_y = Some(Wall::Bottom);
    }
    state.x = x;
    state.y = y;
    if hit_x.is_none() && hit_y.is_none() {
        return;
    }
    let s = bounds.max_speed;
    let mut vx = rng.random_range(-s..=s);
    let mut vy = rng.random_range(-s..=s);
    match hit_x {
        Some(Wall::Left) => vx = vx.abs(),
        Some(_) => vx = -vx.abs(),
        None => {}
    }
    match hit_y {
        Some(Wall::Top) => vy = vy.abs(),
        Some(_) => vy = -vy.abs(),
        None => {}
    }
    state.vx = vx;
    state.vy = vy;
    for wall in hit_x.into_iter().chain(hit_y) {
        state.collisions.push(Collision {
            step: state.step,
            wall,
        });
    }
}

/// Provenance of a rendered sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub digit_ids: Vec<usize>,
    pub trajectory_seed: u64,
}

/// `T` frames of `H x W` pixels, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub provenance: Provenance,
    /// Collision log of each digit.
    pub collisions: Vec<Vec<Collision>>,
    /// Rendered integer offset `(x, y)` of each digit in each frame.
    pub offsets: Vec<Vec<(usize, usize)>>,
}

impl VideoSequence {
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.frame(t).to_vec())
            .expect("frame extent matches")
    }
}

/// Paste a glyph at `(x, y)` combining by max.
pub fn paste_max(frame: &mut [f64], width: usize, glyph: &Glyph, x: usize, y: usize) {
    let s = glyph.size;
    for r in 0..s {
        let row = &mut frame[(y + r) * width + x..(y + r) * width + x + s];
        for (dst, &src) in row.iter_mut().zip(&glyph.pixels[r * s..(r + 1) * s]) {
            if src > *dst {
                *dst = src;
            }
        }
    }
}

fn check_fit(glyphs: &[&Glyph], height: usize, width: usize) -> Result<()> {
    if glyphs.is_empty() {
        return Err(Error::Data("need at least one digit".into()));
    }
    for g in glyphs {
        if g.size > height || g.size > width {
            return Err(Error::Data(format!(
                "{}x{} frame is smaller than the {}x{} digit",
                height, width, g.size, g.size
            )));
        }
    }
    Ok(())
}

fn draw(trajectories: &[Vec<(usize, usize)>], glyphs: &[&Glyph], len: usize, height: usize, width: usize) -> Vec<f64> {
    let n = height * width;
    let mut pixels = vec![0.0; len * n];
    for t in 0..len {
        let frame = &mut pixels[t * n..(t + 1) * n];
        for (glyph, path) in glyphs.iter().zip(trajectories) {
            let (x, y) = path[t];
            paste_max(frame, width, glyph, x, y);
        }
    }
    pixels
}

/// Run a trajectory for `len` frames; returns the rendered offsets.
pub fn simulate(state: &mut TrajectoryState, len: usize, rng: &mut Rng, bounds: &Bounds) -> Vec<(usize, usize)> {
    let mut path = Vec::with_capacity(len);
    path.push(state.offset());
    for _ in 1..len {
        step_trajectory(state, rng, bounds);
        path.push(state.offset());
    }
    path
}

/// Render `len` frames of the given digits with independent random
/// trajectories. Digit `d` draws from stream `(seed, d)`.
pub fn render_sequence(
    glyphs: &[&Glyph],
    len: usize,
    height: usize,
    width: usize,
    max_speed: f64,
    seed: u64,
) -> Result<VideoSequence> {
    check_fit(glyphs, height, width)?;
    let mut paths = Vec::with_capacity(glyphs.len());
    let mut logs = Vec::with_capacity(glyphs.len());
    for (d, glyph) in glyphs.iter().enumerate() {
        let bounds = Bounds {
            height,
            width,
            sprite: glyph.size,
            max_speed,
        };
        let mut rng = stream(seed, Domain::Trajectory, &[d as u64]);
        let mut state = TrajectoryState::random(&bounds, &mut rng);
        paths.push(simulate(&mut state, len, &mut rng, &bounds));
        logs.push(state.collisions);
    }
    Ok(VideoSequence {
        len,
        height,
        width,
        pixels: draw(&paths, glyphs, len, height, width),
        provenance: Provenance {
            digit_ids: glyphs.iter().map(|g| g.source).collect(),
            trajectory_seed: seed,
        },
        collisions: logs,
        offsets: paths,
    })
}

#[allow(clippy::too_many_arguments)]
/// `n` sequences sharing one trajectory realisation but showing different
/// digits: sequence `i` uses `pool[i * k..(i + 1) * k]` for `k` digits.
pub fn synchronized_batch(
    pool: &[Glyph],
    digits_per_sequence: usize,
    trajectory_seed: u64,
    n: usize,
    len: usize,
    height: usize,
    width: usize,
    max_speed: f64,
) -> Result<Vec<VideoSequence>> {
    let k = digits_per_sequence;
    if k == 0 || pool.len() < n * k {
        return Err(Error::Data(format!(
            "synchronized batch of {n} sequences with {k} digits needs {} pool digits, have {}",
            n * k,
            pool.len()
        )));
    }
    // trajectories depend only on the glyph size, which is uniform in a pool
    let template: Vec<&Glyph> = pool[..k].iter().collect();
    let shared = render_sequence(&template, len, height, width, max_speed, trajectory_seed)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let glyphs: Vec<&Glyph> = pool[i * k..(i + 1) * k].iter().collect();
        check_fit(&glyphs, height, width)?;
        if glyphs.iter().any(|g| g.size != template[0].size) {
            return Err(Error::Data("synchronized pool mixes glyph sizes".into()));
        }
        out.push(VideoSequence {
            pixels: draw(&shared.offsets, &glyphs, len, height, width),
            provenance: Provenance {
                digit_ids: glyphs.iter().map(|g| g.source).collect(),
                trajectory_seed,
            },
            ..shared.clone()
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
/// `n` single-digit sequences that all start from `start` but draw every
/// bounce from their own stream `(seed, Trajectory, [i, 1])`. They agree
/// frame for frame until the first collision and diverge afterwards.
/// Sequence `i` shows `pool[i % pool.len()]`.
pub fn branching_batch(
    pool: &[Glyph],
    start: &TrajectoryState,
    n: usize,
    len: usize,
    height: usize,
    width: usize,
    max_speed: f64,
    seed: u64,
) -> Result<Vec<VideoSequence>> {
    let first = pool.first().ok_or_else(|| Error::Data("empty digit pool".into()))?;
    let bounds = Bounds {
        height,
        width,
        sprite: first.size,
        max_speed,
    };
    if !bounds.contains(start) {
        return Err(Error::Data("branching start state lies outside the frame".into()));
    }
    (0..n)
        .map(|i| {
            let glyph = &pool[i % pool.len()];
            check_fit(&[glyph], height, width)?;
            if glyph.size != first.size {
                return Err(Error::Data("branching pool mixes glyph sizes".into()));
            }
            let mut rng = stream(seed, Domain::Trajectory, &[i as u64, 1]);
            let mut state = start.clone();
            let path = simulate(&mut state, len, &mut rng, &bounds);
            Ok(VideoSequence {
                len,
                height,
                width,
                pixels: draw(std::slice::from_ref(&path), &[glyph], len, height, width),
                provenance: Provenance {
                    digit_ids: vec![glyph.source],
                    trajectory_seed: seed,
                },
                collisions: vec![state.collisions],
                offsets: vec![path],
            })
        })
        .collect()
}

/// Stack frame `t` of each sequence into `[B x 1 x H x W]`, for every `t`.
pub fn batch_frames(seqs: &[VideoSequence]) -> Result<Vec<Tensor>> {
    let first = seqs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (len, h, w) = (first.len, first.height, first.width);
    if seqs.iter().any(|s| s.len != len || s.height != h || s.width != w) {
        return Err(Error::Data("sequences in a batch must share T, H and W".into()));
    }
    Ok((0..len)
        .map(|t| {
            let mut data = Vec::with_capacity(seqs.len() * h * w);
            for s in seqs {
                data.extend_from_slice(s.frame(t));
            }
            Tensor::new(vec![seqs.len(), 1, h, w], data).expect("extent matches")
        })
        .collect())
}

/// Glyph pool plus rendering parameters.
#[derive(Clone, Debug)]
pub struct SmMnist {
    pub glyphs: Vec<Glyph>,
    pub frame_size: usize,
    pub num_digits: usize,
    pub max_speed: f64,
}

impl SmMnist {
    pub fn from_digits(digits: &[DigitImage], cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        if digits.is_empty() {
            return Err(Error::Data("empty digit pool".into()));
        }
        let size = cfg.profile.digit_size();
        Ok(SmMnist {
            glyphs: digits.iter().map(|d| d.glyph(size)).collect(),
            frame_size: cfg.profile.frame_size(),
            num_digits: cfg.num_digits,
            max_speed: cfg.max_speed,
        })
    }

    /// Load a split from the configured (or environment-overridden) directory.
    pub fn load(cfg: &DataConfig, split: Split) -> Result<Self> {
        let digits = load_split(&cfg.resolved_mnist_dir(), split)?;
        Self::from_digits(&digits, cfg)
    }

    /// Sequence number `index` of the stream `(seed, domain)`.
    pub fn sequence(&self, seed: u64, domain: Domain, index: u64, len: usize) -> Result<VideoSequence> {
        let mut rng = stream(seed, domain, &[index]);
        let glyphs: Vec<&Glyph> = (0..self.num_digits)
            .map(|_| &self.glyphs[rng.random_range(0..self.glyphs.len())])
            .collect();
        let traj_seed: u64 = rng.random();
        render_sequence(&glyphs, len, self.frame_size, self.frame_size, self.max_speed, traj_seed)
    }

    /// Sequences `first..first + count` of the stream `(seed, domain)`.
    pub fn sequences(&self, seed: u64, domain: Domain, first: u64, count: usize, len: usize) -> Result<Vec<VideoSequence>> {
        (0..count as u64)
            .map(|i| self.sequence(seed, domain, first + i, len))
            .collect()
    }
}

pub const EXPORT_MAGIC: &[u8; 4] = b"SMMN";
pub const EXPORT_VERSION: u32 = 1;

/// Write sequences as: magic `SMMN`, then little-endian `u32` version, T,
/// H, W, count, then `count * T * H * W` little-endian `f32` pixels in
/// sequence, frame, row, column order.
pub fn export_sequences(path: &Path, seqs: &[VideoSequence]) -> Result<()> {
    let first = seqs.first().ok_or_else(|| Error::Data("nothing to export".into()))?;
    let (len, h, w) = (first.len, first.height, first.width);
    if seqs.iter().any(|s| s.len != len || s.height != h || s.width != w) {
        return Err(Error::Data("exported sequences must share T, H and W".into()));
    }
    let mut buf = Vec::with_capacity(24 + seqs.len() * len * h * w * 4);
    buf.extend_from_slice(EXPORT_MAGIC);
    for v in [EXPORT_VERSION, len as u32, h as u32, w as u32, seqs.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in seqs {
        for &p in &s.pixels {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Header and pixels of an exported file: `(T, H, W, count, pixels)`.
pub fn import_sequences(path: &Path) -> Result<(usize, usize, usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    if bytes.len() < 24 || &bytes[..4] != EXPORT_MAGIC {
        return Err(Error::Data(format!("{}: not a sequence export", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) as u32 != EXPORT_VERSION {
        return Err(Error::Data(format!("{}: unsupported version {}", path.display(), word(0))));
    }
    let (len, h, w, count) = (word(1), word(2), word(3), word(4));
    let n = len * h * w * count;
    if bytes.len() != 24 + 4 * n {
        return Err(Error::Data(format!("{}: truncated export", path.display())));
    }
    let pixels = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((len, h, w, count, pixels))
}
