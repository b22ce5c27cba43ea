//! Synthetic visual question answering with two information regimes.
//!
//! Each image is a G×G grid of colored cells; exactly one cell is marked and
//! carries a glyph. A dominant color covers more than half of the cells, so a
//! global-color question is answerable from the image mean (one pooled token).
//!
//! The glyph is drawn as a signed pair: `+A` in glyph channel `g` of the
//! marked cell and `-A` in the same channel of its point mirror
//! `(G-1-r, G-1-c)`. Every glyph channel therefore averages to exactly zero
//! over the image, so the single pooled token carries no glyph information,
//! while any scale that keeps the two cells in different blocks does.
//!
//! Every pixel of a cell (a P×P patch) carries the same channels: `0..K_c`
//! the one-hot cell color, `K_c` the marker, `K_c + 1 + g` the glyph.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::toy_lmm::PixelImage;
use crate::training::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Cells per image side (equals the encoder grid).
    pub grid: usize,
    /// Pixels per cell side.
    pub patch: usize,
    pub colors: usize,
    pub glyphs: usize,
    /// Magnitude of the signed glyph pair.
    pub glyph_intensity: f32,
    pub train_per_kind: usize,
    pub test_per_kind: usize,
    /// Bounds on the fraction of cells painted in the dominant color.
    pub dominant_min: f64,
    pub dominant_max: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grid: 12,
            patch: 3,
            colors: 6,
            glyphs: 8,
            glyph_intensity: 16.0,
            train_per_kind: 2048,
            test_per_kind: 256,
            dominant_min: 0.55,
            dominant_max: 0.7,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid * self.grid;
        if self.grid == 0 || self.patch == 0 || self.colors < 2 || self.glyphs < 2 {
            return Err(M3Error::Config("data: grid/patch must be positive, colors/glyphs at least 2".into()));
        }
        if !(self.glyph_intensity.is_finite() && self.glyph_intensity > 0.0) {
            return Err(M3Error::Config("data.glyph_intensity must be positive".into()));
        }
        if cells < 2 {
            return Err(M3Error::Config("data.grid must be at least 2".into()));
        }
        if self.train_per_kind == 0 || self.test_per_kind == 0 {
            return Err(M3Error::Config("data: counts per kind must be at least 1".into()));
        }
        if !(self.dominant_min > 0.5 && self.dominant_min <= self.dominant_max && self.dominant_max <= 1.0) {
            return Err(M3Error::Config("data: need 0.5 < dominant_min <= dominant_max <= 1".into()));
        }
        let lo = (self.dominant_min * cells as f64).ceil() as usize;
        let hi = (self.dominant_max * cells as f64).floor() as usize;
        if lo > hi || 2 * lo <= cells {
            return Err(M3Error::Config("data: dominant fraction range admits no strict-majority count".into()));
        }
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        self.colors + 1 + self.glyphs
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary { colors: self.colors, glyphs: self.glyphs, grid: self.grid }
    }
}

/// Closed token set: specials, color names, glyph names, row and column names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    colors: usize,
    glyphs: usize,
    grid: usize,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const END: u32 = 1;
    pub const ASK_COLOR: u32 = 2;
    pub const ASK_GLYPH: u32 = 3;
    pub const ANSWER: u32 = 4;
    const SPECIALS: usize = 5;

    pub fn color(&self, c: usize) -> u32 {
        (Self::SPECIALS + c) as u32
    }

    pub fn glyph(&self, g: usize) -> u32 {
        (Self::SPECIALS + self.colors + g) as u32
    }

    pub fn row(&self, r: usize) -> u32 {
        (Self::SPECIALS + self.colors + self.glyphs + r) as u32
    }

    pub fn col(&self, c: usize) -> u32 {
        (Self::SPECIALS + self.colors + self.glyphs + self.grid + c) as u32
    }

    pub fn size(&self) -> usize {
        Self::SPECIALS + self.colors + self.glyphs + 2 * self.grid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub grid: usize,
    /// Color id per cell, row-major.
    pub colors: Vec<u8>,
    /// Glyph id shown in the marked cell.
    pub glyph: u8,
    /// Row-major index of the marked cell.
    pub marked: usize,
    pub dominant: u8,
}

impl SyntheticImage {
    pub fn marked_glyph(&self) -> u8 {
        self.glyph
    }

    /// Row-major index of the cell holding the negative half of the glyph.
    pub fn mirror(&self) -> usize {
        self.grid * self.grid - 1 - self.marked
    }

    pub fn rasterize(&self, cfg: &TaskConfig) -> PixelImage {
        let p = cfg.patch;
        let side = self.grid * p;
        let mut img = PixelImage::zeros(side, side, cfg.image_channels());
        let glyph = cfg.colors + 1 + self.glyph as usize;
        for cell in 0..self.grid * self.grid {
            let (r, c) = (cell / self.grid, cell % self.grid);
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (r * p + dy, c * p + dx);
                    img.set(y, x, self.colors[cell] as usize, 1.0);
                    if cell == self.marked {
                        img.set(y, x, cfg.colors, 1.0);
                        img.set(y, x, glyph, cfg.glyph_intensity);
                    } else if cell == self.mirror() {
                        img.set(y, x, glyph, -cfg.glyph_intensity);
                    }
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    GlobalColor,
    LocalGlyph,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 2] = [QuestionKind::GlobalColor, QuestionKind::LocalGlyph];

    pub fn label(self) -> &'static str {
        match self {
            QuestionKind::GlobalColor => "global-color",
            QuestionKind::LocalGlyph => "local-glyph",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub split: Split,
    pub kind: QuestionKind,
    pub image_seed: u64,
    pub image: SyntheticImage,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

impl TaskInstance {
    pub fn example(&self, cfg: &TaskConfig) -> Example {
        Example { image: self.image.rasterize(cfg), question: self.question.clone(), answer: self.answer.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

fn draw_image(cfg: &TaskConfig, image_seed: u64, dominant: usize, marked_glyph: Option<usize>) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let cells = cfg.grid * cfg.grid;
    let lo = (cfg.dominant_min * cells as f64).ceil() as usize;
    let hi = (cfg.dominant_max * cells as f64).floor() as usize;
    let n_dom = rng.gen_range(lo..=hi);

    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let mut colors = vec![0u8; cells];
    for (k, &cell) in order.iter().enumerate() {
        colors[cell] = if k < n_dom {
            dominant as u8
        } else {
            let other = rng.gen_range(0..cfg.colors - 1);
            (if other >= dominant { other + 1 } else { other }) as u8
        };
    }

    // odd grids have a self-mirrored center cell, which is never marked
    let marked = loop {
        let m = rng.gen_range(0..cells);
        if 2 * m + 1 != cells {
            break m;
        }
    };
    let glyph = marked_glyph.unwrap_or_else(|| rng.gen_range(0..cfg.glyphs)) as u8;
    SyntheticImage { grid: cfg.grid, colors, glyph, marked, dominant: dominant as u8 }
}

fn mix(x: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic train/test sets with exactly balanced labels per kind.
/// Image seeds are `base + counter` with one counter across both splits, so
/// the splits never share an image seed.
pub fn generate_dataset(seed: u64, cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let base = mix(seed);
    let mut counter = 0u64;
    let mut make_split = |split: Split, per_kind: usize| {
        let mut out = Vec::with_capacity(2 * per_kind);
        for kind in QuestionKind::ALL {
            for i in 0..per_kind {
                let image_seed = base.wrapping_add(counter);
                counter += 1;
                let (image, question, answer) = match kind {
                    QuestionKind::GlobalColor => {
                        let image = draw_image(cfg, image_seed, i % cfg.colors, None);
                        let answer = vec![vocab.color(image.dominant as usize), Vocabulary::END];
                        (image, vec![Vocabulary::ASK_COLOR, Vocabulary::ANSWER], answer)
                    }
                    QuestionKind::LocalGlyph => {
                        let dominant = (mix(image_seed) % cfg.colors as u64) as usize;
                        let image = draw_image(cfg, image_seed, dominant, Some(i % cfg.glyphs));
                        let (r, c) = (image.marked / cfg.grid, image.marked % cfg.grid);
                        let question = vec![Vocabulary::ASK_GLYPH, vocab.row(r), vocab.col(c), Vocabulary::ANSWER];
                        let answer = vec![vocab.glyph(image.marked_glyph() as usize), Vocabulary::END];
                        (image, question, answer)
                    }
                };
                let tag = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                out.push(TaskInstance {
                    id: format!("{tag}-{}-{i}", kind.label()),
                    split,
                    kind,
                    image_seed,
                    image,
                    question,
                    answer,
                });
            }
        }
        out
    };
    let mut train = make_split(Split::Train, cfg.train_per_kind);
    let mut test = make_split(Split::Test, cfg.test_per_kind);
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ 0x5eed);
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Dataset { train, test })
}

/// One JSON object per instance, in dataset order.
pub fn write_dataset_jsonl<W: std::io::Write>(mut out: W, instances: &[TaskInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
