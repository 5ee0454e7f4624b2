//! Deterministic synthetic caption corpora: colored shapes on a 32x32
//! canvas, captions from a closed grammar, and dependency-free PPM corpus
//! I/O. Every caption parses back to the scene that produced it, which is
//! the correctness oracle for the generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CANVAS: usize = 32;
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const COLOR_RGB: [[u8; 3]; 3] = [[255, 40, 40], [40, 255, 40], [40, 40, 255]];
const RADIUS: i32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    /// The same scene viewed with subject and object swapped.
    pub fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
        }
    }

    fn words(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Stays,
    Left,
    Right,
    Up,
    Down,
}

impl Motion {
    pub fn delta(self) -> (i32, i32) {
        match self {
            Motion::Stays => (0, 0),
            Motion::Left => (-2, 0),
            Motion::Right => (2, 0),
            Motion::Up => (0, -2),
            Motion::Down => (0, 2),
        }
    }

    /// Horizontal mirror: left and right swap, everything else fixed.
    pub fn mirrored(self) -> Motion {
        match self {
            Motion::Left => Motion::Right,
            Motion::Right => Motion::Left,
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub color: usize,
    pub shape: usize,
    pub cx: i32,
    pub cy: i32,
}

/// A sampled scene: one or two static shapes, or one moving shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub shapes: Vec<Placement>,
    pub relation: Option<Relation>,
    pub motion: Option<Motion>,
}

/// Semantic content of a caption, the target of the inverse parser.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedCaption {
    Single {
        color: usize,
        shape: usize,
    },
    Pair {
        first: (usize, usize),
        relation: Relation,
        second: (usize, usize),
    },
    Moving {
        color: usize,
        shape: usize,
        motion: Motion,
    },
}

impl ParsedCaption {
    /// The unique caption string for this content; inverse of
    /// [`parse_caption`].
    pub fn text(&self) -> String {
        let name = |&(c, s): &(usize, usize)| format!("{} {}", COLORS[c], SHAPES[s]);
        match self {
            ParsedCaption::Single { color, shape } => name(&(*color, *shape)),
            ParsedCaption::Pair {
                first,
                relation,
                second,
            } => format!("{} {} {}", name(first), relation.words(), name(second)),
            ParsedCaption::Moving {
                color,
                shape,
                motion,
            } => match motion {
                Motion::Stays => format!("{} stays", name(&(*color, *shape))),
                Motion::Left => format!("{} moves left", name(&(*color, *shape))),
                Motion::Right => format!("{} moves right", name(&(*color, *shape))),
                Motion::Up => format!("{} moves up", name(&(*color, *shape))),
                Motion::Down => format!("{} moves down", name(&(*color, *shape))),
            },
        }
    }
}

impl Scene {
    pub fn caption(&self) -> String {
        let name = |p: &Placement| format!("{} {}", COLORS[p.color], SHAPES[p.shape]);
        match (&self.motion, &self.relation) {
            (Some(Motion::Stays), _) => format!("{} stays", name(&self.shapes[0])),
            (Some(m), _) => {
                let dir = match m {
                    Motion::Left => "left",
                    Motion::Right => "right",
                    Motion::Up => "up",
                    Motion::Down => "down",
                    Motion::Stays => unreachable!(),
                };
                format!("{} moves {}", name(&self.shapes[0]), dir)
            }
            (None, Some(rel)) => format!(
                "{} {} {}",
                name(&self.shapes[0]),
                rel.words(),
                name(&self.shapes[1])
            ),
            (None, None) => name(&self.shapes[0]),
        }
    }

    pub fn describe(&self) -> ParsedCaption {
        let p = &self.shapes[0];
        match (&self.motion, &self.relation) {
            (Some(m), _) => ParsedCaption::Moving {
                color: p.color,
                shape: p.shape,
                motion: *m,
            },
            (None, Some(rel)) => ParsedCaption::Pair {
                first: (p.color, p.shape),
                relation: *rel,
                second: (self.shapes[1].color, self.shapes[1].shape),
            },
            (None, None) => ParsedCaption::Single {
                color: p.color,
                shape: p.shape,
            },
        }
    }

    /// Renders frame `k` as RGB bytes, row-major `[H, W, 3]`.
    pub fn render(&self, frame: usize) -> Vec<u8> {
        let mut pixels = vec![0u8; CANVAS * CANVAS * 3];
        let (dx, dy) = self.motion.map_or((0, 0), Motion::delta);
        for p in &self.shapes {
            let cx = p.cx + dx * frame as i32;
            let cy = p.cy + dy * frame as i32;
            let rgb = COLOR_RGB[p.color];
            for y in cy - RADIUS..=cy + RADIUS {
                for x in cx - RADIUS..=cx + RADIUS {
                    if x < 0 || y < 0 || x >= CANVAS as i32 || y >= CANVAS as i32 {
                        continue;
                    }
                    let (ox, oy) = (x - cx, y - cy);
                    let inside = match SHAPES[p.shape] {
                        "circle" => ox * ox + oy * oy <= RADIUS * RADIUS,
                        "square" => ox.abs() <= RADIUS - 1 && oy.abs() <= RADIUS - 1,
                        // filled isoceles triangle pointing up
                        _ => oy >= -RADIUS + 1 && oy <= RADIUS - 1 && 2 * ox.abs() <= oy + RADIUS,
                    };
                    if inside {
                        let base = (y as usize * CANVAS + x as usize) * 3;
                        pixels[base..base + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        pixels
    }
}

pub fn parse_caption(caption: &str) -> Result<ParsedCaption> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let pair = |c: &str, s: &str| -> Result<(usize, usize)> {
        let color = COLORS
            .iter()
            .position(|&w| w == c)
            .ok_or_else(|| Error::Parse {
                file: "<caption>".into(),
                msg: format!("unknown color {c:?}"),
            })?;
        let shape = SHAPES
            .iter()
            .position(|&w| w == s)
            .ok_or_else(|| Error::Parse {
                file: "<caption>".into(),
                msg: format!("unknown shape {s:?}"),
            })?;
        Ok((color, shape))
    };
    let bad = || Error::Parse {
        file: "<caption>".into(),
        msg: format!("caption {caption:?} not in the grammar"),
    };
    match words.as_slice() {
        [c, s] => {
            let (color, shape) = pair(c, s)?;
            Ok(ParsedCaption::Single { color, shape })
        }
        [c, s, "stays"] => {
            let (color, shape) = pair(c, s)?;
            Ok(ParsedCaption::Moving {
                color,
                shape,
                motion: Motion::Stays,
            })
        }
        [c, s, "moves", dir] => {
            let (color, shape) = pair(c, s)?;
            let motion = match *dir {
                "left" => Motion::Left,
                "right" => Motion::Right,
                "up" => Motion::Up,
                "down" => Motion::Down,
                _ => return Err(bad()),
            };
            Ok(ParsedCaption::Moving {
                color,
                shape,
                motion,
            })
        }
        [c1, s1, rel @ ("above" | "below"), c2, s2] => Ok(ParsedCaption::Pair {
            first: pair(c1, s1)?,
            relation: if *rel == "above" {
                Relation::Above
            } else {
                Relation::Below
            },
            second: pair(c2, s2)?,
        }),
        [c1, s1, rel @ ("left" | "right"), "of", c2, s2] => Ok(ParsedCaption::Pair {
            first: pair(c1, s1)?,
            relation: if *rel == "left" {
                Relation::LeftOf
            } else {
                Relation::RightOf
            },
            second: pair(c2, s2)?,
        }),
        _ => Err(bad()),
    }
}

// Cell centers keep any two shapes at least 16 apart, so they never touch.
const CELLS: [[i32; 2]; 4] = [[8, 8], [24, 8], [8, 24], [24, 24]];

pub fn gen_image_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = Placement {
        color: rng.random_range(0..3),
        shape: rng.random_range(0..3),
        cx: 0,
        cy: 0,
    };
    if rng.random_bool(0.4) {
        let cell = CELLS[rng.random_range(0..4)];
        return Scene {
            shapes: vec![Placement {
                cx: cell[0],
                cy: cell[1],
                ..first
            }],
            relation: None,
            motion: None,
        };
    }
    let second = Placement {
        color: rng.random_range(0..3),
        shape: rng.random_range(0..3),
        cx: 0,
        cy: 0,
    };
    let relation = match rng.random_range(0..4) {
        0 => Relation::Above,
        1 => Relation::Below,
        2 => Relation::LeftOf,
        _ => Relation::RightOf,
    };
    // Position the pair consistently with the stated relation.
    let lane = rng.random_range(0..2) as i32 * 16 + 8;
    let (a, b) = match relation {
        Relation::Above => ((lane, 8), (lane, 24)),
        Relation::Below => ((lane, 24), (lane, 8)),
        Relation::LeftOf => ((8, lane), (24, lane)),
        Relation::RightOf => ((24, lane), (8, lane)),
    };
    let mut shapes = vec![
        Placement {
            cx: a.0,
            cy: a.1,
            ..first
        },
        Placement {
            cx: b.0,
            cy: b.1,
            ..second
        },
    ];
    // Every pair admits two equivalent descriptions. The caption must be
    // a function of the pixels alone, so the subject is always the upper
    // or left shape; pair captions therefore read "above" or "left of".
    let mut relation = relation;
    if matches!(relation, Relation::Below | Relation::RightOf) {
        shapes.swap(0, 1);
        relation = relation.inverse();
    }
    Scene {
        shapes,
        relation: Some(relation),
        motion: None,
    }
}

pub fn gen_image_sample(seed: u64) -> (Vec<u8>, String) {
    let scene = gen_image_scene(seed);
    (scene.render(0), scene.caption())
}

/// `N = 1` degenerates to the static single-shape grammar. Starting spots
/// that would carry the shape off canvas are re-sampled deterministically.
pub fn gen_video_scene(seed: u64, n: usize) -> Result<Scene> {
    if n == 0 {
        return Err(Error::Contract("video with zero frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76_69_64);
    let color = rng.random_range(0..3);
    let shape = rng.random_range(0..3);
    if n == 1 {
        let cell = CELLS[rng.random_range(0..4)];
        return Ok(Scene {
            shapes: vec![Placement {
                color,
                shape,
                cx: cell[0],
                cy: cell[1],
            }],
            relation: None,
            motion: None,
        });
    }
    loop {
        let motion = match rng.random_range(0..5) {
            0 => Motion::Stays,
            1 => Motion::Left,
            2 => Motion::Right,
            3 => Motion::Up,
            _ => Motion::Down,
        };
        // start positions on a coarse grid, like the still-image cells
        let slots = (CANVAS as i32 - 2 * RADIUS - 1) / 4 + 1;
        let cx = RADIUS + 4 * rng.random_range(0..slots);
        let cy = RADIUS + 4 * rng.random_range(0..slots);
        let (dx, dy) = motion.delta();
        let last = (n - 1) as i32;
        let (ex, ey) = (cx + dx * last, cy + dy * last);
        let on_canvas = |v: i32| (RADIUS..CANVAS as i32 - RADIUS).contains(&v);
        if on_canvas(ex) && on_canvas(ey) {
            return Ok(Scene {
                shapes: vec![Placement {
                    color,
                    shape,
                    cx,
                    cy,
                }],
                relation: None,
                motion: Some(motion),
            });
        }
    }
}

pub fn gen_video_sample(seed: u64, n: usize) -> Result<(Vec<Vec<u8>>, String)> {
    let scene = gen_video_scene(seed, n)?;
    let frames = (0..n).map(|k| scene.render(k)).collect();
    Ok((frames, scene.caption()))
}

pub fn pixels_to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

// ---------------------------------------------------------------------------
// label-aware augmentation

/// A caption-preserving-up-to-rewrite transform of a sample: permute the
/// color channels (rewriting color words), mirror (rewriting the spatial
/// words), and shift by a couple of pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// `perm[i]` is the palette index color `i` becomes.
    pub perm: [usize; 3],
    pub hflip: bool,
    pub vflip: bool,
    pub dx: i32,
    pub dy: i32,
}

impl Augmentation {
    pub fn identity() -> Augmentation {
        Augmentation {
            perm: [0, 1, 2],
            hflip: false,
            vflip: false,
            dx: 0,
            dy: 0,
        }
    }
}

const COLOR_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Recoloring only. Unlike mirrors and shifts this maps generated images
/// onto other generated images, so it widens corpus coverage of the scene
/// space without pushing inputs off the generator's manifold.
pub fn random_color_permutation(rng: &mut impl Rng) -> Augmentation {
    Augmentation {
        perm: COLOR_PERMS[rng.random_range(0..COLOR_PERMS.len())],
        ..Augmentation::identity()
    }
}

pub fn random_augmentation(rng: &mut impl Rng) -> Augmentation {
    Augmentation {
        perm: COLOR_PERMS[rng.random_range(0..COLOR_PERMS.len())],
        hflip: rng.random_bool(0.5),
        vflip: rng.random_bool(0.5),
        dx: rng.random_range(-2..=2),
        dy: rng.random_range(-2..=2),
    }
}

fn augment_frame(frame: &[u8], aug: &Augmentation) -> Vec<u8> {
    let w = CANVAS as i32;
    let mut out = vec![0u8; frame.len()];
    for y in 0..w {
        for x in 0..w {
            let (mut sx, mut sy) = (x - aug.dx, y - aug.dy);
            if aug.hflip {
                sx = w - 1 - sx;
            }
            if aug.vflip {
                sy = w - 1 - sy;
            }
            if sx < 0 || sy < 0 || sx >= w || sy >= w {
                continue;
            }
            let src = ((sy * w + sx) * 3) as usize;
            let dst = ((y * w + x) * 3) as usize;
            for c in 0..3 {
                out[dst + aug.perm[c]] = frame[src + c];
            }
        }
    }
    out
}

fn augment_caption(parsed: &ParsedCaption, aug: &Augmentation) -> ParsedCaption {
    let recolor = |(c, s): (usize, usize)| (aug.perm[c], s);
    match parsed {
        ParsedCaption::Single { color, shape } => ParsedCaption::Single {
            color: aug.perm[*color],
            shape: *shape,
        },
        ParsedCaption::Pair {
            first,
            relation,
            second,
        } => {
            let (mut a, mut b) = (recolor(*first), recolor(*second));
            // a mirror along the relation's axis swaps subject and object
            // but keeps the canonical relation word
            let swap = match relation {
                Relation::LeftOf | Relation::RightOf => aug.hflip,
                Relation::Above | Relation::Below => aug.vflip,
            };
            if swap {
                std::mem::swap(&mut a, &mut b);
            }
            ParsedCaption::Pair {
                first: a,
                relation: *relation,
                second: b,
            }
        }
        ParsedCaption::Moving {
            color,
            shape,
            motion,
        } => {
            let mut motion = *motion;
            if aug.hflip {
                motion = motion.mirrored();
            }
            if aug.vflip {
                motion = match motion {
                    Motion::Up => Motion::Down,
                    Motion::Down => Motion::Up,
                    other => other,
                };
            }
            ParsedCaption::Moving {
                color: aug.perm[*color],
                shape: *shape,
                motion,
            }
        }
    }
}

/// Applies the transform to every frame and rewrites the caption to match.
pub fn augment_sample(sample: &Sample, aug: &Augmentation) -> Result<Sample> {
    let parsed = parse_caption(&sample.caption)?;
    Ok(Sample {
        id: sample.id.clone(),
        frames: sample
            .frames
            .iter()
            .map(|f| augment_frame(f, aug))
            .collect(),
        caption: augment_caption(&parsed, aug).text(),
    })
}

// ---------------------------------------------------------------------------
// tokenizer

pub const BOS: usize = 0;
pub const EOS: usize = 1;

/// Word-level tokenizer over the closed grammar vocabulary.
pub struct Tokenizer {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn grammar_vocab() -> Vec<String> {
        let mut words: Vec<String> = vec!["<bos>".into(), "<eos>".into()];
        for w in COLORS.iter().chain(SHAPES.iter()).chain(
            [
                "above", "below", "left", "right", "of", "moves", "stays", "up", "down",
            ]
            .iter(),
        ) {
            words.push((*w).into());
        }
        words
    }

    pub fn new(words: Vec<String>) -> Result<Tokenizer> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if words.first().map(String::as_str) != Some("<bos>")
            || words.get(1).map(String::as_str) != Some("<eos>")
        {
            return Err(Error::Contract(
                "vocabulary must start with <bos>, <eos>".into(),
            ));
        }
        Ok(Tokenizer { words, index })
    }

    pub fn default_grammar() -> Tokenizer {
        Tokenizer::new(Tokenizer::grammar_vocab()).expect("fixed vocabulary is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.index.get(w).copied().ok_or_else(|| Error::Parse {
                    file: "<caption>".into(),
                    msg: format!("word {w:?} not in vocabulary"),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            match self.words.get(id) {
                Some(w) => out.push_str(w),
                None => {
                    let _ = write!(out, "<{id}?>");
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// PPM and corpus I/O

pub fn write_ppm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::Contract(format!(
            "{} pixel bytes for a {}x{} image",
            pixels.len(),
            width,
            height
        )));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P6\n{width} {height}\n255\n");
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(pixels))
        .map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let parse_err = |msg: &str| Error::Parse {
        file: path.display().to_string(),
        msg: msg.into(),
    };
    // Header: "P6", whitespace-separated width, height, maxval, then a
    // single whitespace byte before the raster.
    if !bytes.starts_with(b"P6") {
        return Err(parse_err("not a P6 file"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| parse_err("non-ascii header"))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| parse_err("bad header number"))?,
        );
    }
    if pos >= bytes.len() {
        return Err(parse_err("truncated header"));
    }
    pos += 1; // single whitespace after maxval
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(parse_err("only maxval 255 supported"));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(parse_err("truncated raster"));
    }
    Ok((bytes[pos..pos + need].to_vec(), width, height))
}

/// One corpus record; a single-frame sample is an image sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub frames: Vec<Vec<u8>>,
    pub caption: String,
}

#[derive(Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub vocab: Vec<String>,
}

/// Layout: `images/<id>.ppm` or `videos/<id>/frame<k>.ppm`, plus
/// `captions.tsv` and `vocab.txt`.
pub fn write_corpus(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut captions = String::new();
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for sample in ordered {
        if sample.frames.len() == 1 {
            let subdir = dir.join("images");
            std::fs::create_dir_all(&subdir).map_err(|e| Error::io(&subdir, e))?;
            write_ppm(
                &subdir.join(format!("{}.ppm", sample.id)),
                &sample.frames[0],
                CANVAS,
                CANVAS,
            )?;
        } else {
            let subdir = dir.join("videos").join(&sample.id);
            std::fs::create_dir_all(&subdir).map_err(|e| Error::io(&subdir, e))?;
            for (k, frame) in sample.frames.iter().enumerate() {
                write_ppm(&subdir.join(format!("frame{k}.ppm")), frame, CANVAS, CANVAS)?;
            }
        }
        captions.push_str(&format!("{}\t{}\n", sample.id, sample.caption));
    }
    let captions_path = dir.join("captions.tsv");
    std::fs::write(&captions_path, captions).map_err(|e| Error::io(&captions_path, e))?;
    let vocab_path = dir.join("vocab.txt");
    let vocab = Tokenizer::grammar_vocab().join("\n") + "\n";
    std::fs::write(&vocab_path, vocab).map_err(|e| Error::io(&vocab_path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let captions_path = dir.join("captions.tsv");
    let text =
        std::fs::read_to_string(&captions_path).map_err(|e| Error::io(&captions_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let (id, caption) = line.split_once('\t').ok_or_else(|| Error::Parse {
            file: captions_path.display().to_string(),
            msg: format!("line {}: missing tab separator", lineno + 1),
        })?;
        let image_path = dir.join("images").join(format!("{id}.ppm"));
        let frames = if image_path.exists() {
            let (pixels, w, h) = read_ppm(&image_path)?;
            if (w, h) != (CANVAS, CANVAS) {
                return Err(Error::Parse {
                    file: image_path.display().to_string(),
                    msg: format!("expected {CANVAS}x{CANVAS}, got {w}x{h}"),
                });
            }
            vec![pixels]
        } else {
            let video_dir = dir.join("videos").join(id);
            let mut frames = Vec::new();
            loop {
                let frame_path = video_dir.join(format!("frame{}.ppm", frames.len()));
                if !frame_path.exists() {
                    break;
                }
                frames.push(read_ppm(&frame_path)?.0);
            }
            if frames.is_empty() {
                return Err(Error::Parse {
                    file: captions_path.display().to_string(),
                    msg: format!("sample {id:?} has no image or video frames"),
                });
            }
            frames
        };
        samples.push(Sample {
            id: id.to_string(),
            frames,
            caption: caption.to_string(),
        });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let vocab_path = dir.join("vocab.txt");
    let vocab = std::fs::read_to_string(&vocab_path)
        .map_err(|e| Error::io(&vocab_path, e))?
        .lines()
        .map(str::to_string)
        .collect();
    Ok(Corpus { samples, vocab })
}
