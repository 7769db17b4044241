//! Synthetic vision-language data: grayscale shapes on a 4x4 cell grid with
//! templated captions and closed-set questions.
//!
//! The caption grammar is invertible by construction (shape, size, intensity,
//! cell per placement, placements in cell order, PAD-filled), which makes
//! supervision checkable: a caption can always be parsed back and re-rendered
//! to the exact image it describes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SdictError};
use crate::matrix::RMatrix;

pub const GRID: usize = 4;
pub const CAPTION_LEN: usize = 8;
pub const TEXT_LEN: usize = 12;
pub const NUM_ANSWERS: usize = 6;

pub const PAD: usize = 0;

const SHAPE_WORDS: [&str; 3] = ["square", "circle", "triangle"];
const SIZE_WORDS: [&str; 3] = ["small", "medium", "large"];
const INTENSITY_WORDS: [&str; 3] = ["dim", "half", "bright"];
const QUESTION_WORDS: [&str; 2] = ["count", "what"];

pub const ANSWER_WORDS: [&str; NUM_ANSWERS] =
    ["zero", "one", "two", "square", "circle", "triangle"];

const INTENSITY_VALUES: [f64; 3] = [0.3, 0.6, 0.9];

/// PAD, 3 shapes, 3 sizes, 3 intensities, 16 cells, 2 question words.
pub fn vocab() -> Vec<String> {
    let mut v = vec!["PAD".to_string()];
    v.extend(SHAPE_WORDS.iter().map(|s| s.to_string()));
    v.extend(SIZE_WORDS.iter().map(|s| s.to_string()));
    v.extend(INTENSITY_WORDS.iter().map(|s| s.to_string()));
    for r in 0..GRID {
        for c in 0..GRID {
            v.push(format!("r{r}c{c}"));
        }
    }
    v.extend(QUESTION_WORDS.iter().map(|s| s.to_string()));
    v
}

pub fn vocab_len() -> usize {
    1 + 3 + 3 + 3 + GRID * GRID + 2
}

const SHAPE_BASE: usize = 1;
const SIZE_BASE: usize = 4;
const INTENSITY_BASE: usize = 7;
const CELL_BASE: usize = 10;
const COUNT_TOK: usize = CELL_BASE + GRID * GRID;
const WHAT_TOK: usize = COUNT_TOK + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn index(self) -> usize {
        match self {
            Shape::Square => 0,
            Shape::Circle => 1,
            Shape::Triangle => 2,
        }
    }

    fn from_index(i: usize) -> Shape {
        [Shape::Square, Shape::Circle, Shape::Triangle][i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub shape: Shape,
    /// 0 small, 1 medium, 2 large.
    pub size: usize,
    /// 0 dim, 1 half, 2 bright.
    pub intensity: usize,
    /// Row-major cell index on the 4x4 grid.
    pub cell: usize,
}

pub type SceneSpec = Vec<Placement>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    /// How many of this shape are present? Answer ids 0..3 spell 0, 1, 2.
    Count(Shape),
    /// Which shape sits in this cell? Answer ids 3..6 name the shape.
    WhatAt(usize),
}

#[derive(Clone, Debug)]
pub struct Example {
    pub pixels: RMatrix,
    pub caption_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
    pub answer_id: usize,
    pub spec: SceneSpec,
}

/// Shapes sit at cell centers; half-sizes 1.5, 2.5, 3.5 px on the reference
/// 8 px cell scale proportionally with the image.
pub fn render(spec: &SceneSpec, image_side: usize) -> RMatrix {
    assert_eq!(image_side % GRID, 0, "image side must fit the cell grid");
    let cell_px = image_side / GRID;
    let scale = cell_px as f64 / 8.0;
    let mut img = RMatrix::zeros(image_side, image_side);
    for p in spec {
        let (cr, cc) = (p.cell / GRID, p.cell % GRID);
        let cy = (cr * cell_px) as f64 + (cell_px as f64 - 1.0) / 2.0;
        let cx = (cc * cell_px) as f64 + (cell_px as f64 - 1.0) / 2.0;
        let h = (1.5 + p.size as f64) * scale;
        let v = INTENSITY_VALUES[p.intensity];
        for y in 0..image_side {
            for x in 0..image_side {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let inside = match p.shape {
                    Shape::Square => dx.abs() <= h && dy.abs() <= h,
                    Shape::Circle => dx * dx + dy * dy <= h * h,
                    // Upward triangle: apex at (cx, cy-h), base at cy+h.
                    Shape::Triangle => {
                        dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0
                    }
                };
                if inside {
                    *img.at_mut(y, x) = v;
                }
            }
        }
    }
    img
}

/// [shape, size, intensity, cell] per placement in cell order, PAD-filled.
pub fn make_caption(spec: &SceneSpec) -> Vec<usize> {
    let mut sorted = spec.clone();
    sorted.sort_by_key(|p| p.cell);
    let mut ids = Vec::with_capacity(CAPTION_LEN);
    for p in &sorted {
        ids.push(SHAPE_BASE + p.shape.index());
        ids.push(SIZE_BASE + p.size);
        ids.push(INTENSITY_BASE + p.intensity);
        ids.push(CELL_BASE + p.cell);
    }
    ids.resize(CAPTION_LEN, PAD);
    ids
}

/// Inverse of `make_caption`; errors name the offending token.
pub fn parse_caption(ids: &[usize]) -> Result<SceneSpec> {
    if ids.len() != CAPTION_LEN {
        return Err(SdictError::Config(format!(
            "caption must have {CAPTION_LEN} tokens, got {}",
            ids.len()
        )));
    }
    let mut spec = SceneSpec::new();
    for quad in ids.chunks_exact(4) {
        if quad.iter().all(|&t| t == PAD) {
            continue;
        }
        let field = |tok: usize, base: usize, n: usize, what: &str| {
            if (base..base + n).contains(&tok) {
                Ok(tok - base)
            } else {
                Err(SdictError::Config(format!("token {tok} is not a {what}")))
            }
        };
        spec.push(Placement {
            shape: Shape::from_index(field(quad[0], SHAPE_BASE, 3, "shape")?),
            size: field(quad[1], SIZE_BASE, 3, "size")?,
            intensity: field(quad[2], INTENSITY_BASE, 3, "intensity")?,
            cell: field(quad[3], CELL_BASE, GRID * GRID, "cell")?,
        });
    }
    Ok(spec)
}

pub fn make_question(q: Question) -> Vec<usize> {
    let mut ids = vec![PAD; TEXT_LEN];
    match q {
        Question::Count(s) => {
            ids[0] = COUNT_TOK;
            ids[1] = SHAPE_BASE + s.index();
        }
        Question::WhatAt(cell) => {
            ids[0] = WHAT_TOK;
            ids[1] = CELL_BASE + cell;
        }
    }
    ids
}

pub fn answer_for(spec: &SceneSpec, q: Question) -> usize {
    match q {
        Question::Count(s) => spec.iter().filter(|p| p.shape == s).count(),
        Question::WhatAt(cell) => {
            let p = spec
                .iter()
                .find(|p| p.cell == cell)
                .expect("what-at questions target occupied cells");
            3 + p.shape.index()
        }
    }
}

/// Deterministic synthetic dataset: 1 or 2 shapes in distinct cells, 60/40
/// count vs what-at questions.
pub fn gen_dataset(seed: u64, n: usize, image_side: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let count = 1 + rng.gen_range(0..2usize);
        let mut cells = Vec::with_capacity(count);
        while cells.len() < count {
            let c = rng.gen_range(0..GRID * GRID);
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        let spec: SceneSpec = cells
            .iter()
            .map(|&cell| Placement {
                shape: Shape::from_index(rng.gen_range(0..3)),
                size: rng.gen_range(0..3),
                intensity: rng.gen_range(0..3),
                cell,
            })
            .collect();
        let q = if rng.gen_range(0..10) < 6 {
            Question::Count(Shape::from_index(rng.gen_range(0..3)))
        } else {
            let pick = rng.gen_range(0..spec.len());
            Question::WhatAt(spec[pick].cell)
        };
        out.push(Example {
            pixels: render(&spec, image_side),
            caption_ids: make_caption(&spec),
            question_ids: make_question(q),
            answer_id: answer_for(&spec, q),
            spec,
        });
    }
    out
}

const CACHE_MAGIC: &[u8; 4] = b"SDS1";

/// Flat binary cache plus a JSON manifest describing it.
pub fn write_cache(path: &std::path::Path, examples: &[Example]) -> Result<()> {
    use std::io::Write;
    let side = examples.first().map_or(0, |e| e.pixels.rows);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(side as u32).to_le_bytes());
    buf.extend_from_slice(&(CAPTION_LEN as u32).to_le_bytes());
    buf.extend_from_slice(&(TEXT_LEN as u32).to_le_bytes());
    for e in examples {
        if e.pixels.rows != side || e.pixels.cols != side {
            return Err(SdictError::Config("mixed image sides in one cache".into()));
        }
        for &p in &e.pixels.data {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for &t in &e.caption_ids {
            buf.extend_from_slice(&(t as u16).to_le_bytes());
        }
        for &t in &e.question_ids {
            buf.extend_from_slice(&(t as u16).to_le_bytes());
        }
        buf.extend_from_slice(&(e.answer_id as u16).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;

    let manifest = serde_json::json!({
        "format": "SDS1",
        "examples": examples.len(),
        "image_side": side,
        "caption_len": CAPTION_LEN,
        "text_len": TEXT_LEN,
        "vocab": vocab(),
        "answers": ANSWER_WORDS,
    });
    let mpath = path.with_extension("json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

pub fn read_cache(path: &std::path::Path) -> Result<Vec<Example>> {
    let buf = std::fs::read(path)?;
    let fail = |m: &str| SdictError::Config(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[0..4] != CACHE_MAGIC {
        return Err(fail("not an SDS1 cache"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    let n = u32_at(4);
    let side = u32_at(8);
    if u32_at(12) != CAPTION_LEN || u32_at(16) != TEXT_LEN {
        return Err(fail("caption/question lengths disagree with this build"));
    }
    let per = side * side * 8 + (CAPTION_LEN + TEXT_LEN + 1) * 2;
    if buf.len() != 20 + n * per {
        return Err(fail("truncated cache"));
    }
    let mut out = Vec::with_capacity(n);
    let mut o = 20;
    for _ in 0..n {
        let mut pixels = RMatrix::zeros(side, side);
        for p in pixels.data.iter_mut() {
            *p = f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
            o += 8;
        }
        let read_ids = |len: usize, o: &mut usize| {
            let mut ids = Vec::with_capacity(len);
            for _ in 0..len {
                ids.push(u16::from_le_bytes(buf[*o..*o + 2].try_into().unwrap()) as usize);
                *o += 2;
            }
            ids
        };
        let caption_ids = read_ids(CAPTION_LEN, &mut o);
        let question_ids = read_ids(TEXT_LEN, &mut o);
        let answer_id = u16::from_le_bytes(buf[o..o + 2].try_into().unwrap()) as usize;
        o += 2;
        let spec = parse_caption(&caption_ids)?;
        out.push(Example { pixels, caption_ids, question_ids, answer_id, spec });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_consistent() {
        let v = vocab();
        assert_eq!(v.len(), vocab_len());
        assert_eq!(v[PAD], "PAD");
        assert_eq!(v[SHAPE_BASE], "square");
        assert_eq!(v[CELL_BASE], "r0c0");
        assert_eq!(v[CELL_BASE + 5], "r1c1");
        assert_eq!(v[COUNT_TOK], "count");
        assert_eq!(v[WHAT_TOK], "what");
        // No duplicates.
        let mut sorted = v.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), v.len());
    }

    #[test]
    fn largest_square_fills_its_cell_exactly() {
        let spec = vec![Placement { shape: Shape::Square, size: 2, intensity: 2, cell: 0 }];
        let img = render(&spec, 32);
        for y in 0..32 {
            for x in 0..32 {
                let want = if y < 8 && x < 8 { 0.9 } else { 0.0 };
                assert_eq!(img.at(y, x), want, "({y},{x})");
            }
        }
    }

    #[test]
    fn shapes_are_distinguishable_and_bounded() {
        // Same cell and size: circle strictly inside square, triangle half
        // the square's area (within pixelation), all values in [0,1].
        let mk = |shape| vec![Placement { shape, size: 2, intensity: 2, cell: 5 }];
        let sq = render(&mk(Shape::Square), 32);
        let ci = render(&mk(Shape::Circle), 32);
        let tr = render(&mk(Shape::Triangle), 32);
        let area = |m: &RMatrix| m.data.iter().filter(|&&v| v > 0.0).count();
        assert!(area(&ci) < area(&sq));
        assert!(area(&tr) < area(&sq));
        assert!(area(&ci) > 0 && area(&tr) > 0);
        for m in [&sq, &ci, &tr] {
            assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Shape confined to its cell.
            for y in 0..32 {
                for x in 0..32 {
                    if m.at(y, x) > 0.0 {
                        assert!((8..16).contains(&y) && (8..16).contains(&x));
                    }
                }
            }
        }
    }

    #[test]
    fn caption_roundtrips_and_renders_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 1 + rng.gen_range(0..2usize);
            let mut cells: Vec<usize> = Vec::new();
            while cells.len() < n {
                let c = rng.gen_range(0..16);
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
            let spec: SceneSpec = cells
                .iter()
                .map(|&cell| Placement {
                    shape: Shape::from_index(rng.gen_range(0..3)),
                    size: rng.gen_range(0..3),
                    intensity: rng.gen_range(0..3),
                    cell,
                })
                .collect();
            let caption = make_caption(&spec);
            assert_eq!(caption.len(), CAPTION_LEN);
            let parsed = parse_caption(&caption).unwrap();
            let mut want = spec.clone();
            want.sort_by_key(|p| p.cell);
            assert_eq!(parsed, want);
            // The parse describes the same image.
            assert_eq!(render(&parsed, 32), render(&spec, 32));
        }
    }

    #[test]
    fn parse_rejects_misplaced_tokens() {
        let mut ids = vec![PAD; CAPTION_LEN];
        ids[0] = SIZE_BASE; // a size word where a shape belongs
        ids[1] = SIZE_BASE;
        ids[2] = INTENSITY_BASE;
        ids[3] = CELL_BASE;
        assert!(parse_caption(&ids).is_err());
        assert!(parse_caption(&[PAD; 3]).is_err(), "wrong length");
    }

    #[test]
    fn generator_is_deterministic_and_self_consistent() {
        let a = gen_dataset(31337, 64, 32);
        let b = gen_dataset(31337, 64, 32);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.caption_ids, y.caption_ids);
            assert_eq!(x.question_ids, y.question_ids);
            assert_eq!(x.answer_id, y.answer_id);
        }
        let c = gen_dataset(31338, 64, 32);
        assert!(a.iter().zip(&c).any(|(x, y)| x.caption_ids != y.caption_ids));

        let mut count_qs = 0;
        for e in &a {
            assert!(e.answer_id < NUM_ANSWERS);
            assert!(e.caption_ids.iter().all(|&t| t < vocab_len()));
            assert!(e.question_ids.iter().all(|&t| t < vocab_len()));
            // Reparse the caption and check the answer against the scene.
            let spec = parse_caption(&e.caption_ids).unwrap();
            if e.question_ids[0] == COUNT_TOK {
                count_qs += 1;
                let shape = Shape::from_index(e.question_ids[1] - SHAPE_BASE);
                let n = spec.iter().filter(|p| p.shape == shape).count();
                assert_eq!(e.answer_id, n, "count answer disagrees with scene");
            } else {
                assert_eq!(e.question_ids[0], WHAT_TOK);
                let cell = e.question_ids[1] - CELL_BASE;
                let p = spec.iter().find(|p| p.cell == cell).unwrap();
                assert_eq!(e.answer_id, 3 + p.shape.index());
            }
        }
        assert!(count_qs > 20 && count_qs < 60, "question mix off: {count_qs}/64");
    }

    #[test]
    fn cache_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sds1");
        let examples = gen_dataset(7, 12, 32);
        write_cache(&path, &examples).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back.len(), examples.len());
        for (x, y) in examples.iter().zip(&back) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.caption_ids, y.caption_ids);
            assert_eq!(x.question_ids, y.question_ids);
            assert_eq!(x.answer_id, y.answer_id);
        }
        assert!(path.with_extension("json").exists());

        // Corrupt the magic and expect a refusal.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_cache(&path).is_err());
    }
}
