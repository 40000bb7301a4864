//! Synthetic grid-world VQA task.
//!
//! A scene places 1 to 6 coloured shapes on distinct cells of a 4×4 grid.
//! Each cell renders as an 8×8 patch of a 32×32 RGB image. Questions come
//! from four templates (colour of a shape, shape of a colour, count of a
//! colour, existence of a coloured shape), so answering needs both the
//! question and the image.
//!
//! Sample `i` of a corpus is a pure function of `(seed, i)`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::format::{crc32, frame, read_file, unframe, write_file, Header};
use crate::par;
use crate::tensor::Rng;

pub const GRID: usize = 4;
pub const CELL: usize = 8;
pub const IMAGE_SIZE: usize = GRID * CELL;
pub const IMAGE_LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;
pub const MAX_TOKENS: usize = 8;
pub const MAX_OBJECTS: usize = 6;
pub const MAX_COUNT: usize = 3;
pub const BACKGROUND: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

    pub fn word(self) -> &'static str {
        ["square", "disc", "triangle"][self as usize]
    }

    /// Whether local patch pixel `(y, x)` is covered.
    pub fn covers(self, y: usize, x: usize) -> bool {
        match self {
            Shape::Square => (1..7).contains(&y) && (1..7).contains(&x),
            Shape::Disc => {
                let (dy, dx) = (y as i64 - 4, x as i64 - 4);
                dy * dy + dx * dx <= 9
            }
            Shape::Triangle => (1..7).contains(&y) && (1..7).contains(&x) && x <= y,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        ["red", "green", "blue", "yellow"][self as usize]
    }

    /// Lit RGB channels.
    pub fn channels(self) -> [bool; 3] {
        match self {
            Color::Red => [true, false, false],
            Color::Green => [false, true, false],
            Color::Blue => [false, false, true],
            Color::Yellow => [true, true, false],
        }
    }
}

/// Question words and answers, both in fixed order. Word 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub words: Vec<String>,
    pub answers: Vec<String>,
}

const WORDS: [&str; 19] = [
    "<pad>", "what", "color", "shape", "is", "the", "thing", "how", "many", "things", "there", "a", "square", "disc",
    "triangle", "red", "green", "blue", "yellow",
];

const ANSWERS: [&str; 13] = [
    "red", "green", "blue", "yellow", "square", "disc", "triangle", "0", "1", "2", "3", "yes", "no",
];

impl Default for Vocab {
    fn default() -> Self {
        Self {
            words: WORDS.iter().map(|s| s.to_string()).collect(),
            answers: ANSWERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Vocab {
    pub fn word(&self, w: &str) -> usize {
        self.words
            .iter()
            .position(|x| x == w)
            .unwrap_or_else(|| panic!("word {w:?} not in vocabulary"))
    }

    pub fn answer(&self, a: &str) -> usize {
        self.answers
            .iter()
            .position(|x| x == a)
            .unwrap_or_else(|| panic!("answer {a:?} not in answer list"))
    }

    pub fn render(&self, tokens: &[u16]) -> String {
        tokens
            .iter()
            .map(|&t| self.words.get(t as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// CRC-32 of `"vocab=" + words.join(",") + "\nanswers=" + answers.join(",")`.
    pub fn checksum(&self) -> u32 {
        crc32(self.lines().as_bytes())
    }

    fn lines(&self) -> String {
        format!("vocab={}\nanswers={}", self.words.join(","), self.answers.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
}

/// Row-major 4×4 grid of optional objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub cells: [Option<Object>; GRID * GRID],
}

impl SceneSpec {
    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|o| (i, o)))
    }

    pub fn count_where(&self, f: impl Fn(&Object) -> bool) -> usize {
        self.objects().filter(|(_, o)| f(o)).count()
    }

    /// The only cell holding an object satisfying `f`, if exactly one does.
    pub fn unique(&self, f: impl Fn(&Object) -> bool) -> Option<(usize, Object)> {
        let mut it = self.objects().filter(|(_, o)| f(o));
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }
}

/// Uniform count in `1..=6`, uniform distinct cells, uniform shapes and
/// colours.
pub fn generate_scene(rng: &mut Rng) -> SceneSpec {
    let n = 1 + rng.below(MAX_OBJECTS);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    rng.shuffle(&mut cells);
    let mut scene = SceneSpec {
        cells: [None; GRID * GRID],
    };
    for &c in &cells[..n] {
        scene.cells[c] = Some(Object {
            shape: Shape::ALL[rng.below(3)],
            color: Color::ALL[rng.below(4)],
        });
    }
    scene
}

/// `[3, 32, 32]` channel-major pixels in `[0, 1]`.
pub fn render_image(scene: &SceneSpec) -> Vec<f32> {
    let mut img = vec![BACKGROUND; IMAGE_LEN];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for (cell, obj) in scene.objects() {
        let (r0, c0) = (cell / GRID * CELL, cell % GRID * CELL);
        let lit = obj.color.channels();
        for y in 0..CELL {
            for x in 0..CELL {
                if obj.shape.covers(y, x) {
                    let p = (r0 + y) * IMAGE_SIZE + c0 + x;
                    for (ch, &on) in lit.iter().enumerate() {
                        if on {
                            img[ch * plane + p] = 1.0;
                        }
                    }
                }
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Color,
    Shape,
    Count,
    Exist,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Color, Family::Shape, Family::Count, Family::Exist];

    pub fn name(self) -> &'static str {
        ["color", "shape", "count", "exist"][self as usize]
    }
}

/// A parsed question template instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    ColorOf(Shape),
    ShapeOf(Color),
    Count(Color),
    Exist(Color, Shape),
}

impl Question {
    pub fn family(self) -> Family {
        match self {
            Question::ColorOf(_) => Family::Color,
            Question::ShapeOf(_) => Family::Shape,
            Question::Count(_) => Family::Count,
            Question::Exist(..) => Family::Exist,
        }
    }

    pub fn words(self) -> Vec<&'static str> {
        match self {
            Question::ColorOf(s) => vec!["what", "color", "is", "the", s.word()],
            Question::ShapeOf(c) => vec!["what", "shape", "is", "the", c.word(), "thing"],
            Question::Count(c) => vec!["how", "many", c.word(), "things"],
            Question::Exist(c, s) => vec!["is", "there", "a", c.word(), s.word()],
        }
    }

    pub fn tokens(self, vocab: &Vocab) -> Vec<u16> {
        self.words().into_iter().map(|w| vocab.word(w) as u16).collect()
    }

    /// Recovers the template from tokens of the default vocabulary.
    pub fn parse(tokens: &[u16], vocab: &Vocab) -> Option<Self> {
        let words: Vec<&str> = tokens
            .iter()
            .map(|&t| vocab.words.get(t as usize).map(String::as_str))
            .collect::<Option<_>>()?;
        let shape = |w: &str| Shape::ALL.into_iter().find(|s| s.word() == w);
        let color = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w);
        match words.as_slice() {
            ["what", "color", "is", "the", s] => Some(Question::ColorOf(shape(s)?)),
            ["what", "shape", "is", "the", c, "thing"] => Some(Question::ShapeOf(color(c)?)),
            ["how", "many", c, "things"] => Some(Question::Count(color(c)?)),
            ["is", "there", "a", c, s] => Some(Question::Exist(color(c)?, shape(s)?)),
            _ => None,
        }
    }

    /// The answer string, or `None` when the template does not apply.
    pub fn answer(self, scene: &SceneSpec) -> Option<String> {
        match self {
            Question::ColorOf(s) => scene.unique(|o| o.shape == s).map(|(_, o)| o.color.word().to_string()),
            Question::ShapeOf(c) => scene.unique(|o| o.color == c).map(|(_, o)| o.shape.word().to_string()),
            Question::Count(c) => {
                let n = scene.count_where(|o| o.color == c);
                (n <= MAX_COUNT).then(|| n.to_string())
            }
            Question::Exist(c, s) => {
                let yes = scene.count_where(|o| o.color == c && o.shape == s) > 0;
                Some(if yes { "yes" } else { "no" }.to_string())
            }
        }
    }

    /// Cell of the object the question refers to, for single-object
    /// templates.
    pub fn referent(self, scene: &SceneSpec) -> Option<usize> {
        match self {
            Question::ColorOf(s) => scene.unique(|o| o.shape == s).map(|(c, _)| c),
            Question::ShapeOf(c) => scene.unique(|o| o.color == c).map(|(c, _)| c),
            _ => None,
        }
    }
}

fn draw_question(rng: &mut Rng) -> Question {
    let shape = |rng: &mut Rng| Shape::ALL[rng.below(3)];
    let color = |rng: &mut Rng| Color::ALL[rng.below(4)];
    match rng.below(4) {
        0 => Question::ColorOf(shape(rng)),
        1 => Question::ShapeOf(color(rng)),
        2 => Question::Count(color(rng)),
        _ => {
            let c = color(rng);
            Question::Exist(c, shape(rng))
        }
    }
}

/// Scene retries per template before a fresh template is drawn.
const RETRIES: usize = 100;

/// Draws a template uniformly, then scenes until the template applies.
/// Existence questions first flip a fair coin for the answer and keep only
/// scenes that agree, so yes and no are balanced.
pub fn generate_question(rng: &mut Rng) -> (SceneSpec, Question, String) {
    loop {
        let q = draw_question(rng);
        let want = match q {
            Question::Exist(..) => Some(if rng.coin() { "yes" } else { "no" }),
            _ => None,
        };
        for _ in 0..RETRIES {
            let scene = generate_scene(rng);
            if let Some(a) = q.answer(&scene) {
                if want.is_none_or(|w| w == a) {
                    return (scene, q, a);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, 32, 32]`.
    pub image: Vec<f32>,
    pub tokens: Vec<u16>,
    pub answer: u16,
}

/// A sample with the scene and template it came from.
#[derive(Clone, Debug)]
pub struct Example {
    pub sample: Sample,
    pub scene: SceneSpec,
    pub question: Question,
}

pub fn generate_example(vocab: &Vocab, seed: u64, index: usize) -> Example {
    let mut rng = Rng::for_stream(seed, index as u64);
    let (scene, question, answer) = generate_question(&mut rng);
    Example {
        sample: Sample {
            image: render_image(&scene),
            tokens: question.tokens(vocab),
            answer: vocab.answer(&answer) as u16,
        },
        scene,
        question,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

const MAGIC: &[u8; 4] = b"QVD1";
const VERSION: u32 = 1;

impl Dataset {
    /// Samples `0..count` of the corpus for `seed`, generated in parallel.
    pub fn generate(seed: u64, count: usize) -> Self {
        let vocab = Vocab::default();
        let samples = par::map_range(count, |i| generate_example(&vocab, seed, i).sample);
        Self { vocab, seed, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn family(&self, i: usize) -> Option<Family> {
        Question::parse(&self.samples[i].tokens, &self.vocab).map(Question::family)
    }

    fn sample_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * (IMAGE_LEN * 4 + 20));
        for s in &self.samples {
            for v in &s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(s.tokens.len() as u8);
            for t in &s.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
            out.extend_from_slice(&s.answer.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.sample_bytes();
        let mut h = Header::default();
        h.push("version", VERSION);
        h.push("vocab", self.vocab.words.join(","));
        h.push("answers", self.vocab.answers.join(","));
        h.push("vocab_crc32", format!("{:08x}", self.vocab.checksum()));
        h.push("count", self.samples.len());
        h.push("image_shape", format!("3x{IMAGE_SIZE}x{IMAGE_SIZE}"));
        h.push("seed", self.seed);
        h.push("samples_crc32", format!("{:08x}", crc32(&body)));
        frame(MAGIC, &h.render(), &body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (text, body) = unframe(MAGIC, bytes)?;
        let h = Header::parse(text)?;
        let version: u32 = h.parse_value("version")?;
        if version != VERSION {
            return Err(FormatError::Header(format!("unsupported version {version}")));
        }
        let vocab = Vocab {
            words: h.get("vocab")?.split(',').map(str::to_string).collect(),
            answers: h.get("answers")?.split(',').map(str::to_string).collect(),
        };
        let expected = h.parse_hex("vocab_crc32")?;
        if vocab.checksum() != expected {
            return Err(FormatError::Checksum {
                what: "vocabulary".into(),
                expected,
                computed: vocab.checksum(),
            });
        }
        let shape = h.get("image_shape")?;
        if shape != format!("3x{IMAGE_SIZE}x{IMAGE_SIZE}") {
            return Err(FormatError::Header(format!("unsupported image shape {shape}")));
        }
        let count: usize = h.parse_value("count")?;
        let seed: u64 = h.parse_value("seed")?;
        let expected = h.parse_hex("samples_crc32")?;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize, i: usize| -> Result<&[u8], FormatError> {
            let end = *pos + n;
            if end > body.len() {
                return Err(FormatError::Truncated(format!("sample record {i}")));
            }
            let s = &body[*pos..end];
            *pos = end;
            Ok(s)
        };
        for i in 0..count {
            let image = take(&mut pos, IMAGE_LEN * 4, i)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let n = take(&mut pos, 1, i)?[0] as usize;
            let tokens: Vec<u16> = take(&mut pos, 2 * n, i)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            let a = take(&mut pos, 2, i)?;
            let answer = u16::from_le_bytes([a[0], a[1]]);
            samples.push(Sample { image, tokens, answer });
        }
        if pos != body.len() {
            return Err(FormatError::Header(format!(
                "{} trailing bytes after {count} samples",
                body.len() - pos
            )));
        }
        // Integrity before contents, so a flipped bit reads as corruption.
        let computed = crc32(body);
        if computed != expected {
            return Err(FormatError::Checksum {
                what: "samples".into(),
                expected,
                computed,
            });
        }
        for (i, s) in samples.iter().enumerate() {
            if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= vocab.words.len()) {
                return Err(FormatError::IndexOverflow(format!(
                    "sample {i}: token {t} >= {}",
                    vocab.words.len()
                )));
            }
            if s.answer as usize >= vocab.answers.len() {
                return Err(FormatError::IndexOverflow(format!(
                    "sample {i}: answer {} >= {}",
                    s.answer,
                    vocab.answers.len()
                )));
            }
        }
        Ok(Self { vocab, seed, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(Error::from)
    }

    /// Answer counts in answer-list order.
    pub fn answer_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.vocab.answers.len()];
        for s in &self.samples {
            h[s.answer as usize] += 1;
        }
        h
    }

    /// Best accuracy any question-only predictor can reach on this set:
    /// the share of samples carrying their question string's most common
    /// answer.
    pub fn blind_optimal_accuracy(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let mut counts: HashMap<&[u16], HashMap<u16, usize>> = HashMap::new();
        for s in &self.samples {
            *counts.entry(&s.tokens).or_default().entry(s.answer).or_default() += 1;
        }
        let hits: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
        hits as f64 / self.samples.len() as f64
    }

    /// Share of the most common answer.
    pub fn majority_accuracy(&self) -> f64 {
        let h = self.answer_histogram();
        h.iter().copied().max().unwrap_or(0) as f64 / self.samples.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(shape: Shape, color: Color, cell: usize) -> SceneSpec {
        let mut s = SceneSpec { cells: [None; 16] };
        s.cells[cell] = Some(Object { shape, color });
        s
    }

    fn lit_pixels(img: &[f32], pattern: [f32; 3]) -> usize {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        (0..plane)
            .filter(|&p| (0..3).all(|c| img[c * plane + p] == pattern[c]))
            .count()
    }

    #[test]
    fn raster_pixel_counts() {
        let red = [1.0, BACKGROUND, BACKGROUND];
        assert_eq!(
            lit_pixels(&render_image(&single(Shape::Square, Color::Red, 5)), red),
            36
        );
        assert_eq!(lit_pixels(&render_image(&single(Shape::Disc, Color::Red, 0)), red), 29);
        assert_eq!(
            lit_pixels(&render_image(&single(Shape::Triangle, Color::Red, 15)), red),
            21
        );
        let yellow = render_image(&single(Shape::Square, Color::Yellow, 3));
        assert_eq!(lit_pixels(&yellow, [1.0, 1.0, BACKGROUND]), 36);
    }

    #[test]
    fn background_patch_is_uniform() {
        let img = render_image(&single(Shape::Disc, Color::Blue, 0));
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for c in 0..3 {
            for y in 8..16 {
                for x in 8..16 {
                    assert_eq!(img[c * plane + y * IMAGE_SIZE + x], BACKGROUND);
                }
            }
        }
    }

    #[test]
    fn scenes_are_seeded_and_bounded() {
        let a = generate_scene(&mut Rng::new(3));
        assert_eq!(a, generate_scene(&mut Rng::new(3)));
        let mut rng = Rng::new(4);
        for _ in 0..1000 {
            let n = generate_scene(&mut rng).objects().count();
            assert!((1..=MAX_OBJECTS).contains(&n));
        }
    }

    #[test]
    fn shape_frequencies_are_uniform() {
        let mut rng = Rng::new(5);
        let mut counts = [0usize; 3];
        let mut total = 0;
        for _ in 0..10_000 {
            for (_, o) in generate_scene(&mut rng).objects() {
                counts[o.shape as usize] += 1;
                total += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / total as f64 - 1.0 / 3.0).abs() < 0.03);
        }
    }

    #[test]
    fn template_answers() {
        let s = single(Shape::Square, Color::Red, 2);
        assert_eq!(Question::ColorOf(Shape::Square).answer(&s).unwrap(), "red");
        assert_eq!(Question::ColorOf(Shape::Disc).answer(&s), None);
        let mut two = single(Shape::Disc, Color::Green, 0);
        two.cells[9] = Some(Object {
            shape: Shape::Triangle,
            color: Color::Green,
        });
        assert_eq!(Question::Count(Color::Green).answer(&two).unwrap(), "2");
        assert_eq!(Question::ShapeOf(Color::Green).answer(&two), None);
        assert_eq!(Question::Exist(Color::Green, Shape::Disc).answer(&two).unwrap(), "yes");
        assert_eq!(Question::Exist(Color::Red, Shape::Disc).answer(&two).unwrap(), "no");
    }

    #[test]
    fn question_tokens_round_trip() {
        let v = Vocab::default();
        for q in [
            Question::ColorOf(Shape::Triangle),
            Question::ShapeOf(Color::Yellow),
            Question::Count(Color::Blue),
            Question::Exist(Color::Red, Shape::Disc),
        ] {
            let t = q.tokens(&v);
            assert!(t.len() <= MAX_TOKENS && t.iter().all(|&x| x != 0));
            assert_eq!(Question::parse(&t, &v), Some(q));
        }
    }

    #[test]
    fn generation_is_a_function_of_seed_and_index() {
        let v = Vocab::default();
        let a = generate_example(&v, 9, 17).sample;
        assert_eq!(a, generate_example(&v, 9, 17).sample);
        let d = Dataset::generate(9, 20);
        assert_eq!(d.samples[17], a);
        let seq = par::sequential(|| Dataset::generate(9, 20));
        assert_eq!(d, seq);
    }

    #[test]
    fn answers_are_consistent_with_scenes() {
        let v = Vocab::default();
        for i in 0..500 {
            let e = generate_example(&v, 1, i);
            assert_eq!(
                e.question.answer(&e.scene).map(|a| v.answer(&a) as u16),
                Some(e.sample.answer)
            );
            assert_eq!(e.sample.image, render_image(&e.scene));
        }
    }

    #[test]
    fn corpus_statistics() {
        let d = Dataset::generate(1, 10_000);
        assert!(d.majority_accuracy() < 0.40, "{}", d.majority_accuracy());
        assert!(d.blind_optimal_accuracy() < 0.60, "{}", d.blind_optimal_accuracy());
        let h = d.answer_histogram();
        let (yes, no) = (h[11] as f64, h[12] as f64);
        assert!((yes - no).abs() / (yes + no) < 0.05);
    }

    #[test]
    fn format_round_trip_and_errors() {
        let d = Dataset::generate(2, 100);
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(FormatError::Magic { .. })));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated(_))
        ));

        let hl = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[8..8 + hl]).unwrap();
        let permuted = text.replacen("answers=red,green", "answers=green,red", 1);
        assert_ne!(permuted, text);
        let mut p = bytes.clone();
        p[8..8 + hl].copy_from_slice(permuted.as_bytes());
        assert!(matches!(Dataset::from_bytes(&p), Err(FormatError::Checksum { .. })));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 100;
        flipped[last] ^= 1;
        assert!(matches!(
            Dataset::from_bytes(&flipped),
            Err(FormatError::Checksum { .. })
        ));
    }

    #[test]
    fn out_of_range_answer_is_index_overflow() {
        let mut d = Dataset::generate(3, 2);
        d.samples[1].answer = 13;
        assert!(matches!(
            Dataset::from_bytes(&d.to_bytes()),
            Err(FormatError::IndexOverflow(_))
        ));
    }
}
