//! Deterministic synthetic corpus with known ground truth.
//!
//! Token map for the default world (`V = 66`):
//!
//! | ids        | meaning                                   |
//! |------------|-------------------------------------------|
//! | `0..16`    | image tokens, two per image class         |
//! | `16`       | ASK                                       |
//! | `17..21`   | question tokens                           |
//! | `21..53`   | answer tokens, one per (question, class)  |
//! | `53`       | DRAW                                      |
//! | `54..58`   | caption tokens, one per latent class      |
//! | `58`       | EDIT                                      |
//! | `V-2, V-1` | MASK, EOS                                 |
//!
//! An understanding sample shows an image class `c` as `vis_len` image
//! tokens, asks question `q`, and is answered by token number `q * C + c`
//! repeated `len(c)` times, with `len` rising linearly from `min_answer` to
//! `max_answer` over the classes. A generation sample captions latent class
//! `g` and draws `lat_len` latent rows i.i.d. from `N(mu_g, sigma^2 I)`, with
//! the means evenly spaced on a circle so neighbours sit `separation` sigmas
//! apart. Interleaved samples chain turns; the latent of turn `i` is keyed by
//! the XOR of the caption classes of turns `0..=i`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::layout::{Modality, Role, Segment, SegmentLayout};
use crate::model::parse_kv_lines;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const CORPUS_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub vocab_size: usize,
    pub img_classes: usize,
    pub vis_len: usize,
    pub questions: usize,
    pub min_answer: usize,
    pub max_answer: usize,
    pub lat_classes: usize,
    pub d_lat: usize,
    pub lat_len: usize,
    pub sigma: f64,
    pub separation: f64,
    pub turns: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            vocab_size: 66,
            img_classes: 8,
            vis_len: 4,
            questions: 4,
            min_answer: 4,
            max_answer: 48,
            lat_classes: 4,
            d_lat: 2,
            lat_len: 4,
            sigma: 1.0,
            separation: 6.0,
            turns: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Und,
    Gen,
    Interleaved,
}

impl SampleKind {
    fn tag(self) -> u64 {
        match self {
            SampleKind::Und => 1,
            SampleKind::Gen => 2,
            SampleKind::Interleaved => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SampleKind::Und => "und",
            SampleKind::Gen => "gen",
            SampleKind::Interleaved => "interleaved",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "und" => Ok(SampleKind::Und),
            "gen" => Ok(SampleKind::Gen),
            "interleaved" => Ok(SampleKind::Interleaved),
            _ => Err(Error::Format(format!("unknown sample kind {s:?}"))),
        }
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub kind: SampleKind,
    pub layout: SegmentLayout,
    /// Ids of the discrete positions, in order.
    pub tokens: Vec<usize>,
    /// Latent rows, in order.
    pub latents: Tensor,
    /// Image class (understanding) or latent key of the final turn.
    pub class: usize,
    /// Question id of an understanding sample.
    pub question: Option<usize>,
}

impl Sample {
    /// Discrete positions before the response.
    pub fn prompt_tokens(&self) -> &[usize] {
        let n = self.response_len();
        &self.tokens[..self.tokens.len() - n]
    }

    pub fn response(&self) -> &[usize] {
        let n = self.response_len();
        &self.tokens[self.tokens.len() - n..]
    }

    fn response_len(&self) -> usize {
        self.layout
            .segments()
            .iter()
            .filter(|s| s.role == Role::Response)
            .map(|s| s.length)
            .sum()
    }

    /// Layout without the response segment.
    pub fn prompt_layout(&self) -> Result<SegmentLayout> {
        SegmentLayout::new(
            self.layout
                .segments()
                .iter()
                .filter(|s| s.role != Role::Response)
                .copied()
                .collect(),
        )
    }
}

impl WorldSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    pub fn vis_token(&self, class: usize, k: usize) -> usize {
        2 * class + k
    }

    pub fn ask(&self) -> usize {
        2 * self.img_classes
    }

    pub fn question_token(&self, q: usize) -> usize {
        self.ask() + 1 + q
    }

    pub fn answer_token(&self, class: usize, q: usize) -> usize {
        self.ask() + 1 + self.questions + q * self.img_classes + class
    }

    pub fn draw(&self) -> usize {
        self.ask() + 1 + self.questions + self.questions * self.img_classes
    }

    pub fn caption(&self, g: usize) -> usize {
        self.draw() + 1 + g
    }

    pub fn edit(&self) -> usize {
        self.draw() + 1 + self.lat_classes
    }

    pub fn answer_len(&self, class: usize) -> usize {
        let span = (self.max_answer - self.min_answer) as f64;
        let c = class as f64 / (self.img_classes - 1).max(1) as f64;
        self.min_answer + (span * c).round() as usize
    }

    /// Deterministic answer string for an image class and question.
    pub fn answer(&self, class: usize, q: usize) -> Vec<usize> {
        vec![self.answer_token(class, q); self.answer_len(class)]
    }

    /// Component mean of latent class `g`.
    pub fn latent_mean(&self, g: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.d_lat];
        let angle = std::f64::consts::TAU * g as f64 / self.lat_classes as f64;
        mu[0] = self.radius() * angle.cos();
        if self.d_lat > 1 {
            mu[1] = self.radius() * angle.sin();
        }
        mu
    }

    /// Circle radius that puts neighbouring means `separation` sigmas apart.
    pub fn radius(&self) -> f64 {
        let chord = self.separation * self.sigma;
        if self.lat_classes < 2 {
            return 0.0;
        }
        chord / (2.0 * (std::f64::consts::PI / self.lat_classes as f64).sin())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(contract(format!("world spec: {m}")));
        if self.img_classes == 0 || self.questions == 0 || self.lat_classes == 0 || self.vis_len == 0 {
            return fail("class and question counts must be positive");
        }
        if self.edit() >= self.vocab().content() {
            return fail("vocabulary too small for the token map");
        }
        if self.min_answer == 0 || self.max_answer < self.min_answer {
            return fail("answer length range is empty");
        }
        if !self.lat_classes.is_power_of_two() {
            return fail("latent class count must be a power of two");
        }
        if self.d_lat < 2 || self.lat_len == 0 || self.sigma <= 0.0 {
            return fail("latents need d_lat >= 2, positive length and sigma");
        }
        if self.turns == 0 {
            return fail("interleaved samples need at least one turn");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "img_classes={}", self.img_classes);
        let _ = writeln!(s, "vis_len={}", self.vis_len);
        let _ = writeln!(s, "questions={}", self.questions);
        let _ = writeln!(s, "min_answer={}", self.min_answer);
        let _ = writeln!(s, "max_answer={}", self.max_answer);
        let _ = writeln!(s, "lat_classes={}", self.lat_classes);
        let _ = writeln!(s, "d_lat={}", self.d_lat);
        let _ = writeln!(s, "lat_len={}", self.lat_len);
        let _ = writeln!(s, "sigma={:?}", self.sigma);
        let _ = writeln!(s, "separation={:?}", self.separation);
        let _ = writeln!(s, "turns={}", self.turns);
        s
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Format(format!("bad value {value:?} for {key}"));
        macro_rules! set {
            ($f:ident) => {
                self.$f = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "vocab_size" => set!(vocab_size),
            "img_classes" => set!(img_classes),
            "vis_len" => set!(vis_len),
            "questions" => set!(questions),
            "min_answer" => set!(min_answer),
            "max_answer" => set!(max_answer),
            "lat_classes" => set!(lat_classes),
            "d_lat" => set!(d_lat),
            "lat_len" => set!(lat_len),
            "sigma" => set!(sigma),
            "separation" => set!(separation),
            "turns" => set!(turns),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_kv_lines(text)? {
            if !spec.apply_kv(&k, &v)? {
                return Err(Error::Format(format!("unknown world key {k:?}")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn digest(&self) -> u64 {
        let d = Sha256::digest(self.to_kv().as_bytes());
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Generator seeded from (spec digest, seed, kind, index).
    pub fn sample_rng(&self, seed: u64, kind: SampleKind, index: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.digest().to_le_bytes());
        h.update(seed.to_le_bytes());
        h.update(kind.tag().to_le_bytes());
        h.update(index.to_le_bytes());
        let d = h.finalize();
        ChaCha8Rng::from_seed(d.into())
    }

    fn latent_rows(&self, g: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mu = self.latent_mean(g);
        let mut out = Vec::with_capacity(self.lat_len * self.d_lat);
        for _ in 0..self.lat_len {
            for m in &mu {
                let e: f64 = rng.sample(StandardNormal);
                out.push(m + self.sigma * e);
            }
        }
        out
    }
}

/// Image tokens, prompt and deterministic answer.
pub fn gen_und_sample(spec: &WorldSpec, rng: &mut impl Rng) -> Sample {
    let c = rng.gen_range(0..spec.img_classes);
    let q = rng.gen_range(0..spec.questions);
    und_sample_for(spec, c, q, rng)
}

/// Understanding sample with a chosen class and question.
pub fn und_sample_for(spec: &WorldSpec, c: usize, q: usize, rng: &mut impl Rng) -> Sample {
    let mut tokens: Vec<usize> = (0..spec.vis_len).map(|_| spec.vis_token(c, rng.gen_range(0..2))).collect();
    tokens.push(spec.ask());
    tokens.push(spec.question_token(q));
    let answer = spec.answer(c, q);
    let layout = SegmentLayout::new(vec![
        Segment::vis_enc(spec.vis_len),
        Segment::text_prompt(2),
        Segment::text_response(answer.len()),
    ])
    .expect("valid layout");
    tokens.extend(answer);
    Sample {
        kind: SampleKind::Und,
        layout,
        tokens,
        latents: Tensor::zeros(&[0, spec.d_lat]),
        class: c,
        question: Some(q),
    }
}

/// Caption prompt and latents drawn from the captioned component.
pub fn gen_gen_sample(spec: &WorldSpec, rng: &mut impl Rng) -> Sample {
    interleaved(spec, 1, rng)
}

/// Alternating prompt/latent turns; every turn's latent depends on all
/// preceding prompts.
pub fn gen_interleaved_sample(spec: &WorldSpec, rng: &mut impl Rng) -> Sample {
    interleaved(spec, spec.turns, rng)
}

fn interleaved(spec: &WorldSpec, turns: usize, rng: &mut impl Rng) -> Sample {
    let mut segs = Vec::new();
    let mut tokens = Vec::new();
    let mut latents = Vec::new();
    let mut key = 0;
    for turn in 0..turns {
        let g = rng.gen_range(0..spec.lat_classes);
        key ^= g;
        tokens.push(if turn == 0 { spec.draw() } else { spec.edit() });
        tokens.push(spec.caption(g));
        latents.extend(spec.latent_rows(key, rng));
        let role = if turn + 1 == turns { Role::Target } else { Role::Condition };
        segs.push(Segment::text_prompt(2).with_turn(turn));
        segs.push(Segment::new(Modality::VisLat, role, spec.lat_len).with_turn(turn));
    }
    Sample {
        kind: if turns == 1 { SampleKind::Gen } else { SampleKind::Interleaved },
        layout: SegmentLayout::new(segs).expect("valid layout"),
        tokens,
        latents: Tensor::new(vec![turns * spec.lat_len, spec.d_lat], latents).expect("sized rows"),
        class: key,
        question: None,
    }
}

/// Generation prompt for latent class `g`, with the latent rows left to the
/// sampler.
pub fn gen_prompt_for(spec: &WorldSpec, g: usize) -> (SegmentLayout, Vec<usize>) {
    let layout = SegmentLayout::new(vec![Segment::text_prompt(2), Segment::vis_lat(spec.lat_len)])
        .expect("valid layout")
        .with_last_active()
        .expect("non-empty");
    (layout, vec![spec.draw(), spec.caption(g)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: WorldSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// `counts` of understanding, generation and interleaved samples.
    pub fn generate(spec: &WorldSpec, seed: u64, counts: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let mut samples = Vec::with_capacity(counts.iter().sum());
        for (kind, &n) in [SampleKind::Und, SampleKind::Gen, SampleKind::Interleaved].iter().zip(&counts) {
            for i in 0..n {
                let mut rng = spec.sample_rng(seed, *kind, i as u64);
                samples.push(match kind {
                    SampleKind::Und => gen_und_sample(spec, &mut rng),
                    SampleKind::Gen => gen_gen_sample(spec, &mut rng),
                    SampleKind::Interleaved => gen_interleaved_sample(spec, &mut rng),
                });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            samples,
        })
    }

    pub fn of_kind(&self, kind: SampleKind) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.kind == kind)
    }

    pub fn count(&self, kind: SampleKind) -> usize {
        self.of_kind(kind).count()
    }

    /// Writes `manifest.txt`, `layouts.txt`, `tokens.txt` and `latents.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "format={CORPUS_FORMAT}");
        let _ = writeln!(manifest, "spec_digest={:016x}", self.spec.digest());
        let _ = writeln!(manifest, "seed={}", self.seed);
        for kind in [SampleKind::Und, SampleKind::Gen, SampleKind::Interleaved] {
            let _ = writeln!(manifest, "count.{}={}", kind.name(), self.count(kind));
        }
        for line in self.spec.to_kv().lines() {
            let _ = writeln!(manifest, "world.{line}");
        }
        let (mut layouts, mut tokens, mut latents) = (String::new(), String::new(), String::new());
        for (i, s) in self.samples.iter().enumerate() {
            let q = s.question.map_or("-".to_string(), |q| q.to_string());
            let _ = writeln!(layouts, "# sample {i} {} {} {q}", s.kind.name(), s.class);
            let _ = write!(layouts, "{}", s.layout);
            let ids: Vec<String> = s.tokens.iter().map(usize::to_string).collect();
            let _ = writeln!(tokens, "{}", ids.join(" "));
            let vals: Vec<String> = s.latents.data().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(latents, "{}", vals.join(" "));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        std::fs::write(dir.join("layouts.txt"), layouts)?;
        std::fs::write(dir.join("tokens.txt"), tokens)?;
        std::fs::write(dir.join("latents.txt"), latents)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        let manifest = parse_kv_lines(&read("manifest.txt")?)?;
        let get = |k: &str| {
            manifest
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
        };
        if get("format")? != CORPUS_FORMAT.to_string() {
            return Err(Error::Format("unsupported corpus format".into()));
        }
        let world: String = manifest
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("world.").map(|k| format!("{k}={v}\n")))
            .collect();
        let spec = WorldSpec::from_kv(&world)?;
        if get("spec_digest")? != format!("{:016x}", spec.digest()) {
            return Err(Error::Format("world spec digest mismatch".into()));
        }
        let seed = get("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?;

        let mut headers = Vec::new();
        let mut blocks: Vec<String> = Vec::new();
        for line in read("layouts.txt")?.lines() {
            if let Some(h) = line.strip_prefix("# sample ") {
                headers.push(h.to_string());
                blocks.push(String::new());
            } else if let Some(b) = blocks.last_mut() {
                b.push_str(line);
                b.push('\n');
            }
        }
        let token_lines: Vec<String> = read("tokens.txt")?.lines().map(str::to_string).collect();
        let latent_lines: Vec<String> = read("latents.txt")?.lines().map(str::to_string).collect();
        if token_lines.len() != headers.len() || latent_lines.len() != headers.len() {
            return Err(Error::Format("corpus files disagree on the sample count".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
        let mut samples = Vec::with_capacity(headers.len());
        for (i, h) in headers.iter().enumerate() {
            let f: Vec<&str> = h.split_whitespace().collect();
            if f.len() != 4 || num(f[0])? != i {
                return Err(Error::Format(format!("bad sample header {h:?}")));
            }
            let layout: SegmentLayout = blocks[i].parse()?;
            let tokens = token_lines[i].split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
            let vals = latent_lines[i]
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad float {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let rows = vals.len() / spec.d_lat;
            samples.push(Sample {
                kind: SampleKind::parse(f[1])?,
                layout,
                tokens,
                latents: Tensor::new(vec![rows, spec.d_lat], vals)?,
                class: num(f[2])?,
                question: if f[3] == "-" { None } else { Some(num(f[3])?) },
            });
        }
        Ok(Self { spec, seed, samples })
    }
}
