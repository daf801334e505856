//! Segment layouts and the block-causal attention masks derived from them.
//!
//! A packed sequence is an ordered list of segments. Tokens see every token of
//! their own segment and of earlier segments of the same sample, and nothing
//! from other samples.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    VisEnc,
    VisLat,
}

impl Modality {
    /// Discrete positions are handled by the understanding expert.
    pub fn is_discrete(self) -> bool {
        !matches!(self, Modality::VisLat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Prompt,
    Response,
    Condition,
    Target,
}

impl Role {
    pub fn bears_loss(self) -> bool {
        matches!(self, Role::Response | Role::Target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    Und,
    Gen,
    Interleaved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub modality: Modality,
    pub role: Role,
    pub length: usize,
    pub sample_id: usize,
    pub turn: usize,
}

impl Segment {
    pub fn new(modality: Modality, role: Role, length: usize) -> Self {
        Self {
            modality,
            role,
            length,
            sample_id: 0,
            turn: 0,
        }
    }

    pub fn text_prompt(length: usize) -> Self {
        Self::new(Modality::Text, Role::Prompt, length)
    }

    pub fn text_response(length: usize) -> Self {
        Self::new(Modality::Text, Role::Response, length)
    }

    pub fn vis_enc(length: usize) -> Self {
        Self::new(Modality::VisEnc, Role::Condition, length)
    }

    pub fn vis_lat(length: usize) -> Self {
        Self::new(Modality::VisLat, Role::Target, length)
    }

    pub fn with_sample(mut self, sample_id: usize) -> Self {
        self.sample_id = sample_id;
        self
    }

    pub fn with_turn(mut self, turn: usize) -> Self {
        self.turn = turn;
        self
    }
}

/// Ordered segments of one packed sequence. Segments from `active_from`
/// onward are the block(s) being denoised; everything before is a fixed prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
    active_from: Option<usize>,
}

impl SegmentLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let layout = Self {
            segments,
            active_from: None,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Marks the trailing segments starting at `index` as active.
    pub fn with_active_from(mut self, index: usize) -> Result<Self> {
        if index >= self.segments.len() {
            return Err(Error::Layout(format!(
                "active segment {index} out of range for {} segments",
                self.segments.len()
            )));
        }
        self.active_from = Some(index);
        Ok(self)
    }

    /// Marks only the last segment as active.
    pub fn with_last_active(self) -> Result<Self> {
        let n = self.segments.len();
        if n == 0 {
            return Err(Error::Layout("empty layout has no active segment".into()));
        }
        self.with_active_from(n - 1)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    fn validate(&self) -> Result<()> {
        let mut finished: Vec<usize> = Vec::new();
        let mut current: Option<usize> = None;
        for (i, s) in self.segments.iter().enumerate() {
            if s.length == 0 {
                return Err(Error::Layout(format!("segment {i} has zero length")));
            }
            let ok = match s.modality {
                Modality::Text => matches!(s.role, Role::Prompt | Role::Response),
                Modality::VisEnc => matches!(s.role, Role::Condition | Role::Prompt),
                Modality::VisLat => matches!(s.role, Role::Target | Role::Condition),
            };
            if !ok {
                return Err(Error::Layout(format!(
                    "segment {i}: role {:?} invalid for modality {:?}",
                    s.role, s.modality
                )));
            }
            if current != Some(s.sample_id) {
                if finished.contains(&s.sample_id) {
                    return Err(Error::Layout(format!(
                        "sample {} is not contiguous (segment {i})",
                        s.sample_id
                    )));
                }
                if let Some(c) = current {
                    finished.push(c);
                }
                current = Some(s.sample_id);
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn active_from(&self) -> Option<usize> {
        self.active_from
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ranges().len()
    }

    /// Start offset of each segment.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.segments
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.length;
                o
            })
            .collect()
    }

    /// Segment index of every position.
    pub fn segment_of_position(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat(i).take(s.length))
            .collect()
    }

    pub fn modality_of_position(&self) -> Vec<Modality> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat(s.modality).take(s.length))
            .collect()
    }

    /// `(sample_id, start, end)` for each sample in order.
    pub fn sample_ranges(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        let mut pos = 0;
        for s in &self.segments {
            match out.last_mut() {
                Some(last) if last.0 == s.sample_id => last.2 += s.length,
                _ => out.push((s.sample_id, pos, pos + s.length)),
            }
            pos += s.length;
        }
        out
    }

    /// Position of each token within its own sample; restarts at 0 for
    /// every sample so packing never shifts a sample's positions.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, start, end) in self.sample_ranges() {
            out.extend(0..end - start);
        }
        out
    }

    /// Per-query half-open key ranges equivalent to [`build_mask`].
    pub fn key_spans(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total_len());
        let mut sample_start = 0;
        let mut pos = 0;
        let mut prev_sample = None;
        for s in &self.segments {
            if prev_sample != Some(s.sample_id) {
                sample_start = pos;
                prev_sample = Some(s.sample_id);
            }
            let end = pos + s.length;
            out.extend(std::iter::repeat((sample_start, end)).take(s.length));
            pos = end;
        }
        out
    }

    /// Index splitting the fixed prefix from the active block(s).
    pub fn prefix_boundary(&self) -> Result<usize> {
        let a = self
            .active_from
            .ok_or_else(|| contract("layout has no active segment"))?;
        Ok(self.segments[..a].iter().map(|s| s.length).sum())
    }

    /// Layout of the fixed prefix only.
    pub fn prefix_layout(&self) -> Result<SegmentLayout> {
        let a = self
            .active_from
            .ok_or_else(|| contract("layout has no active segment"))?;
        Ok(SegmentLayout {
            segments: self.segments[..a].to_vec(),
            active_from: None,
        })
    }

    /// Appends segments, keeping the existing active designation.
    pub fn extended(&self, extra: &[Segment]) -> Result<SegmentLayout> {
        let mut segments = self.segments.clone();
        segments.extend_from_slice(extra);
        let out = SegmentLayout {
            segments,
            active_from: self.active_from,
        };
        out.validate()?;
        Ok(out)
    }

    /// Concatenates layouts, renumbering sample ids so each input keeps its
    /// own samples distinct from the others.
    pub fn pack(parts: &[SegmentLayout]) -> Result<SegmentLayout> {
        let mut segments = Vec::new();
        let mut next_id = 0;
        for part in parts {
            let mut remap: Vec<(usize, usize)> = Vec::new();
            for s in &part.segments {
                let id = match remap.iter().find(|(old, _)| *old == s.sample_id) {
                    Some(&(_, new)) => new,
                    None => {
                        remap.push((s.sample_id, next_id));
                        next_id += 1;
                        next_id - 1
                    }
                };
                segments.push(Segment { sample_id: id, ..*s });
            }
        }
        SegmentLayout::new(segments)
    }

    /// Loss-bearing positions for a training mode.
    pub fn loss_positions(&self, mode: LossMode) -> Vec<bool> {
        self.segments
            .iter()
            .flat_map(|s| {
                let on = match mode {
                    LossMode::Und => s.modality == Modality::Text && s.role == Role::Response,
                    LossMode::Gen => s.modality == Modality::VisLat && s.role == Role::Target,
                    LossMode::Interleaved => s.modality == Modality::VisLat,
                };
                std::iter::repeat(on).take(s.length)
            })
            .collect()
    }

    /// Stable digest of the serialized layout.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    /// Converts each row to a contiguous key range; fails if a row is not
    /// contiguous or is empty.
    pub fn spans(&self) -> Result<Vec<(usize, usize)>> {
        (0..self.n)
            .map(|q| {
                let row = self.row(q);
                let lo = row
                    .iter()
                    .position(|&a| a)
                    .ok_or_else(|| Error::Layout(format!("query {q} attends nothing")))?;
                let hi = lo + row[lo..].iter().take_while(|&&a| a).count();
                if row[hi..].iter().any(|&a| a) {
                    return Err(Error::Layout(format!("query {q} has a non-contiguous key set")));
                }
                Ok((lo, hi))
            })
            .collect()
    }

    /// Restriction to a subset of positions (rows and columns).
    pub fn restrict(&self, idx: &[usize]) -> AttentionMask {
        let n = idx.len();
        let mut allowed = Vec::with_capacity(n * n);
        for &q in idx {
            for &k in idx {
                allowed.push(self.allowed(q, k));
            }
        }
        AttentionMask { n, allowed }
    }
}

/// Materializes the block-causal, sample-isolated mask of a layout.
pub fn build_mask(layout: &SegmentLayout) -> AttentionMask {
    let n = layout.total_len();
    let seg = layout.segment_of_position();
    let sample: Vec<usize> = layout
        .segments()
        .iter()
        .flat_map(|s| std::iter::repeat(s.sample_id).take(s.length))
        .collect();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = sample[q] == sample[k] && seg[k] <= seg[q];
        }
    }
    AttentionMask { n, allowed }
}

pub fn prefix_boundary(layout: &SegmentLayout) -> Result<usize> {
    layout.prefix_boundary()
}

pub fn loss_positions(layout: &SegmentLayout, mode: LossMode) -> Vec<bool> {
    layout.loss_positions(mode)
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "TEXT",
            Modality::VisEnc => "VIS_ENC",
            Modality::VisLat => "VIS_LAT",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TEXT" => Ok(Modality::Text),
            "VIS_ENC" => Ok(Modality::VisEnc),
            "VIS_LAT" => Ok(Modality::VisLat),
            other => Err(Error::Format(format!("unknown modality {other:?}"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Prompt => "PROMPT",
            Role::Response => "RESPONSE",
            Role::Condition => "CONDITION",
            Role::Target => "TARGET",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PROMPT" => Ok(Role::Prompt),
            "RESPONSE" => Ok(Role::Response),
            "CONDITION" => Ok(Role::Condition),
            "TARGET" => Ok(Role::Target),
            other => Err(Error::Format(format!("unknown role {other:?}"))),
        }
    }
}

/// One segment per line: `sample_id turn modality role length`, with an
/// optional trailing `active` marker on the first active segment.
impl fmt::Display for SegmentLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.segments.iter().enumerate() {
            write!(f, "{} {} {} {} {}", s.sample_id, s.turn, s.modality, s.role, s.length)?;
            if self.active_from == Some(i) {
                f.write_str(" active")?;
            }
            f.write_str("\n")?;
        }
        Ok(())
    }
}

impl FromStr for SegmentLayout {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut active_from = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("line {}: expected 'sample_id turn modality role length'", lineno + 1));
            if fields.len() != 5 && !(fields.len() == 6 && fields[5] == "active") {
                return Err(bad());
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
            if fields.len() == 6 {
                if active_from.is_some() {
                    return Err(Error::Format(format!("line {}: second active marker", lineno + 1)));
                }
                active_from = Some(segments.len());
            }
            segments.push(Segment {
                sample_id: parse(fields[0])?,
                turn: parse(fields[1])?,
                modality: fields[2].parse()?,
                role: fields[3].parse()?,
                length: parse(fields[4])?,
            });
        }
        let layout = SegmentLayout::new(segments)?;
        match active_from {
            Some(a) => layout.with_active_from(a),
            None => Ok(layout),
        }
    }
}
