//! Model-variant notation and architecture constants.
//!
//! A variant string lists views joined by `+`; each view is
//! `backbone/tubelet[:modality]`, e.g. `B/2:R+S/4:S+Ti/8:F`. The spatial
//! tubelet is always 16×16 and is not written. Omitted modalities are RGB.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Spatial tubelet edge in pixels.
pub const PATCH: usize = 16;
/// Per-frame spectrogram image: 96 STFT frames × 64 mel bins.
pub const SPEC_FRAMES: usize = 96;
pub const SPEC_BINS: usize = 64;
/// Tubelet lengths accepted in variant strings.
pub const NOTATION_TUBELETS: [usize; 4] = [2, 4, 8, 16];

/// Depth and width of one transformer encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
}

impl EncoderDims {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.mlp_dim == 0 {
            return Err(CoreError::Invalid(format!("encoder dims must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(CoreError::Invalid(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Global encoder: Base width and depth with 8 heads.
pub const GLOBAL_ENCODER: EncoderDims = EncoderDims {
    layers: 12,
    heads: 8,
    hidden: 768,
    mlp_dim: 3072,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneSize {
    Ti,
    S,
    B,
    L,
}

impl BackboneSize {
    pub const ALL: [BackboneSize; 4] = [Self::Ti, Self::S, Self::B, Self::L];

    pub fn dims(self) -> EncoderDims {
        let (layers, heads, hidden, mlp_dim) = match self {
            Self::Ti => (12, 3, 192, 768),
            Self::S => (12, 6, 384, 1536),
            Self::B => (12, 12, 768, 3072),
            Self::L => (24, 16, 1024, 4096),
        };
        EncoderDims {
            layers,
            heads,
            hidden,
            mlp_dim,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::Ti => "Ti",
            Self::S => "S",
            Self::B => "B",
            Self::L => "L",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Flow,
    Spectrogram,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Self::Rgb, Self::Flow, Self::Spectrogram];

    pub fn channels(self) -> usize {
        match self {
            Self::Rgb => 3,
            Self::Flow => 2,
            Self::Spectrogram => 1,
        }
    }

    pub fn code(self) -> char {
        match self {
            Self::Rgb => 'R',
            Self::Flow => 'F',
            Self::Spectrogram => 'S',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Flow => "flow",
            Self::Spectrogram => "spectrogram",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ViewSpec {
    pub backbone: BackboneSize,
    pub tubelet_t: usize,
    pub modality: Modality,
}

impl ViewSpec {
    pub fn new(backbone: BackboneSize, tubelet_t: usize, modality: Modality) -> Self {
        Self {
            backbone,
            tubelet_t,
            modality,
        }
    }

    /// Length of one flattened tubelet.
    pub fn tubelet_width(&self) -> usize {
        self.tubelet_t * PATCH * PATCH * self.modality.channels()
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}:{}", self.backbone.code(), self.tubelet_t, self.modality.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub views: Vec<ViewSpec>,
}

impl ModelSpec {
    pub fn new(views: Vec<ViewSpec>) -> Result<Self> {
        if views.is_empty() {
            return Err(CoreError::Invalid("a model needs at least one view".into()));
        }
        if let Some(v) = views.iter().find(|v| v.tubelet_t == 0) {
            return Err(CoreError::Invalid(format!("view {v} has a zero tubelet length")));
        }
        Ok(Self { views })
    }

    pub fn global_encoder(&self) -> EncoderDims {
        GLOBAL_ENCODER
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut out: Vec<Modality> = Vec::new();
        for v in &self.views {
            if !out.contains(&v.modality) {
                out.push(v.modality);
            }
        }
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.views.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, ParseError> {
        parse_model_spec(s)
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_model_spec(&s).map_err(serde::de::Error::custom)
    }
}

/// Parse failure with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid model spec at position {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, position: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            position,
            message: message.into(),
        })
    }

    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn found(&self) -> String {
        match self.rest().chars().next() {
            Some(c) => format!("'{c}'"),
            None => "end of input".into(),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn backbone(&mut self) -> Result<BackboneSize, ParseError> {
        // "Ti" before "S"/"B"/"L": no code is a prefix of another.
        for b in [BackboneSize::Ti, BackboneSize::S, BackboneSize::B, BackboneSize::L] {
            if self.rest().starts_with(b.code()) {
                self.pos += b.code().len();
                return Ok(b);
            }
        }
        self.err(self.pos, format!("expected backbone Ti|S|B|L, found {}", self.found()))
    }

    fn tubelet(&mut self) -> Result<usize, ParseError> {
        let start = self.pos;
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return self.err(start, format!("expected tubelet length, found {}", self.found()));
        }
        self.pos += digits;
        let text = &self.src[start..self.pos];
        match text.parse::<usize>() {
            Ok(t) if NOTATION_TUBELETS.contains(&t) => Ok(t),
            _ => self.err(start, format!("tubelet length {text} is not one of 2, 4, 8, 16")),
        }
    }

    fn modality(&mut self) -> Result<Modality, ParseError> {
        let at = self.pos;
        let m = match self.rest().chars().next() {
            Some('R') => Modality::Rgb,
            Some('F') => Modality::Flow,
            Some('S') => Modality::Spectrogram,
            _ => return self.err(at, format!("expected modality R|F|S, found {}", self.found())),
        };
        self.pos += 1;
        Ok(m)
    }

    fn view(&mut self) -> Result<ViewSpec, ParseError> {
        let backbone = self.backbone()?;
        if !self.eat('/') {
            return self.err(self.pos, format!("expected '/', found {}", self.found()));
        }
        let tubelet_t = self.tubelet()?;
        let modality = if self.eat(':') { self.modality()? } else { Modality::Rgb };
        Ok(ViewSpec {
            backbone,
            tubelet_t,
            modality,
        })
    }
}

/// Parses `view ('+' view)*` with `view := (Ti|S|B|L) '/' int (':' (R|F|S))?`.
pub fn parse_model_spec(s: &str) -> Result<ModelSpec, ParseError> {
    let mut p = Parser { src: s, pos: 0 };
    if s.is_empty() {
        return p.err(0, "empty model spec");
    }
    let mut views = vec![p.view()?];
    while p.pos < s.len() {
        if !p.eat('+') {
            return p.err(p.pos, format!("expected '+' or end of input, found {}", p.found()));
        }
        views.push(p.view()?);
    }
    Ok(ModelSpec { views })
}

pub fn format_model_spec(m: &ModelSpec) -> String {
    m.to_string()
}

/// Image height and width a view tokenizes; spectrogram views always see
/// 96×64 images.
pub fn view_image_dims(v: &ViewSpec, height: usize, width: usize) -> (usize, usize) {
    match v.modality {
        Modality::Spectrogram => (SPEC_FRAMES, SPEC_BINS),
        _ => (height, width),
    }
}

/// `(temporal_indices, spatial_tokens_per_index)` for a view over a clip.
pub fn token_geometry(v: &ViewSpec, frames: usize, height: usize, width: usize) -> Result<(usize, usize)> {
    if v.tubelet_t == 0 || frames == 0 || !frames.is_multiple_of(v.tubelet_t) {
        return Err(CoreError::Geometry(format!(
            "{frames} frames not divisible by tubelet length {}",
            v.tubelet_t
        )));
    }
    let (h, w) = view_image_dims(v, height, width);
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(CoreError::Geometry(format!("{h}×{w} not divisible by {PATCH}")));
    }
    Ok((frames / v.tubelet_t, (h / PATCH) * (w / PATCH)))
}
