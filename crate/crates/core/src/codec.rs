//! Token vocabulary, coordinate/parameter quantization and the per-format
//! sequence encoders and lenient decoders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    ImageDims, Lane, Point, PolyLane, PolygonLane, PolylineLane, RowSampled, ANCHOR_KEYPOINTS,
    DEFAULT_LIOU_ROWS, POLYGON_VERTICES, POLY_COEFFS,
};

pub const DEFAULT_N_BINS: u32 = 1000;
/// Default maximum number of lanes per encoded scene.
pub const DEFAULT_MAX_LANES: usize = 4;
const LOGIT_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("extent must be positive, got {0}")]
    NonPositiveExtent(f64),
    #[error("non-coordinate token {0}")]
    NonCoordinateToken(u32),
    #[error("scene has {got} lanes, more than the configured maximum {max}")]
    TooManyLanes { got: usize, max: usize },
    #[error("lane {index} is not a {expected} lane")]
    WrongLaneForm { index: usize, expected: &'static str },
    #[error("lane {index} has {got} points, expected {expected}")]
    WrongPointCount { index: usize, got: usize, expected: usize },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("missing or unknown format token")]
    MissingFormat,
}

/// Discrete token id. Id 0 is padding; `[1, n_bins]` are coordinate bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub const PAD: Token = Token(0);

    pub fn id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceFormat {
    Segmentation,
    Anchor,
    Parameter,
}

impl SequenceFormat {
    pub const ALL: [SequenceFormat; 3] = [Self::Segmentation, Self::Anchor, Self::Parameter];

    /// Coordinate tokens per lane group, excluding the lane token.
    pub fn coords_per_lane(self) -> usize {
        match self {
            Self::Segmentation => 2 * POLYGON_VERTICES,
            Self::Anchor => 2 * ANCHOR_KEYPOINTS,
            Self::Parameter => POLY_COEFFS + 1,
        }
    }

    pub fn has_start_point(self) -> bool {
        !matches!(self, Self::Parameter)
    }

    /// Full sequence length for `lanes` lanes, START and END included.
    pub fn sequence_len(self, lanes: usize) -> usize {
        let fixed = if self.has_start_point() { 5 } else { 3 };
        fixed + lanes * (self.coords_per_lane() + 1)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Segmentation => "seg",
            Self::Anchor => "anchor",
            Self::Parameter => "param",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.short_name() == s)
    }

    pub fn index(self) -> usize {
        match self {
            Self::Segmentation => 0,
            Self::Anchor => 1,
            Self::Parameter => 2,
        }
    }
}

impl std::fmt::Display for SequenceFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Shared vocabulary: coordinate bins `[1, n_bins]` followed by six specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_bins: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { n_bins: DEFAULT_N_BINS }
    }
}

impl Vocabulary {
    pub fn new(n_bins: u32) -> Self {
        assert!(n_bins >= 1, "n_bins must be positive");
        Self { n_bins }
    }

    pub fn start(&self) -> Token {
        Token(self.n_bins + 1)
    }
    pub fn end(&self) -> Token {
        Token(self.n_bins + 2)
    }
    pub fn fmt_seg(&self) -> Token {
        Token(self.n_bins + 3)
    }
    pub fn fmt_anchor(&self) -> Token {
        Token(self.n_bins + 4)
    }
    pub fn fmt_param(&self) -> Token {
        Token(self.n_bins + 5)
    }
    pub fn lane(&self) -> Token {
        Token(self.n_bins + 6)
    }

    /// Number of non-padding tokens (`n_bins + 6`).
    pub fn len(&self) -> usize {
        self.n_bins as usize + 6
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Size of an id-indexed table covering padding as well (`n_bins + 7`).
    pub fn id_space(&self) -> usize {
        self.len() + 1
    }

    pub fn format_token(&self, fmt: SequenceFormat) -> Token {
        match fmt {
            SequenceFormat::Segmentation => self.fmt_seg(),
            SequenceFormat::Anchor => self.fmt_anchor(),
            SequenceFormat::Parameter => self.fmt_param(),
        }
    }

    pub fn format_of(&self, t: Token) -> Option<SequenceFormat> {
        SequenceFormat::ALL.into_iter().find(|f| self.format_token(*f) == t)
    }

    pub fn is_coordinate(&self, t: Token) -> bool {
        t.0 >= 1 && t.0 <= self.n_bins
    }

    pub fn is_format(&self, t: Token) -> bool {
        self.format_of(t).is_some()
    }

    pub fn contains(&self, t: Token) -> bool {
        t.0 <= self.n_bins + 6
    }
}

/// Encoded scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub format: SequenceFormat,
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.0).collect()
    }

    /// Decoder input `[START, FMT, body...]` and target `[FMT, body..., END]`.
    pub fn teacher_forcing_pair(&self) -> (&[Token], &[Token]) {
        let n = self.tokens.len();
        (&self.tokens[..n - 1], &self.tokens[1..])
    }
}

fn round_clamp(u: f64, n_bins: u32) -> Token {
    // f64::round rounds half away from zero.
    Token(u.round().clamp(1.0, f64::from(n_bins)) as u32)
}

pub fn quantize_coord(v: f64, extent: f64, n_bins: u32) -> Result<Token, CodecError> {
    if !v.is_finite() {
        return Err(CodecError::NonFinite(v));
    }
    if !(extent > 0.0) {
        return Err(CodecError::NonPositiveExtent(extent));
    }
    Ok(round_clamp(v / extent * f64::from(n_bins), n_bins))
}

pub fn dequantize_coord(t: Token, extent: f64, n_bins: u32) -> Result<f64, CodecError> {
    if t.0 < 1 || t.0 > n_bins {
        return Err(CodecError::NonCoordinateToken(t.0));
    }
    Ok(f64::from(t.0) / f64::from(n_bins) * extent)
}

pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quantize_param(a: f64, n_bins: u32) -> Result<Token, CodecError> {
    if !a.is_finite() {
        return Err(CodecError::NonFinite(a));
    }
    Ok(round_clamp(sigmoid(a) * f64::from(n_bins), n_bins))
}

pub fn dequantize_param(t: Token, n_bins: u32) -> Result<f64, CodecError> {
    if t.0 < 1 || t.0 > n_bins {
        return Err(CodecError::NonCoordinateToken(t.0));
    }
    let p = (f64::from(t.0) / f64::from(n_bins)).clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    Ok(logit(p))
}

/// Sort key used to order lanes left to right: x at the lowest covered row.
pub fn bottom_x<L: RowSampled + ?Sized>(lane: &L, dims: ImageDims) -> f64 {
    let n = DEFAULT_LIOU_ROWS;
    (0..n)
        .rev()
        .find_map(|r| lane.x_at(r as f64 * dims.h() / (n as f64 - 1.0), dims))
        .unwrap_or(f64::INFINITY)
}

/// Per-format encoder/decoder bound to a vocabulary and image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCodec {
    pub vocab: Vocabulary,
    pub dims: ImageDims,
    pub max_lanes: usize,
}

impl SceneCodec {
    pub fn new(vocab: Vocabulary, dims: ImageDims) -> Self {
        Self { vocab, dims, max_lanes: DEFAULT_MAX_LANES }
    }

    pub fn with_max_lanes(mut self, max_lanes: usize) -> Self {
        self.max_lanes = max_lanes;
        self
    }

    fn qx(&self, x: f64) -> Result<Token, CodecError> {
        quantize_coord(x, self.dims.w(), self.vocab.n_bins)
    }

    fn qy(&self, y: f64) -> Result<Token, CodecError> {
        quantize_coord(y, self.dims.h(), self.vocab.n_bins)
    }

    fn push_points(&self, out: &mut Vec<Token>, pts: &[Point]) -> Result<(), CodecError> {
        for p in pts {
            out.push(self.qx(p.x)?);
            out.push(self.qy(p.y)?);
        }
        Ok(())
    }

    /// Encodes one scene. Lanes must all be in the geometric form matching
    /// `fmt`; they are emitted left to right by bottom-row x.
    pub fn encode(&self, lanes: &[Lane], fmt: SequenceFormat) -> Result<TokenSequence, CodecError> {
        if lanes.len() > self.max_lanes {
            return Err(CodecError::TooManyLanes { got: lanes.len(), max: self.max_lanes });
        }
        let mut order: Vec<(usize, f64)> = lanes.iter().map(|l| bottom_x(l, self.dims)).enumerate().collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1));

        let v = &self.vocab;
        let mut tokens = Vec::with_capacity(fmt.sequence_len(lanes.len()));
        tokens.push(v.start());
        tokens.push(v.format_token(fmt));
        if fmt.has_start_point() {
            tokens.push(self.qx(0.0)?);
            tokens.push(self.qy(0.0)?);
        }
        for (index, _) in order {
            match (fmt, &lanes[index]) {
                (SequenceFormat::Segmentation, Lane::Polygon(p)) => {
                    if p.vertices.len() != POLYGON_VERTICES {
                        return Err(CodecError::WrongPointCount {
                            index,
                            got: p.vertices.len(),
                            expected: POLYGON_VERTICES,
                        });
                    }
                    self.push_points(&mut tokens, &p.vertices)?;
                }
                (SequenceFormat::Anchor, Lane::Polyline(p)) => {
                    if p.points.len() != ANCHOR_KEYPOINTS {
                        return Err(CodecError::WrongPointCount {
                            index,
                            got: p.points.len(),
                            expected: ANCHOR_KEYPOINTS,
                        });
                    }
                    self.push_points(&mut tokens, &p.points)?;
                }
                (SequenceFormat::Parameter, Lane::Poly(p)) => {
                    for a in p.coeffs {
                        tokens.push(quantize_param(a, v.n_bins)?);
                    }
                    tokens.push(self.qy(p.offset)?);
                }
                (fmt, _) => {
                    let expected = match fmt {
                        SequenceFormat::Segmentation => "polygon",
                        SequenceFormat::Anchor => "polyline",
                        SequenceFormat::Parameter => "parameter",
                    };
                    return Err(CodecError::WrongLaneForm { index, expected });
                }
            }
            tokens.push(v.lane());
        }
        tokens.push(v.end());
        Ok(TokenSequence { format: fmt, tokens })
    }

    /// Lenient decode of a (possibly malformed) generated token stream.
    ///
    /// Fails only when the format token is missing or unknown; every other
    /// defect drops the affected lane group and records a diagnostic.
    pub fn decode(&self, tokens: &[Token]) -> Result<DecodedScene, CodecError> {
        if tokens.is_empty() {
            return Err(CodecError::EmptySequence);
        }
        let v = &self.vocab;
        let mut pos = usize::from(tokens[0] == v.start());
        let format = tokens.get(pos).and_then(|t| v.format_of(*t)).ok_or(CodecError::MissingFormat)?;
        pos += 1;

        let mut out = DecodedScene { format, lanes: Vec::new(), diagnostics: Vec::new(), ended: false };
        if format.has_start_point() {
            for _ in 0..2 {
                match tokens.get(pos) {
                    Some(t) if v.is_coordinate(*t) => pos += 1,
                    Some(t) if *t == v.end() => break,
                    Some(t) => {
                        out.diagnostics.push(Diagnostic::MissingStartPoint { position: pos, token: *t });
                        break;
                    }
                    None => break,
                }
            }
        }

        let group_len = format.coords_per_lane();
        let mut group: Vec<Token> = Vec::with_capacity(group_len);
        let mut group_start = pos;
        let mut skipping = false;
        while pos < tokens.len() {
            let t = tokens[pos];
            pos += 1;
            if t == v.end() {
                out.ended = true;
                break;
            }
            if skipping {
                if t == v.lane() {
                    skipping = false;
                    group.clear();
                    group_start = pos;
                }
                continue;
            }
            if t == v.lane() {
                if group.len() == group_len {
                    let lane = self.dequantize_group(format, &group);
                    if let Some(err) = lane_defect(&lane, self.dims) {
                        out.diagnostics.push(Diagnostic::InvalidGeometry { lane: out.lanes.len(), reason: err });
                    }
                    out.lanes.push(lane);
                } else {
                    out.diagnostics.push(Diagnostic::ShortGroup { position: group_start, len: group.len() });
                }
                group.clear();
                group_start = pos;
            } else if v.is_coordinate(t) {
                if group.len() == group_len {
                    out.diagnostics.push(Diagnostic::OverlongGroup { position: group_start });
                    skipping = true;
                } else {
                    group.push(t);
                }
            } else {
                out.diagnostics.push(Diagnostic::UnexpectedToken { position: pos - 1, token: t });
                group.clear();
                group_start = pos;
            }
        }
        if !group.is_empty() && !skipping {
            out.diagnostics.push(Diagnostic::TruncatedGroup { position: group_start, len: group.len() });
        }
        if !out.ended {
            out.diagnostics.push(Diagnostic::MissingEnd);
        }
        Ok(out)
    }

    fn dequantize_group(&self, fmt: SequenceFormat, group: &[Token]) -> Lane {
        let n = self.vocab.n_bins;
        let (w, h) = (self.dims.w(), self.dims.h());
        // Tokens in `group` are coordinate tokens, so dequantization cannot fail.
        let dq = |t: Token, e: f64| f64::from(t.0) / f64::from(n) * e;
        let points = || group.chunks_exact(2).map(|c| Point::new(dq(c[0], w), dq(c[1], h))).collect::<Vec<_>>();
        match fmt {
            SequenceFormat::Segmentation => Lane::Polygon(PolygonLane { vertices: points() }),
            SequenceFormat::Anchor => Lane::Polyline(PolylineLane { points: points() }),
            SequenceFormat::Parameter => {
                let mut coeffs = [0.0; POLY_COEFFS];
                for (c, t) in coeffs.iter_mut().zip(group) {
                    *c = dequantize_param(*t, n).unwrap_or(0.0);
                }
                Lane::Poly(PolyLane { coeffs, offset: dq(group[POLY_COEFFS], h) })
            }
        }
    }
}

fn lane_defect(lane: &Lane, dims: ImageDims) -> Option<String> {
    let res = match lane {
        Lane::Polyline(l) => l.validate(dims),
        Lane::Polygon(l) => l.validate(),
        Lane::Poly(l) => l.validate(dims),
    };
    res.err().map(|e| e.to_string())
}

/// Parse problem found while decoding a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// A special token where the starting point was expected.
    MissingStartPoint { position: usize, token: Token },
    /// Sequence ended mid-group; the partial group was dropped.
    TruncatedGroup { position: usize, len: usize },
    /// Lane token arrived before the group was complete.
    ShortGroup { position: usize, len: usize },
    /// More coordinates than a group holds; skipped to the next lane token.
    OverlongGroup { position: usize },
    /// Special token in a coordinate position; the group was aborted.
    UnexpectedToken { position: usize, token: Token },
    /// No END token before the sequence ran out.
    MissingEnd,
    /// The lane parsed but violates its geometric invariants (kept).
    InvalidGeometry { lane: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedScene {
    pub format: SequenceFormat,
    pub lanes: Vec<Lane>,
    pub diagnostics: Vec<Diagnostic>,
    pub ended: bool,
}
