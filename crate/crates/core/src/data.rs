//! Synthetic referring-segmentation data.
//!
//! Each image contains 2–4 non-overlapping colored shapes; the expression is
//! rendered from a structured predicate chosen so that it matches exactly
//! one shape (verified by exhaustively matching the parsed expression
//! against every shape). Generation is deterministic: every sample draws
//! from its own rng stream derived from (dataset seed, sample index).
//!
//! On-disk layout: one directory per sample holding image.ppm (P6),
//! mask.pbm (P4), boundary.pbm (P4), expr.txt, and meta.txt (key=value
//! lines); a root manifest.tsv lists ids and train/val split; vocab.txt is
//! line-delimited (token on line k has id k + 2, after pad/unk).

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{invalid_arg, RawTensor, Result};
use crate::text::Vocabulary;

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.85, 0.80, 0.15]),
];

const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        match w {
            "circle" => Some(ShapeKind::Circle),
            "square" => Some(ShapeKind::Square),
            "triangle" => Some(ShapeKind::Triangle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    /// center, in pixels
    pub cx: usize,
    pub cy: usize,
    /// half-extent (radius for circles)
    pub s: usize,
    pub small: bool,
}

impl Shape {
    /// Point-in-shape test on pixel centers.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.cx as f64;
        let dy = y as f64 - self.cy as f64;
        let s = self.s as f64;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => {
                // upward-pointing isoceles triangle: apex at cy−s, base at
                // cy+s, base half-width s
                if dy < -s || dy > s {
                    return false;
                }
                let half_width = s * (dy + s) / (2.0 * s);
                dx.abs() <= half_width
            }
        }
    }

    pub fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = self.contains(x, y);
            }
        }
        out
    }

    /// Continuous area of the shape, for the rasterization sanity check.
    pub fn analytic_area(&self) -> f64 {
        let s = self.s as f64;
        match self.kind {
            ShapeKind::Circle => std::f64::consts::PI * s * s,
            ShapeKind::Square => (2.0 * s + 1.0) * (2.0 * s + 1.0),
            ShapeKind::Triangle => 0.5 * (2.0 * s + 1.0) * (2.0 * s + 1.0),
        }
    }

    pub fn perimeter(&self) -> f64 {
        let s = self.s as f64;
        match self.kind {
            ShapeKind::Circle => 2.0 * std::f64::consts::PI * s,
            ShapeKind::Square => 8.0 * s + 4.0,
            ShapeKind::Triangle => (2.0 + 2.0 * (2.0f64).sqrt()) * (2.0 * s + 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pos {
    Left,
    Right,
    Top,
    Bottom,
}

impl Pos {
    fn phrase(self) -> &'static str {
        match self {
            Pos::Left => "on the left",
            Pos::Right => "on the right",
            Pos::Top => "at the top",
            Pos::Bottom => "at the bottom",
        }
    }

    fn holds(self, sh: &Shape, h: usize, w: usize) -> bool {
        match self {
            Pos::Left => (sh.cx as f64) < w as f64 / 2.0,
            Pos::Right => (sh.cx as f64) > w as f64 / 2.0,
            Pos::Top => (sh.cy as f64) < h as f64 / 2.0,
            Pos::Bottom => (sh.cy as f64) > h as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Dir {
    fn phrase(self) -> &'static str {
        match self {
            Dir::Above => "above",
            Dir::Below => "below",
            Dir::LeftOf => "left of",
            Dir::RightOf => "right of",
        }
    }

    fn holds(self, target: &Shape, anchor: &Shape) -> bool {
        match self {
            Dir::Above => target.cy < anchor.cy,
            Dir::Below => target.cy > anchor.cy,
            Dir::LeftOf => target.cx < anchor.cx,
            Dir::RightOf => target.cx > anchor.cx,
        }
    }
}

/// Structured form of an expression. Rendering and parsing are inverses,
/// and `matches` evaluates a predicate against a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Attr {
        small: Option<bool>,
        color: Option<usize>,
        /// None means the generic word "shape"
        kind: Option<ShapeKind>,
        pos: Option<Pos>,
    },
    Rel {
        kind: Option<ShapeKind>,
        dir: Dir,
        anchor_color: Option<usize>,
        anchor_kind: ShapeKind,
    },
}

fn color_index(word: &str) -> Option<usize> {
    COLORS.iter().position(|(name, _)| *name == word)
}

impl Predicate {
    pub fn render(&self) -> String {
        match self {
            Predicate::Attr {
                small,
                color,
                kind,
                pos,
            } => {
                let mut words: Vec<&str> = Vec::new();
                // bare "circle" / "red circle" for the shortest forms; any
                // longer form opens with "the"
                let bare = small.is_none() && pos.is_none();
                if !bare {
                    words.push("the");
                }
                if let Some(sm) = small {
                    words.push(if *sm { "small" } else { "large" });
                }
                if let Some(c) = color {
                    words.push(COLORS[*c].0);
                }
                words.push(kind.map_or("shape", ShapeKind::word));
                let mut out = words.join(" ");
                if let Some(p) = pos {
                    out.push(' ');
                    out.push_str(p.phrase());
                }
                out
            }
            Predicate::Rel {
                kind,
                dir,
                anchor_color,
                anchor_kind,
            } => {
                let mut out = format!("the {} {} the", kind.map_or("shape", ShapeKind::word), dir.phrase());
                if let Some(c) = anchor_color {
                    out.push(' ');
                    out.push_str(COLORS[*c].0);
                }
                out.push(' ');
                out.push_str(anchor_kind.word());
                out
            }
        }
    }

    /// Parse a rendered expression back into a predicate.
    pub fn parse(expr: &str) -> Option<Predicate> {
        let toks: Vec<&str> = expr.split_whitespace().collect();
        let mut i = 0;
        let eat = |i: &mut usize, w: &str, toks: &[&str]| {
            if toks.get(*i) == Some(&w) {
                *i += 1;
                true
            } else {
                false
            }
        };
        eat(&mut i, "the", &toks);
        let small = match toks.get(i) {
            Some(&"small") => {
                i += 1;
                Some(true)
            }
            Some(&"large") => {
                i += 1;
                Some(false)
            }
            _ => None,
        };
        let color = toks.get(i).and_then(|w| color_index(w)).inspect(|_c| {
            i += 1;
        });
        let kind = match toks.get(i) {
            Some(&"shape") => {
                i += 1;
                None
            }
            Some(w) => {
                let k = ShapeKind::from_word(w)?;
                i += 1;
                Some(k)
            }
            None => return None,
        };
        if i == toks.len() {
            return Some(Predicate::Attr {
                small,
                color,
                kind,
                pos: None,
            });
        }
        // positional tail
        let pos = match (toks.get(i), toks.get(i + 1), toks.get(i + 2)) {
            (Some(&"on"), Some(&"the"), Some(&"left")) => Some(Pos::Left),
            (Some(&"on"), Some(&"the"), Some(&"right")) => Some(Pos::Right),
            (Some(&"at"), Some(&"the"), Some(&"top")) => Some(Pos::Top),
            (Some(&"at"), Some(&"the"), Some(&"bottom")) => Some(Pos::Bottom),
            _ => None,
        };
        if let Some(p) = pos {
            if i + 3 != toks.len() {
                return None;
            }
            return Some(Predicate::Attr {
                small,
                color,
                kind,
                pos: Some(p),
            });
        }
        // relational tail: dir "the" [color] kind — only valid without
        // size/color on the head
        if small.is_some() || color.is_some() {
            return None;
        }
        let dir = match (toks.get(i), toks.get(i + 1)) {
            (Some(&"above"), _) => {
                i += 1;
                Dir::Above
            }
            (Some(&"below"), _) => {
                i += 1;
                Dir::Below
            }
            (Some(&"left"), Some(&"of")) => {
                i += 2;
                Dir::LeftOf
            }
            (Some(&"right"), Some(&"of")) => {
                i += 2;
                Dir::RightOf
            }
            _ => return None,
        };
        if !eat(&mut i, "the", &toks) {
            return None;
        }
        let anchor_color = toks.get(i).and_then(|w| color_index(w)).inspect(|_c| {
            i += 1;
        });
        let anchor_kind = ShapeKind::from_word(toks.get(i)?)?;
        i += 1;
        if i != toks.len() {
            return None;
        }
        Some(Predicate::Rel {
            kind,
            dir,
            anchor_color,
            anchor_kind,
        })
    }

    /// Indices of shapes the predicate matches.
    pub fn matches(&self, shapes: &[Shape], h: usize, w: usize) -> Vec<usize> {
        match self {
            Predicate::Attr {
                small,
                color,
                kind,
                pos,
            } => shapes
                .iter()
                .enumerate()
                .filter(|(_, sh)| {
                    small.is_none_or(|sm| sh.small == sm)
                        && color.is_none_or(|c| sh.color == c)
                        && kind.is_none_or(|k| sh.kind == k)
                        && pos.is_none_or(|p| p.holds(sh, h, w))
                })
                .map(|(i, _)| i)
                .collect(),
            Predicate::Rel {
                kind,
                dir,
                anchor_color,
                anchor_kind,
            } => {
                let anchors: Vec<usize> = shapes
                    .iter()
                    .enumerate()
                    .filter(|(_, sh)| {
                        sh.kind == *anchor_kind
                            && anchor_color.is_none_or(|c| sh.color == c)
                    })
                    .map(|(i, _)| i)
                    .collect();
                // the anchor reference must itself be unique
                let &[a] = &anchors[..] else { return Vec::new() };
                shapes
                    .iter()
                    .enumerate()
                    .filter(|(i, sh)| {
                        *i != a
                            && kind.is_none_or(|k| sh.kind == k)
                            && dir.holds(sh, &shapes[a])
                    })
                    .map(|(i, _)| i)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    /// 3×H×W, values in [0,1]
    pub image: RawTensor,
    pub expression: String,
    /// H×W, values in {0,1}
    pub gt_mask: RawTensor,
    pub boundary: RawTensor,
    pub shapes: Vec<Shape>,
    pub target: usize,
    pub meta: Vec<(String, String)>,
}

/// Morphological gradient with a 3×3 structuring element:
/// dilate(mask) XOR erode(mask).
pub fn extract_boundary(mask: &RawTensor) -> Result<RawTensor> {
    if mask.shape.len() != 2 {
        return Err(invalid_arg(
            "extract_boundary",
            format!("expected H×W, got {:?}", mask.shape),
        ));
    }
    if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid_arg("extract_boundary", "mask must be binary"));
    }
    let (h, w) = (mask.shape[0], mask.shape[1]);
    let at = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            false
        } else {
            mask.data[y as usize * w + x as usize] == 1.0
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(y + dy, x + dx);
                    any |= v;
                    all &= v;
                }
            }
            if any != all {
                out[y as usize * w + x as usize] = 1.0;
            }
        }
    }
    Ok(RawTensor::from_vec(&[h, w], out))
}

fn render_image(shapes: &[Shape], h: usize, w: usize) -> RawTensor {
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for ch in 0..3 {
        data[ch * hw..(ch + 1) * hw].fill(BACKGROUND[ch]);
    }
    // later shapes never overlap earlier ones, so paint order is irrelevant
    for sh in shapes {
        let rgb = COLORS[sh.color].1;
        for y in 0..h {
            for x in 0..w {
                if sh.contains(x, y) {
                    for ch in 0..3 {
                        data[ch * hw + y * w + x] = rgb[ch];
                    }
                }
            }
        }
    }
    RawTensor::from_vec(&[3, h, w], data)
}

fn bboxes_overlap(a: &Shape, b: &Shape) -> bool {
    let gap = 2isize; // keep at least one background pixel between shapes
    let (ax0, ax1) = (a.cx as isize - a.s as isize, a.cx as isize + a.s as isize);
    let (ay0, ay1) = (a.cy as isize - a.s as isize, a.cy as isize + a.s as isize);
    let (bx0, bx1) = (b.cx as isize - b.s as isize, b.cx as isize + b.s as isize);
    let (by0, by1) = (b.cy as isize - b.s as isize, b.cy as isize + b.s as isize);
    ax0 - gap <= bx1 && bx0 - gap <= ax1 && ay0 - gap <= by1 && by0 - gap <= ay1
}

fn place_shapes(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Shape> {
    let n = rng.gen_range(2..=4);
    let small_range = (h / 14).max(2)..(h / 10).max(3);
    let large_range = (h / 8).max(4)..(h / 6).max(5);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < n && attempts < 200 {
        attempts += 1;
        let small = rng.gen_bool(0.5);
        let s = if small {
            rng.gen_range(small_range.clone())
        } else {
            rng.gen_range(large_range.clone())
        };
        if s + 1 >= w / 2 || s + 1 >= h / 2 {
            continue;
        }
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let cand = Shape {
            kind,
            color: rng.gen_range(0..COLORS.len()),
            cx: rng.gen_range(s + 1..w - s - 1),
            cy: rng.gen_range(s + 1..h - s - 1),
            s,
            small,
        };
        if shapes.iter().all(|sh| !bboxes_overlap(sh, &cand)) {
            shapes.push(cand);
        }
    }
    shapes
}

/// All predicates that could plausibly single out `target`, cheapest first
/// within each family; the caller shuffles for length variety.
fn candidate_predicates(shapes: &[Shape], target: usize) -> Vec<Predicate> {
    let t = &shapes[target];
    let mut out = Vec::new();
    let kinds = [Some(t.kind), None];
    for kind in kinds {
        for small in [None, Some(t.small)] {
            for color in [None, Some(t.color)] {
                for pos in [None, Some(Pos::Left), Some(Pos::Right), Some(Pos::Top), Some(Pos::Bottom)] {
                    out.push(Predicate::Attr {
                        small,
                        color,
                        kind,
                        pos,
                    });
                }
            }
        }
    }
    for (a, anchor) in shapes.iter().enumerate() {
        if a == target {
            continue;
        }
        for dir in [Dir::Above, Dir::Below, Dir::LeftOf, Dir::RightOf] {
            for anchor_color in [Some(anchor.color), None] {
                for kind in kinds {
                    out.push(Predicate::Rel {
                        kind,
                        dir,
                        anchor_color,
                        anchor_kind: anchor.kind,
                    });
                }
            }
        }
    }
    out
}

/// Deterministic per-sample rng stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index as u64),
    )
}

pub fn generate_sample(seed: u64, index: usize, h: usize, w: usize) -> Sample {
    let mut rng = sample_rng(seed, index);
    loop {
        let shapes = place_shapes(&mut rng, h, w);
        if shapes.len() < 2 {
            continue;
        }
        // random target, random predicate order → varied expression lengths
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(&mut rng);
        let mut found: Option<(usize, Predicate)> = None;
        'target: for &t in &order {
            let mut cands = candidate_predicates(&shapes, t);
            cands.shuffle(&mut rng);
            for p in cands {
                if p.matches(&shapes, h, w) == [t] {
                    found = Some((t, p));
                    break 'target;
                }
            }
        }
        // no shape is uniquely describable: regenerate the scene
        let Some((target, pred)) = found else { continue };
        let expression = pred.render();
        let mask_bits = shapes[target].rasterize(h, w);
        let gt_mask = RawTensor::from_vec(
            &[h, w],
            mask_bits.iter().map(|&b| f64::from(b)).collect(),
        );
        let boundary = extract_boundary(&gt_mask).expect("mask is binary");
        let t = &shapes[target];
        let meta = vec![
            ("seed".into(), seed.to_string()),
            ("index".into(), index.to_string()),
            ("n_shapes".into(), shapes.len().to_string()),
            ("target_kind".into(), t.kind.word().into()),
            ("target_color".into(), COLORS[t.color].0.into()),
            ("target_cx".into(), t.cx.to_string()),
            ("target_cy".into(), t.cy.to_string()),
            ("target_s".into(), t.s.to_string()),
            ("target_small".into(), t.small.to_string()),
            (
                "expr_len".into(),
                expression.split_whitespace().count().to_string(),
            ),
        ];
        return Sample {
            index,
            image: render_image(&shapes, h, w),
            expression,
            gt_mask,
            boundary,
            shapes,
            target,
            meta,
        };
    }
}

pub fn generate_dataset(n: usize, h: usize, w: usize, seed: u64) -> (Vec<Sample>, Vocabulary) {
    let samples: Vec<Sample> = (0..n).map(|i| generate_sample(seed, i, h, w)).collect();
    let mut vocab = Vocabulary::new();
    for s in &samples {
        for tok in s.expression.split_whitespace() {
            vocab.add(tok);
        }
    }
    (samples, vocab)
}

// ── PNM codecs ────────────────────────────────────────────────────────

/// 8-bit P6 color image from a [3,H,W] tensor in [0,1].
pub fn write_ppm(path: &Path, image: &RawTensor) -> io::Result<()> {
    let (h, w) = (image.shape[1], image.shape[2]);
    let hw = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..hw {
        for ch in 0..3 {
            buf.push((image.data[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)
}

/// 8-bit P5 grayscale from a [H,W] tensor in [0,1].
pub fn write_pgm(path: &Path, map: &RawTensor) -> io::Result<()> {
    let (h, w) = (map.shape[0], map.shape[1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in &map.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf)
}

/// Bit-packed P4 bitmap; 1 (black) marks foreground.
pub fn write_pbm(path: &Path, mask: &RawTensor) -> io::Result<()> {
    let (h, w) = (mask.shape[0], mask.shape[1]);
    let mut buf = format!("P4\n{w} {h}\n").into_bytes();
    for y in 0..h {
        let mut byte = 0u8;
        for x in 0..w {
            if mask.data[y * w + x] != 0.0 {
                byte |= 0x80 >> (x % 8);
            }
            if x % 8 == 7 {
                buf.push(byte);
                byte = 0;
            }
        }
        if w % 8 != 0 {
            buf.push(byte);
        }
    }
    fs::write(path, buf)
}

fn pnm_header(bytes: &[u8], magic: &str, fields: usize) -> io::Result<(Vec<usize>, usize)> {
    let err = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut vals = Vec::new();
    let mut i = 0;
    // magic
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(err("bad magic"));
    }
    i += 2;
    while vals.len() < fields {
        // skip whitespace and comments
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(err("truncated header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..i])
            .unwrap()
            .parse()
            .map_err(|_| err("bad header field"))?;
        vals.push(v);
    }
    // single whitespace byte separates header from payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(err("missing header terminator"));
    }
    Ok((vals, i + 1))
}

pub fn read_ppm(path: &Path) -> io::Result<RawTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (vals, off) = pnm_header(&bytes, "P6", 3)?;
    let (w, h, maxval) = (vals[0], vals[1], vals[2]);
    if maxval != 255 || bytes.len() < off + 3 * w * h {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad P6 payload"));
    }
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = bytes[off + 3 * p + ch] as f64 / 255.0;
        }
    }
    Ok(RawTensor::from_vec(&[3, h, w], data))
}

pub fn read_pbm(path: &Path) -> io::Result<RawTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (vals, off) = pnm_header(&bytes, "P4", 2)?;
    let (w, h) = (vals[0], vals[1]);
    let row_bytes = w.div_ceil(8);
    if bytes.len() < off + row_bytes * h {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad P4 payload"));
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let b = bytes[off + y * row_bytes + x / 8];
            if b & (0x80 >> (x % 8)) != 0 {
                data[y * w + x] = 1.0;
            }
        }
    }
    Ok(RawTensor::from_vec(&[h, w], data))
}

// ── on-disk dataset ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

/// Seeded shuffle assigning `val_count` samples to the validation split.
pub fn assign_splits(n: usize, val_count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5917);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; n];
    for &i in order.iter().take(val_count.min(n)) {
        splits[i] = Split::Val;
    }
    splits
}

pub fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    vocab: &Vocabulary,
    splits: &[Split],
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("id\tsplit\texpr_len\n");
    for (s, split) in samples.iter().zip(splits) {
        let sd = dir.join(format!("{:05}", s.index));
        fs::create_dir_all(&sd)?;
        write_ppm(&sd.join("image.ppm"), &s.image)?;
        write_pbm(&sd.join("mask.pbm"), &s.gt_mask)?;
        write_pbm(&sd.join("boundary.pbm"), &s.boundary)?;
        fs::write(sd.join("expr.txt"), format!("{}\n", s.expression))?;
        let mut meta = String::new();
        for (k, v) in &s.meta {
            meta.push_str(&format!("{k}={v}\n"));
        }
        fs::write(sd.join("meta.txt"), meta)?;
        manifest.push_str(&format!(
            "{:05}\t{}\t{}\n",
            s.index,
            split,
            s.expression.split_whitespace().count()
        ));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    fs::write(dir.join("vocab.txt"), vocab.to_lines())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub image: RawTensor,
    pub gt_mask: RawTensor,
    pub boundary: RawTensor,
    pub expression: String,
}

pub fn load_dataset(dir: &Path) -> io::Result<(Vec<LoadedSample>, Vocabulary)> {
    let err = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut samples = Vec::new();
    for line in manifest.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols
            .next()
            .ok_or_else(|| err(format!("bad manifest line: {line}")))?
            .to_string();
        let split = match cols.next() {
            Some("train") => Split::Train,
            Some("val") => Split::Val,
            other => return Err(err(format!("bad split {other:?}"))),
        };
        let sd = dir.join(&id);
        samples.push(LoadedSample {
            image: read_ppm(&sd.join("image.ppm"))?,
            gt_mask: read_pbm(&sd.join("mask.pbm"))?,
            boundary: read_pbm(&sd.join("boundary.pbm"))?,
            expression: fs::read_to_string(sd.join("expr.txt"))?.trim().to_string(),
            id,
            split,
        });
    }
    let vocab_text = fs::read_to_string(dir.join("vocab.txt"))?;
    let vocab = Vocabulary::from_lines(&vocab_text);
    Ok((samples, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(42, 7, 32, 32);
        let b = generate_sample(42, 7, 32, 32);
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.expression, b.expression);
        assert_eq!(a.gt_mask.data, b.gt_mask.data);
    }

    #[test]
    fn uniqueness_audit_by_exhaustive_matching() {
        let (samples, _) = generate_dataset(40, 32, 32, 9);
        for s in &samples {
            let pred = Predicate::parse(&s.expression)
                .unwrap_or_else(|| panic!("unparseable: {}", s.expression));
            let hits = pred.matches(&s.shapes, 32, 32);
            assert_eq!(hits, vec![s.target], "ambiguous: {}", s.expression);
        }
    }

    #[test]
    fn expression_lengths_span_three_buckets() {
        let (samples, _) = generate_dataset(120, 32, 32, 3);
        let mut buckets = std::collections::BTreeSet::new();
        for s in &samples {
            let len = s.expression.split_whitespace().count();
            buckets.insert(match len {
                0..=2 => 0,
                3..=4 => 1,
                5..=6 => 2,
                _ => 3,
            });
        }
        assert!(buckets.len() >= 3, "buckets hit: {buckets:?}");
    }

    #[test]
    fn mask_area_matches_analytic_area() {
        let (samples, _) = generate_dataset(30, 48, 48, 11);
        for s in &samples {
            let count = s.gt_mask.data.iter().filter(|&&v| v == 1.0).count() as f64;
            let t = &s.shapes[s.target];
            let diff = (count - t.analytic_area()).abs();
            assert!(
                diff <= t.perimeter(),
                "{:?}: raster {count} vs analytic {} (perimeter {})",
                t,
                t.analytic_area(),
                t.perimeter()
            );
        }
    }

    #[test]
    fn boundary_of_empty_and_full_masks() {
        let empty = RawTensor::zeros(&[5, 5]);
        assert!(extract_boundary(&empty).unwrap().data.iter().all(|&v| v == 0.0));
        let full = RawTensor::from_vec(&[5, 5], vec![1.0; 25]);
        let b = extract_boundary(&full).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect = f64::from(y == 0 || y == 4 || x == 0 || x == 4);
                assert_eq!(b.data[y * 5 + x], expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn boundary_of_single_pixel_is_its_dilation() {
        let mut m = RawTensor::zeros(&[3, 3]);
        m.data[4] = 1.0;
        let b = extract_boundary(&m).unwrap();
        // erosion is empty, dilation is the full 3×3 block
        assert!(b.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn boundary_set_relations() {
        let s = generate_sample(5, 0, 32, 32);
        let b = extract_boundary(&s.gt_mask).unwrap();
        let (h, w) = (32usize, 32usize);
        let neighborhood = |y: usize, x: usize| {
            let mut any = false;
            let mut all = true;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    let v = ny >= 0
                        && nx >= 0
                        && ny < h as isize
                        && nx < w as isize
                        && s.gt_mask.data[ny as usize * w + nx as usize] == 1.0;
                    any |= v;
                    all &= v;
                }
            }
            (any, all)
        };
        for y in 0..h {
            for x in 0..w {
                if b.data[y * w + x] == 1.0 {
                    let (dilated, eroded) = neighborhood(y, x);
                    assert!(dilated); // boundary ⊆ dilation
                    assert!(!eroded); // boundary ∩ erosion = ∅
                }
            }
        }
    }

    #[test]
    fn rejects_nonbinary_mask() {
        let m = RawTensor::from_vec(&[2, 2], vec![0.0, 0.5, 1.0, 0.0]);
        assert!(extract_boundary(&m).is_err());
    }

    #[test]
    fn pnm_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(1, 0, 24, 16);
        let p = dir.path().join("image.ppm");
        write_ppm(&p, &s.image).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape, s.image.shape);
        for (a, b) in s.image.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        let m = dir.path().join("mask.pbm");
        write_pbm(&m, &s.gt_mask).unwrap();
        assert_eq!(read_pbm(&m).unwrap().data, s.gt_mask.data);
    }

    #[test]
    fn dataset_write_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, vocab) = generate_dataset(9, 16, 16, 77);
        let splits = assign_splits(9, 1, 77);
        assert_eq!(splits.iter().filter(|&&s| s == Split::Val).count(), 1);
        write_dataset(dir.path(), &samples, &vocab, &splits).unwrap();
        let (loaded, v2) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 9);
        for (orig, l) in samples.iter().zip(&loaded) {
            assert_eq!(l.expression, orig.expression);
            assert_eq!(l.gt_mask.data, orig.gt_mask.data);
            assert_eq!(l.boundary.data, orig.boundary.data);
        }
        assert_eq!(v2.to_lines(), vocab.to_lines());
    }
}
