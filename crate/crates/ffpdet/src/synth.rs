//! Deterministic synthetic inspection scenes: components that are present,
//! missing or broken, with clutter, occluders and sensor noise.

use ffpdet_core::head::{BBox, Target};
use ffpdet_core::init::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CLASS_MISSING: usize = 0;
pub const CLASS_BROKEN: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["missing", "broken"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// Small rectangular socket holding a key.
    Socket,
    /// Round housing with a centre cap.
    Disc,
    /// Long bolt with a hexagonal head.
    Bolt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of components per image.
    pub components: (usize, usize),
    pub family: ShapeFamily,
    /// Component long side as a fraction of the image width.
    pub size: (f64, f64),
    /// Probability that an image contains at least one faulty component.
    pub fault_probability: f64,
    /// Per-component probability of a partial occluder.
    pub occluder_probability: f64,
    /// Background clutter strokes per 1000 pixels.
    pub clutter_density: f64,
    /// Standard deviation of additive pixel noise, in [0,1] intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::bogie_key_like()
    }
}

impl SceneSpec {
    /// Tiny sockets, several per image.
    pub fn bogie_key_like() -> Self {
        SceneSpec {
            width: 704,
            height: 512,
            components: (1, 3),
            family: ShapeFamily::Socket,
            size: (0.06, 0.1),
            fault_probability: 0.5,
            occluder_probability: 0.15,
            clutter_density: 0.3,
            noise: 0.03,
            seed: 0,
        }
    }

    pub fn dust_collector_like() -> Self {
        SceneSpec {
            components: (1, 2),
            family: ShapeFamily::Disc,
            size: (0.12, 0.2),
            ..Self::bogie_key_like()
        }
    }

    pub fn fastening_bolt_like() -> Self {
        SceneSpec {
            components: (2, 4),
            family: ShapeFamily::Bolt,
            size: (0.1, 0.16),
            ..Self::bogie_key_like()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "bogie-key-like" => Some(Self::bogie_key_like()),
            "dust-collector-like" => Some(Self::dust_collector_like()),
            "fastening-bolt-like" => Some(Self::fastening_bolt_like()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["bogie-key-like", "dust-collector-like", "fastening-bolt-like"];

    pub fn with_size(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("fault_probability", self.fault_probability),
            ("occluder_probability", self.occluder_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(CliError::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.width < 32 || self.height < 32 {
            return Err(CliError::Config(format!(
                "scene must be at least 32x32, got {}x{}",
                self.width, self.height
            )));
        }
        if self.components.0 == 0 || self.components.0 > self.components.1 {
            return Err(CliError::Config(format!("bad component range {:?}", self.components)));
        }
        if !(self.size.0 > 0.0 && self.size.0 <= self.size.1 && self.size.1 < 0.5) {
            return Err(CliError::Config(format!("bad size range {:?}", self.size)));
        }
        if self.clutter_density < 0.0 || self.noise < 0.0 {
            return Err(CliError::Config("clutter density and noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Seed of sample `index` in `split`; independent of generation order.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, split.salt()), index as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Test => 0x7465_7374,
        }
    }
}

/// Grayscale image, row-major, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Quantized to 8 bits, the precision the images are stored at.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotations: Vec<Target>,
}

impl Sample {
    pub fn is_fault(&self) -> bool {
        !self.annotations.is_empty()
    }
}

/// Pixel rectangle touched by a drawing call, `[x0,x1) x [y0,y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBounds {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBounds {
    pub fn to_bbox(self) -> BBox {
        BBox {
            x1: self.x0 as f64,
            y1: self.y0 as f64,
            x2: self.x1 as f64,
            y2: self.y1 as f64,
        }
    }
}

/// Canvas that records the extent of every pixel it writes.
struct Pen<'a> {
    img: &'a mut Image,
    bounds: Option<PixelBounds>,
}

impl<'a> Pen<'a> {
    fn new(img: &'a mut Image) -> Self {
        Pen { img, bounds: None }
    }

    fn put(&mut self, x: i64, y: i64, v: f32) {
        if x < 0 || y < 0 || x as usize >= self.img.width || y as usize >= self.img.height {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        self.img.pixels[y * self.img.width + x] = v;
        self.bounds = Some(match self.bounds {
            None => PixelBounds {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            },
            Some(b) => PixelBounds {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x + 1),
                y1: b.y1.max(y + 1),
            },
        });
    }

    /// Fills pixels whose centres satisfy `inside`, scanning `[x0,x1) x [y0,y1)`.
    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: f32, inside: impl Fn(f64, f64) -> bool) {
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.put(x, y, v);
                }
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: f32) {
        self.fill(x0, y0, x1, y1, v, |_, _| true);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Intact,
    Missing,
    Broken,
}

/// Draws one component with top-left corner `(x, y)` and footprint `w x h`;
/// returns the bounds of the pixels written.
pub fn draw_component(
    img: &mut Image,
    family: ShapeFamily,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    cond: Condition,
    tone: f32,
) -> Option<PixelBounds> {
    let mut pen = Pen::new(img);
    let dark = tone * 0.35;
    let bright = (tone + 0.4).min(1.0);
    match family {
        ShapeFamily::Socket => {
            // housing, hole, then the key across the hole
            pen.rect(x, y, x + w, y + h, tone);
            let m = (w.min(h) / 5).max(1);
            pen.rect(x + m, y + m, x + w - m, y + h - m, dark);
            let cx = x + w / 2;
            let kw = (w / 4).max(1);
            match cond {
                Condition::Intact => pen.rect(cx - kw / 2, y + m, cx - kw / 2 + kw, y + h - m, bright),
                Condition::Broken => {
                    let mid = y + h / 2;
                    pen.rect(cx - kw / 2, y + m, cx - kw / 2 + kw, mid - 1, bright);
                    pen.rect(cx + kw / 2 + 1, mid + 1, cx + kw / 2 + 1 + kw, y + h - m, bright);
                }
                Condition::Missing => {}
            }
        }
        ShapeFamily::Disc => {
            let (cx, cy) = (x as f64 + w as f64 / 2.0, y as f64 + h as f64 / 2.0);
            let r = w.min(h) as f64 / 2.0;
            pen.fill(x, y, x + w, y + h, tone, |px, py| (px - cx).hypot(py - cy) <= r);
            pen.fill(x, y, x + w, y + h, dark, |px, py| (px - cx).hypot(py - cy) <= r * 0.6);
            match cond {
                Condition::Intact => {
                    pen.fill(x, y, x + w, y + h, bright, |px, py| (px - cx).hypot(py - cy) <= r * 0.4)
                }
                Condition::Broken => pen.fill(x, y, x + w, y + h, bright, |px, py| {
                    (px - cx).hypot(py - cy) <= r * 0.4 && py < cy
                }),
                Condition::Missing => {}
            }
        }
        ShapeFamily::Bolt => {
            // hexagonal head on top, shaft below
            let head = h.min(w * 2) / 3;
            let (cx, hy) = (x as f64 + w as f64 / 2.0, y as f64 + head as f64 / 2.0);
            let hr = w as f64 / 2.0;
            pen.fill(x, y, x + w, y + head.max(1), tone, |px, py| {
                let (dx, dy) = ((px - cx).abs(), (py - hy).abs());
                dx <= hr && dx * 0.5 + dy <= hr
            });
            let sw = (w / 3).max(1);
            let sx = x + (w - sw) / 2;
            pen.rect(sx, y + head, sx + sw, y + h, dark);
            match cond {
                Condition::Intact => pen.rect(sx, y + head, sx + sw, y + h, bright),
                Condition::Broken => pen.rect(sx, y + head, sx + sw, y + head + (h - head) / 3, bright),
                Condition::Missing => {}
            }
        }
    }
    pen.bounds
}

fn footprint(family: ShapeFamily, long: f64) -> (i64, i64) {
    let long = long.round().max(6.0) as i64;
    match family {
        ShapeFamily::Socket => (long * 3 / 4, long),
        ShapeFamily::Disc => (long, long),
        ShapeFamily::Bolt => ((long / 3).max(3), long),
    }
}

fn overlaps(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64), gap: i64) -> bool {
    a.0 < b.2 + gap && b.0 < a.2 + gap && a.1 < b.3 + gap && b.1 < a.3 + gap
}

/// Renders sample `index` of `split`. Pure function of its arguments.
pub fn generate_sample(spec: &SceneSpec, split: Split, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed(split, index));
    let (w, h) = (spec.width, spec.height);
    let base: f32 = rng.gen_range(0.3..0.5);
    let slope: f32 = rng.gen_range(-0.1..0.1);
    let mut img = Image {
        width: w,
        height: h,
        pixels: (0..w * h)
            .map(|i| base + slope * ((i % w) as f32 / w as f32 - 0.5))
            .collect(),
    };

    let strokes = (spec.clutter_density * (w * h) as f64 / 1000.0).round() as usize;
    for _ in 0..strokes {
        let v: f32 = rng.gen_range(0.15..0.7);
        let x0 = rng.gen_range(0..w) as i64;
        let y0 = rng.gen_range(0..h) as i64;
        let long = rng.gen_range(4..(w / 6).max(5)) as i64;
        let mut pen = Pen::new(&mut img);
        if rng.gen_bool(0.5) {
            pen.rect(x0, y0, x0 + long, y0 + 1, v);
        } else {
            pen.rect(x0, y0, x0 + 1, y0 + long, v);
        }
    }

    let count = rng.gen_range(spec.components.0..=spec.components.1);
    let faulty_image = rng.gen_bool(spec.fault_probability);
    let mut placed: Vec<(i64, i64, i64, i64)> = Vec::new();
    for _ in 0..count {
        let long = rng.gen_range(spec.size.0..=spec.size.1) * w as f64;
        let (cw, ch) = footprint(spec.family, long);
        let (cw, ch) = (cw.min(w as i64 - 2), ch.min(h as i64 - 2));
        for _attempt in 0..50 {
            let x = rng.gen_range(1..=(w as i64 - cw - 1));
            let y = rng.gen_range(1..=(h as i64 - ch - 1));
            let rect = (x, y, x + cw, y + ch);
            if placed.iter().all(|p| !overlaps(*p, rect, 4)) {
                placed.push(rect);
                break;
            }
        }
    }

    let mut conditions = vec![Condition::Intact; placed.len()];
    if faulty_image && !placed.is_empty() {
        let first = rng.gen_range(0..placed.len());
        for (i, c) in conditions.iter_mut().enumerate() {
            if i == first || rng.gen_bool(0.25) {
                *c = if rng.gen_bool(0.5) {
                    Condition::Missing
                } else {
                    Condition::Broken
                };
            }
        }
    }

    let mut annotations = Vec::new();
    for (&(x0, y0, x1, y1), &cond) in placed.iter().zip(&conditions) {
        let tone: f32 = rng.gen_range(0.4..0.6);
        let bounds = draw_component(&mut img, spec.family, x0, y0, x1 - x0, y1 - y0, cond, tone);
        let class = match cond {
            Condition::Intact => None,
            Condition::Missing => Some(CLASS_MISSING),
            Condition::Broken => Some(CLASS_BROKEN),
        };
        if let (Some(class), Some(b)) = (class, bounds) {
            annotations.push(Target {
                bbox: b.to_bbox(),
                class,
            });
        }
        if rng.gen_bool(spec.occluder_probability) {
            // a foreign object over one corner, never more than a third of the part
            let (cw, ch) = (x1 - x0, y1 - y0);
            let (ow, oh) = ((cw / 3).max(1), (ch / 3).max(1));
            let ox = if rng.gen_bool(0.5) { x0 - ow / 2 } else { x1 - ow / 2 };
            let oy = if rng.gen_bool(0.5) { y0 - oh / 2 } else { y1 - oh / 2 };
            let v: f32 = rng.gen_range(0.1..0.8);
            Pen::new(&mut img).rect(ox, oy, ox + ow, oy + oh, v);
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise as f32).expect("noise is finite and nonnegative");
        for p in &mut img.pixels {
            *p += normal.sample(&mut rng);
        }
    }
    img.quantize();
    Sample {
        image: img,
        annotations,
    }
}
