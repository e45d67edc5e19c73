//! On-disk dataset: `root/{train,test}/images/NNNNNN.ppm`,
//! `root/{train,test}/annotations.txt` and `root/spec.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ffpdet_core::head::{BBox, ImageSize, ImageTargets, Target};
use ffpdet_core::init::derive_seed;
use ffpdet_core::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::synth::{generate_sample, Image, Sample, SceneSpec, Split, CLASS_NAMES};

pub const INDEX_HEADER: &str = "ffpdet-annotations 1";
pub const SPEC_FILE: &str = "spec.txt";

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.reserve(img.pixels.len() * 3);
    for p in &img.pixels {
        let v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
        bytes.extend_from_slice(&[v, v, v]);
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Reads a binary PPM; the red channel is taken as the gray value.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = |detail: &str| CliError::format(path, detail.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected an 8-bit binary PPM (P6, maxval 255)"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimensions"));
    let (width, height) = (dim(fields[1])?, dim(fields[2])?);
    let data = &bytes[pos + 1..];
    if data.len() < width * height * 3 {
        return Err(bad(&format!(
            "truncated: {} of {} pixel bytes",
            data.len(),
            width * height * 3
        )));
    }
    Ok(Image {
        width,
        height,
        pixels: data.chunks_exact(3).take(width * height).map(|c| c[0] as f32 / 255.0).collect(),
    })
}

/// One line of an annotation index.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub file: String,
    pub fault: bool,
    pub targets: Vec<Target>,
}

impl Record {
    fn render(&self) -> String {
        let mut line = format!("{} {}", self.file, u8::from(self.fault));
        for t in &self.targets {
            let b = t.bbox;
            write!(line, " {} {} {} {} {}", t.class, b.x1, b.y1, b.x2, b.y2).expect("string write");
        }
        line
    }

    fn parse(line: &str, path: &Path, lineno: usize) -> Result<Self> {
        let bad = |detail: String| CliError::format(path, format!("line {lineno}: {detail}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || !(fields.len() - 2).is_multiple_of(5) {
            return Err(bad(format!("expected `file flag (class x1 y1 x2 y2)*`, got `{line}`")));
        }
        let fault = match fields[1] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("fault flag must be 0 or 1, got `{other}`"))),
        };
        let mut targets = Vec::new();
        for t in fields[2..].chunks(5) {
            let class: usize = t[0].parse().map_err(|_| bad(format!("bad class `{}`", t[0])))?;
            if class >= CLASS_NAMES.len() {
                return Err(bad(format!("class {class} out of range")));
            }
            let mut c = [0.0; 4];
            for (v, s) in c.iter_mut().zip(&t[1..]) {
                *v = s.parse().map_err(|_| bad(format!("bad coordinate `{s}`")))?;
            }
            let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))?;
            targets.push(Target { bbox, class });
        }
        if fault != !targets.is_empty() {
            return Err(bad(format!(
                "{}: fault flag {} disagrees with {} annotations",
                fields[0],
                u8::from(fault),
                targets.len()
            )));
        }
        Ok(Record {
            file: fields[0].to_string(),
            fault,
            targets,
        })
    }
}

/// Fault/normal split of a generated set, plus boxes per class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassBalance {
    pub images: usize,
    pub fault_images: usize,
    pub boxes_per_class: [usize; 2],
}

impl ClassBalance {
    fn add(&mut self, r: &Record) {
        self.images += 1;
        self.fault_images += usize::from(r.fault);
        for t in &r.targets {
            self.boxes_per_class[t.class] += 1;
        }
    }
}

fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Writes `count` samples of `split` under `root`.
pub fn generate_split(spec: &SceneSpec, root: &Path, split: Split, count: usize) -> Result<ClassBalance> {
    spec.validate()?;
    if count == 0 {
        return Err(CliError::Config("sample count must be at least 1".into()));
    }
    let images = split_dir(root, split).join("images");
    fs::create_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(spec, split, i);
            let file = format!("{i:06}.ppm");
            write_ppm(&images.join(&file), &sample.image)?;
            Ok(Record {
                file,
                fault: sample.is_fault(),
                targets: sample.annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut balance = ClassBalance::default();
    for r in &records {
        index.push_str(&r.render());
        index.push('\n');
        balance.add(r);
    }
    let path = split_dir(root, split).join("annotations.txt");
    fs::write(&path, index).map_err(|e| CliError::io(&path, e))?;
    Ok(balance)
}

/// Writes both splits and `spec.txt`.
pub fn generate_dataset(
    spec: &SceneSpec,
    root: &Path,
    train: usize,
    test: usize,
) -> Result<(ClassBalance, ClassBalance)> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let text = toml::to_string(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let path = root.join(SPEC_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok((
        generate_split(spec, root, Split::Train, train)?,
        generate_split(spec, root, Split::Test, test)?,
    ))
}

pub fn read_spec(root: &Path) -> Result<SceneSpec> {
    let path = root.join(SPEC_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))
}

/// Index of one split; images are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let dir = split_dir(root, split);
        let path = dir.join("annotations.txt");
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(INDEX_HEADER) => {}
            other => {
                return Err(CliError::format(
                    &path,
                    format!("expected header `{INDEX_HEADER}`, found `{}`", other.unwrap_or("")),
                ))
            }
        }
        let records = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| Record::parse(l, &path, i + 2))
            .collect::<Result<Vec<_>>>()?;
        let images = dir.join("images");
        let on_disk = fs::read_dir(&images)
            .map_err(|e| CliError::io(&images, e))?
            .filter(|e| e.as_ref().map(|e| e.path().extension().is_some_and(|x| x == "ppm")).unwrap_or(false))
            .count();
        if on_disk != records.len() {
            return Err(CliError::format(
                &path,
                format!("{} records but {on_disk} images in {}", records.len(), images.display()),
            ));
        }
        Ok(Dataset { dir, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.dir.join("images").join(&self.records[i].file)
    }

    /// Reads sample `i`, checking its boxes against the image bounds.
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let path = self.image_path(i);
        let image = read_ppm(&path)?;
        let r = &self.records[i];
        for t in &r.targets {
            let b = t.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > image.width as f64 || b.y2 > image.height as f64 {
                return Err(CliError::format(
                    &path,
                    format!("box {:?} outside {}x{} image", b.as_array(), image.width, image.height),
                ));
            }
        }
        Ok(Sample {
            image,
            annotations: r.targets.clone(),
        })
    }

    /// Visit order for one pass, a pure function of `seed`.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    /// Additive brightness drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast gain drawn from `[1-c, 1+c]`.
    pub contrast: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_probability: 0.5,
            brightness: 0.05,
            contrast: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            flip_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let img = &sample.image;
    let (w, h) = (img.width, img.height);
    let pixels = (0..h).flat_map(|y| (0..w).rev().map(move |x| img.pixels[y * w + x])).collect();
    Sample {
        image: Image {
            width: w,
            height: h,
            pixels,
        },
        annotations: sample
            .annotations
            .iter()
            .map(|t| Target {
                bbox: t.bbox.flip_horizontal(w as f64),
                class: t.class,
            })
            .collect(),
    }
}

/// Random flip plus photometric jitter; boxes follow the pixels.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if policy.flip_probability > 0.0 && rng.gen_bool(policy.flip_probability.min(1.0)) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let shift = if policy.brightness > 0.0 {
        rng.gen_range(-policy.brightness..=policy.brightness) as f32
    } else {
        0.0
    };
    let gain = if policy.contrast > 0.0 {
        rng.gen_range(1.0 - policy.contrast..=1.0 + policy.contrast) as f32
    } else {
        1.0
    };
    if shift != 0.0 || gain != 1.0 {
        for p in &mut out.image.pixels {
            *p = ((*p - 0.5) * gain + 0.5 + shift).clamp(0.0, 1.0);
        }
    }
    out
}

/// Stream seed for augmenting draw `draw` of sample `index`.
pub fn augment_seed(seed: u64, draw: u64, index: usize) -> u64 {
    derive_seed(derive_seed(seed, draw), index as u64)
}

/// Smallest multiple of 32 that holds `v`; the network downsamples by 32.
pub fn padded(v: usize) -> usize {
    v.div_ceil(32) * 32
}

/// Stacks grayscale samples into an `[N, 3, H, W]` batch, zero-padded on the
/// right and bottom to a multiple of 32.
pub fn batch_tensor<F: Real>(samples: &[&Sample]) -> Result<Tensor<F>> {
    let first = &samples
        .first()
        .ok_or_else(|| CliError::Config("empty batch".into()))?
        .image;
    let (w, h) = (first.width, first.height);
    if samples.iter().any(|s| s.image.width != w || s.image.height != h) {
        return Err(CliError::Config("images in a batch must share one size".into()));
    }
    let (pw, ph) = (padded(w), padded(h));
    let mut data = vec![F::zero(); samples.len() * 3 * ph * pw];
    for (n, s) in samples.iter().enumerate() {
        for c in 0..3 {
            let plane = &mut data[(n * 3 + c) * ph * pw..][..ph * pw];
            for y in 0..h {
                for x in 0..w {
                    plane[y * pw + x] = F::lit(s.image.pixels[y * w + x] as f64);
                }
            }
        }
    }
    Ok(Tensor::new(&[samples.len(), 3, ph, pw], data)?)
}

pub fn targets_of(sample: &Sample) -> ImageTargets {
    ImageTargets {
        size: ImageSize {
            width: sample.image.width as f64,
            height: sample.image.height as f64,
        },
        targets: sample.annotations.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::bogie_key_like().with_size(96, 64)
    }

    #[test]
    fn ppm_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(&spec(), Split::Train, 0);
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &s.image).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), s.image);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_ppm(&p).unwrap_err().to_string();
        assert!(err.contains("a.ppm") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn record_round_trip() {
        let r = Record {
            file: "000001.ppm".into(),
            fault: true,
            targets: vec![Target {
                bbox: BBox::new(1.5, 2.0, 30.25, 40.0).unwrap(),
                class: 1,
            }],
        };
        assert_eq!(Record::parse(&r.render(), Path::new("x"), 2).unwrap(), r);
        assert!(Record::parse("a.ppm 1", Path::new("x"), 2).is_err());
        assert!(Record::parse("a.ppm 0 0 1 1 2 2", Path::new("x"), 2).is_err());
        assert!(Record::parse("a.ppm 1 0 1 1 2", Path::new("x"), 2).is_err());
    }

    #[test]
    fn generate_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = generate_dataset(&spec(), dir.path(), 12, 5).unwrap();
        assert_eq!((train.images, test.images), (12, 5));
        assert_eq!(read_spec(dir.path()).unwrap(), spec());
        let ds = Dataset::load(dir.path(), Split::Train).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.sample(i).unwrap(), generate_sample(&spec(), Split::Train, i));
        }
        assert_eq!(ds.shuffled_order(4), ds.shuffled_order(4));
        let mut sorted = ds.shuffled_order(4);
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());

        fs::remove_file(ds.image_path(3)).unwrap();
        let err = Dataset::load(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("12 records but 11 images"), "{err}");
    }

    #[test]
    fn flip_is_involution_and_jitter_keeps_boxes() {
        let s = generate_sample(
            &SceneSpec {
                fault_probability: 1.0,
                ..spec()
            },
            Split::Test,
            1,
        );
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        let jitter = AugmentPolicy {
            flip_probability: 0.0,
            ..Default::default()
        };
        let a = augment(&s, &jitter, 9);
        assert_eq!(a.annotations, s.annotations);
        assert_eq!(augment(&s, &AugmentPolicy::default(), 9), augment(&s, &AugmentPolicy::default(), 9));
    }

    #[test]
    fn batches_are_padded() {
        let s = generate_sample(&spec().with_size(176, 128), Split::Train, 0);
        let t: Tensor<f32> = batch_tensor(&[&s, &s]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 128, 192]);
        assert_eq!(t.data()[176], 0.0);
        assert_eq!(t.data()[5], s.image.pixels[5]);
    }
}
