//! Seeded overhead-style scenes: elliptical class blobs over a background,
//! rendered as noisy per-class colors.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_tensor, write_tensor, FeatureMap, LabelGrid, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distribution {
    A,
    B,
}

impl Distribution {
    fn stream_tag(self) -> u64 {
        match self {
            Distribution::A => 0,
            Distribution::B => 1,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::A => "A",
            Distribution::B => "B",
        })
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Distribution::A),
            "B" | "b" => Ok(Distribution::B),
            other => Err(Error::InvalidArgument(format!("unknown distribution {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub mean: [f64; 3],
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub distribution: Distribution,
    pub height: usize,
    pub width: usize,
    /// One profile per class; class 0 is the background.
    pub classes: Vec<ClassProfile>,
    /// Inclusive range of blobs per scene.
    pub blob_count: (usize, usize),
    /// Semi-axis range in pixels.
    pub blob_radius: (f64, f64),
}

const BASE_MEANS: [[f64; 3]; 4] = [
    [0.40, 0.50, 0.30],
    [0.70, 0.65, 0.60],
    [0.20, 0.40, 0.20],
    [0.55, 0.45, 0.55],
];
const B_SHIFT: [f64; 3] = [0.10, -0.08, 0.06];
const B_RADIUS_SCALE: f64 = 1.5;

impl SceneSpec {
    pub fn new(distribution: Distribution) -> Self {
        let (shift, scale) = match distribution {
            Distribution::A => ([0.0; 3], 1.0),
            Distribution::B => (B_SHIFT, B_RADIUS_SCALE),
        };
        let classes = BASE_MEANS
            .iter()
            .map(|m| ClassProfile {
                mean: [m[0] + shift[0], m[1] + shift[1], m[2] + shift[2]],
                noise_sigma: 0.12,
            })
            .collect();
        Self {
            distribution,
            height: 64,
            width: 64,
            classes,
            blob_count: (6, 10),
            blob_radius: (4.0 * scale, 10.0 * scale),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::ZeroDimension(vec![3, self.height, self.width]));
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return Err(Error::InvalidConfig(format!(
                "{} classes; need 1..=255",
                self.classes.len()
            )));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::InvalidConfig(format!(
                "blob count range {:?} is empty",
                self.blob_count
            )));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0.is_finite() && r1.is_finite() && 0.0 < r0 && r0 <= r1) {
            return Err(Error::InvalidConfig(format!(
                "blob radius range {:?} invalid",
                self.blob_radius
            )));
        }
        for (k, c) in self.classes.iter().enumerate() {
            let mean_ok = c.mean.iter().all(|v| (0.0..=1.0).contains(v));
            if !mean_ok || !(c.noise_sigma.is_finite() && c.noise_sigma >= 0.0) {
                return Err(Error::InvalidConfig(format!("class {k} profile {c:?} invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: FeatureMap,
    pub labels: LabelGrid,
}

impl SceneSample {
    pub fn new(image: FeatureMap, labels: LabelGrid) -> Result<Self> {
        if (image.height(), image.width()) != (labels.height(), labels.width()) {
            return Err(Error::GeometryMismatch(format!(
                "image {:?} vs labels {}x{}",
                image.shape(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self { image, labels })
    }

    /// Mirror along x (`horizontal`) and/or y (`vertical`).
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> SceneSample {
        let (c, h, w) = self.image.shape();
        let src = |y: usize, x: usize| {
            let sy = if vertical { h - 1 - y } else { y };
            let sx = if horizontal { w - 1 - x } else { x };
            (sy, sx)
        };
        let image = FeatureMap::from_fn(c, h, w, |ch, y, x| {
            let (sy, sx) = src(y, x);
            self.image.get(ch, sy, sx)
        })
        .expect("same geometry");
        let labels = (0..h * w)
            .map(|i| {
                let (sy, sx) = src(i / w, i % w);
                self.labels.get(sy, sx)
            })
            .collect();
        let labels = LabelGrid::new(h, w, self.labels.num_classes(), labels).expect("same labels");
        SceneSample { image, labels }
    }
}

pub fn generate_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.num_classes());
    let mut labels = vec![0u32; h * w];
    if k > 1 {
        let blobs = spec.blob_count.0 + rng.below(spec.blob_count.1 - spec.blob_count.0 + 1);
        for _ in 0..blobs {
            let class = 1 + rng.below(k - 1) as u32;
            let cy = rng.range(0.0, h as f64);
            let cx = rng.range(0.0, w as f64);
            let ry = rng.range(spec.blob_radius.0, spec.blob_radius.1);
            let rx = rng.range(spec.blob_radius.0, spec.blob_radius.1);
            let (sin, cos) = rng.range(0.0, std::f64::consts::PI).sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    let u = (dx * cos + dy * sin) / rx;
                    let v = (-dx * sin + dy * cos) / ry;
                    if u * u + v * v <= 1.0 {
                        labels[y * w + x] = class;
                    }
                }
            }
        }
    }
    let mut image = vec![0.0; 3 * h * w];
    for (p, &label) in labels.iter().enumerate() {
        let profile = &spec.classes[label as usize];
        for c in 0..3 {
            let noise = if profile.noise_sigma > 0.0 {
                profile.noise_sigma * rng.normal()
            } else {
                0.0
            };
            image[c * h * w + p] = (profile.mean[c] + noise).clamp(0.0, 1.0);
        }
    }
    Ok(SceneSample {
        image: FeatureMap::from_vec(3, h, w, image)?,
        labels: LabelGrid::new(h, w, k, labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            SplitKind::Train => 0,
            SplitKind::Val => 1,
            SplitKind::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

/// Rng stream of sample `index` in `kind` for `distribution`.
pub fn sample_stream(distribution: Distribution, kind: SplitKind, index: usize) -> u64 {
    (distribution.stream_tag() << 40) | (kind.stream_tag() << 32) | index as u64
}

/// Every sample draws from its own stream, so splits never share draws and
/// any sample can be regenerated alone.
pub fn generate_samples(spec: &SceneSpec, seed: u64, kind: SplitKind, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::with_stream(seed, sample_stream(spec.distribution, kind, i));
            generate_scene(spec, &mut rng)
        })
        .collect()
}

pub fn generate_split(spec: &SceneSpec, seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<Split> {
    for (name, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name} split needs at least one sample"
            )));
        }
    }
    Ok(Split {
        train: generate_samples(spec, seed, SplitKind::Train, n_train)?,
        val: generate_samples(spec, seed, SplitKind::Val, n_val)?,
        test: generate_samples(spec, seed, SplitKind::Test, n_test)?,
    })
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.gipl")
}

pub fn label_file_name(index: usize) -> String {
    format!("lbl_{index:05}.gipl")
}

pub fn write_samples(dir: impl AsRef<Path>, samples: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_tensor(&s.image, dir.join(image_file_name(i)))?;
        write_tensor(&s.labels.to_feature_map(), dir.join(label_file_name(i)))?;
    }
    Ok(())
}

/// Reads consecutive `img_*/lbl_*` pairs starting at index 0.
pub fn read_samples(dir: impl AsRef<Path>, num_classes: usize) -> Result<Vec<SceneSample>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    loop {
        let img = dir.join(image_file_name(out.len()));
        if !img.exists() {
            break;
        }
        let image = read_tensor(&img)?;
        let labels = LabelGrid::from_feature_map(&read_tensor(dir.join(label_file_name(out.len())))?, num_classes)?;
        out.push(SceneSample::new(image, labels)?);
    }
    if out.is_empty() {
        return Err(Error::Malformed {
            path: dir.display().to_string(),
            reason: format!("no {} found", image_file_name(0)),
        });
    }
    Ok(out)
}

/// Writes `spec.json` plus `train/`, `val/`, `test/` sample directories.
pub fn write_split(dir: impl AsRef<Path>, spec: &SceneSpec, split: &Split) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    write_samples(dir.join("train"), &split.train)?;
    write_samples(dir.join("val"), &split.val)?;
    write_samples(dir.join("test"), &split.test)
}

pub fn read_spec(dir: impl AsRef<Path>) -> Result<SceneSpec> {
    let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(dir.as_ref().join("spec.json"))?)?;
    spec.validate()?;
    Ok(spec)
}
