//! Pinhole-camera scene generator.
//!
//! Flat objects are placed at chosen distances in front of a flat background
//! and projected with `radius_px = focal_px · size_mm / distance_mm`. A pixel
//! belongs to an object iff its center lies inside the projected shape, so an
//! object rendered at `d / g` is exactly the object at `d` scaled by `g` about
//! the principal point (for integer `g`, away from boundary ties).
//!
//! Label 0 is background; objects carry their own class index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{depth_to_pgm, labels_from_raw, labels_to_pgm, RawTensor};
use crate::tensor::{DepthMap, FeatureMap, LabelMap};

pub const BACKGROUND_LABEL: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    /// Annulus whose inner radius is half the outer radius.
    Ring,
}

impl Shape {
    /// Whether a point at pixel offset `(dy, dx)` from the projected center
    /// lies inside a shape of projected radius (or half side) `radius`.
    pub fn contains(self, dy: f64, dx: f64, radius: f64) -> bool {
        let r2 = dy * dy + dx * dx;
        match self {
            Shape::Disk => r2 <= radius * radius,
            Shape::Square => dy.abs() <= radius && dx.abs() <= radius,
            Shape::Ring => r2 <= radius * radius && r2 >= 0.25 * radius * radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Radius (disk, ring) or half side (square), millimeters.
    pub size_mm: f64,
    pub class: usize,
    /// Position in the camera plane relative to the optical axis, millimeters.
    pub center_mm: (f64, f64),
    pub distance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub focal_px: f64,
    pub background_mm: f64,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Principal point in pixel-center coordinates `(row, col)`.
    pub fn principal_point(&self) -> (f64, f64) {
        ((self.height / 2) as f64, (self.width / 2) as f64)
    }

    /// Projected center `(row, col)` and radius of an object, in pixels.
    pub fn project(&self, obj: &SceneObject) -> ((f64, f64), f64) {
        let (cy, cx) = self.principal_point();
        let scale = self.focal_px / obj.distance_mm;
        let (x, y) = obj.center_mm;
        ((cy + y * scale, cx + x * scale), obj.size_mm * scale)
    }
}

/// Rasterizes the scene. Nearer objects occlude farther ones; equal depths
/// keep the earlier object.
pub fn render(spec: &SceneSpec) -> Result<(DepthMap, LabelMap)> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    if !(spec.focal_px > 0.0 && spec.background_mm > 0.0) {
        return Err(Error::Config(
            "focal length and background depth must be positive".into(),
        ));
    }
    let mut depth = vec![spec.background_mm; spec.height * spec.width];
    let mut labels = vec![BACKGROUND_LABEL; spec.height * spec.width];
    for (k, obj) in spec.objects.iter().enumerate() {
        if !(obj.distance_mm > 0.0 && obj.distance_mm < spec.background_mm) {
            return Err(Error::Config(format!(
                "object {k}: distance {} mm outside (0, {})",
                obj.distance_mm, spec.background_mm
            )));
        }
        if obj.size_mm.is_nan() || obj.size_mm <= 0.0 {
            return Err(Error::Config(format!("object {k}: size must be positive")));
        }
        let ((py, px), radius) = spec.project(obj);
        let m0 = (py - radius).floor().max(0.0) as usize;
        let n0 = (px - radius).floor().max(0.0) as usize;
        let m1 = ((py + radius).ceil().max(-1.0) + 1.0).min(spec.height as f64) as usize;
        let n1 = ((px + radius).ceil().max(-1.0) + 1.0).min(spec.width as f64) as usize;
        let mut covered = 0usize;
        for m in m0..m1 {
            for n in n0..n1 {
                if !obj.shape.contains(m as f64 - py, n as f64 - px, radius) {
                    continue;
                }
                covered += 1;
                let i = m * spec.width + n;
                if obj.distance_mm < depth[i] {
                    depth[i] = obj.distance_mm;
                    labels[i] = obj.class;
                }
            }
        }
        if covered == 0 {
            return Err(Error::Config(format!(
                "object {k} projects to no pixels (radius {radius:.3} px)"
            )));
        }
    }
    Ok((
        DepthMap::from_vec(spec.height, spec.width, depth)?,
        LabelMap::new(spec.height, spec.width, labels, None)?,
    ))
}

/// Network input for a depth map: one channel of depth in meters.
pub fn intensity_input(depth: &DepthMap) -> FeatureMap {
    FeatureMap::from_vec(
        1,
        depth.height(),
        depth.width(),
        depth.depths().iter().map(|d| d / 1000.0).collect(),
    )
    .expect("depth maps hold finite values")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub count: usize,
    /// Inclusive object distance range, millimeters.
    pub distance_mm: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub focal_px: f64,
    pub background_mm: f64,
    /// Object radius / half side range, millimeters.
    pub size_mm: [f64; 2],
    /// Shapes in class order: the `k`-th shape gets class `k + 1`.
    #[serde(default = "default_shapes")]
    pub shapes: Vec<Shape>,
    #[serde(default = "default_objects")]
    pub objects_per_scene: usize,
    /// Keep projected objects at least this many pixels inside the border.
    #[serde(default)]
    pub margin_px: f64,
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test: SplitSpec,
}

fn default_shapes() -> Vec<Shape> {
    vec![Shape::Disk, Shape::Square, Shape::Ring]
}

fn default_objects() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl GenConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn split(&self, split: Split) -> &SplitSpec {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Number of label classes including background.
    pub fn classes(&self) -> usize {
        self.shapes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if !(self.focal_px > 0.0 && self.background_mm > 0.0) {
            return Err(Error::Config(
                "focal_px and background_mm must be positive".into(),
            ));
        }
        let [s0, s1] = self.size_mm;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Config(format!("invalid size range [{s0}, {s1}]")));
        }
        if self.shapes.is_empty() || self.objects_per_scene == 0 {
            return Err(Error::Config(
                "need at least one shape and one object per scene".into(),
            ));
        }
        for split in Split::ALL {
            let [d0, d1] = self.split(split).distance_mm;
            if !(d0 > 0.0 && d0 <= d1 && d1 < self.background_mm) {
                return Err(Error::Config(format!(
                    "{} split: distance range [{d0}, {d1}] must satisfy 0 < min ≤ max < background ({})",
                    split.name(),
                    self.background_mm
                )));
            }
        }
        Ok(())
    }

    /// Scene description for sample `index` of `split`, drawn from a stream
    /// that depends only on `(seed, split, index)`.
    pub fn scene(&self, seed: u64, split: Split, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split.stream() << 32) | index as u64);
        let [d0, d1] = self.split(split).distance_mm;
        let [s0, s1] = self.size_mm;
        let base = SceneSpec {
            height: self.height,
            width: self.width,
            focal_px: self.focal_px,
            background_mm: self.background_mm,
            objects: Vec::new(),
        };
        let (cy, cx) = base.principal_point();
        let objects = (0..self.objects_per_scene)
            .map(|_| {
                let k = rng.gen_range(0..self.shapes.len());
                let distance_mm = uniform(&mut rng, d0, d1);
                let size_mm = uniform(&mut rng, s0, s1);
                let radius = self.focal_px * size_mm / distance_mm;
                // place the projected center so the shape stays inside the frame when it fits
                let reach = radius + self.margin_px;
                let row = place(&mut rng, reach, self.height);
                let col = place(&mut rng, reach, self.width);
                SceneObject {
                    shape: self.shapes[k],
                    size_mm,
                    class: k + 1,
                    center_mm: (
                        (col - cx) * distance_mm / self.focal_px,
                        (row - cy) * distance_mm / self.focal_px,
                    ),
                    distance_mm,
                }
            })
            .collect();
        SceneSpec { objects, ..base }
    }

    /// Renders a whole split in memory, in index order.
    pub fn render_split(&self, seed: u64, split: Split) -> Result<Vec<RenderedScene>> {
        self.validate()?;
        (0..self.split(split).count)
            .into_par_iter()
            .map(|i| {
                let scene = self.scene(seed, split, i);
                let (depth, labels) = render(&scene)?;
                Ok(RenderedScene {
                    scene,
                    depth,
                    labels,
                })
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Integer pixel position for a center whose shape extends `reach` pixels.
fn place(rng: &mut ChaCha8Rng, reach: f64, extent: usize) -> f64 {
    let lo = reach.ceil();
    let hi = extent as f64 - 1.0 - reach.ceil();
    if hi >= lo {
        rng.gen_range(lo as i64..=hi as i64) as f64
    } else {
        (extent / 2) as f64
    }
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub scene: SceneSpec,
    pub depth: DepthMap,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub depth_file: String,
    pub label_file: String,
    pub object_distances_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub count: usize,
    pub distance_mm: [f64; 2],
    pub samples: Vec<SampleEntry>,
}

/// `manifest.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub shapes: Vec<Shape>,
    /// Mean over every pixel of every training depth map, millimeters.
    pub mean_depth: f64,
    pub std_depth: f64,
    pub train: SplitManifest,
    pub val: SplitManifest,
    pub test: SplitManifest,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn split(&self, split: Split) -> &SplitManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(root.as_ref().join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Human-readable summary line per split.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}x{} images, {} classes, mean depth {:.3} mm (std {:.3})\n",
            self.height, self.width, self.classes, self.mean_depth, self.std_depth
        );
        for split in Split::ALL {
            let m = self.split(split);
            s.push_str(&format!(
                "  {:<5} {:>5} samples, distances [{}, {}] mm\n",
                split.name(),
                m.count,
                m.distance_mm[0],
                m.distance_mm[1]
            ));
        }
        s
    }
}

/// Mean and population standard deviation over every pixel of `depths`.
pub fn depth_statistics<'a>(depths: impl IntoIterator<Item = &'a DepthMap>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for d in depths {
        for &v in d.depths() {
            n += 1;
            sum += v;
            sum_sq += v * v;
        }
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Renders all three splits and writes them under `out_dir`:
/// `<split>/<idx>_depth.dat1`, `<split>/<idx>_label.dat1` and `manifest.json`.
/// With `previews`, PGM images are written next to each sample.
pub fn generate_dataset(
    cfg: &GenConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
    previews: bool,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let root = out_dir.as_ref();
    fs::create_dir_all(root)?;
    let mut splits = Vec::new();
    let mut mean_std = (0.0, 0.0);
    for split in Split::ALL {
        let scenes = cfg.render_split(seed, split)?;
        if split == Split::Train && !scenes.is_empty() {
            mean_std = depth_statistics(scenes.iter().map(|s| &s.depth));
        }
        let dir = root.join(split.name());
        fs::create_dir_all(&dir)?;
        let samples = scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| write_sample(&dir, split, i, s, cfg.classes(), previews))
            .collect::<Result<Vec<_>>>()?;
        let spec = cfg.split(split);
        splits.push(SplitManifest {
            count: spec.count,
            distance_mm: spec.distance_mm,
            samples,
        });
    }
    if cfg.train.count == 0 {
        return Err(Error::Config(
            "the train split needs at least one sample".into(),
        ));
    }
    let [train, val, test]: [SplitManifest; 3] = splits.try_into().expect("three splits");
    let manifest = DatasetManifest {
        seed,
        height: cfg.height,
        width: cfg.width,
        classes: cfg.classes(),
        shapes: cfg.shapes.clone(),
        mean_depth: mean_std.0,
        std_depth: mean_std.1,
        train,
        val,
        test,
    };
    fs::write(
        root.join(DatasetManifest::FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

fn write_sample(
    dir: &Path,
    split: Split,
    index: usize,
    scene: &RenderedScene,
    classes: usize,
    previews: bool,
) -> Result<SampleEntry> {
    let depth_file = format!("{index:05}_depth.dat1");
    let label_file = format!("{index:05}_label.dat1");
    RawTensor::from(&scene.depth).save(dir.join(&depth_file))?;
    RawTensor::from(&scene.labels).save(dir.join(&label_file))?;
    if previews {
        depth_to_pgm(dir.join(format!("{index:05}_depth.pgm")), &scene.depth)?;
        labels_to_pgm(
            dir.join(format!("{index:05}_label.pgm")),
            &scene.labels,
            classes,
        )?;
    }
    Ok(SampleEntry {
        index,
        depth_file: format!("{}/{depth_file}", split.name()),
        label_file: format!("{}/{label_file}", split.name()),
        object_distances_mm: scene.scene.objects.iter().map(|o| o.distance_mm).collect(),
    })
}

/// Loads the depth and label maps of one split, in index order.
pub fn load_split(
    root: impl AsRef<Path>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<(DepthMap, LabelMap)>> {
    let root: PathBuf = root.as_ref().to_path_buf();
    manifest
        .split(split)
        .samples
        .par_iter()
        .map(|s| {
            let depth = DepthMap::try_from(RawTensor::load(root.join(&s.depth_file))?)?;
            let labels = labels_from_raw(RawTensor::load(root.join(&s.label_file))?, None)?;
            Ok((depth, labels))
        })
        .collect()
}
