//! Procedural scene generator with exact attribute and segmentation labels.
//!
//! A scene is a flat background plus one to three flat-colored shapes. Labels
//! are derived from the same analytic description that drives rasterization,
//! so they are exact by construction.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AttributeVector, Image, Mask, Rect, SegmentationMap};
use crate::error::{io_err, rejected, Error, Result};
use crate::{io, seed};
use semfill_nn::exec;

pub const NUM_ATTRIBUTES: usize = 18;
/// Background plus one class per shape kind.
pub const NUM_CLASSES: usize = 4;

pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "contains-circle",
    "contains-square",
    "contains-triangle",
    "two-or-more-objects",
    "three-objects",
    "background-dark",
    "background-light",
    "background-mid",
    "any-red-object",
    "any-green-object",
    "any-blue-object",
    "any-yellow-object",
    "large-object-present",
    "small-object-present",
    "object-in-top-half",
    "object-in-bottom-half",
    "object-in-left-half",
    "object-in-right-half",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Segmentation class of this shape (0 is background).
    pub fn class(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ObjectColor {
    pub const ALL: [ObjectColor; 4] = [
        ObjectColor::Red,
        ObjectColor::Green,
        ObjectColor::Blue,
        ObjectColor::Yellow,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ObjectColor::Red => [220, 40, 36],
            ObjectColor::Green => [46, 190, 56],
            ObjectColor::Blue => [40, 76, 224],
            ObjectColor::Yellow => [236, 216, 52],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Brightness {
    Dark,
    Mid,
    Light,
}

/// Background palette; ids 0-1 dark, 2-3 mid, 4-5 light.
pub const BACKGROUNDS: [[u8; 3]; 6] = [
    [26, 26, 31],
    [20, 31, 56],
    [128, 128, 128],
    [115, 133, 102],
    [224, 224, 219],
    [237, 224, 194],
];

pub fn background_brightness(id: u8) -> Brightness {
    match id {
        0 | 1 => Brightness::Dark,
        2 | 3 => Brightness::Mid,
        _ => Brightness::Light,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: ObjectColor,
    /// Center in pixel units (pixel `(y, x)` has center `(y + 0.5, x + 0.5)`).
    pub cx: f64,
    pub cy: f64,
    /// Diameter / side / base-and-height of the shape.
    pub size: f64,
}

impl SceneObject {
    /// Analytic membership test for a point in pixel units.
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let half = self.size / 2.0;
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            // apex up, base at the bottom of the bounding square
            ShapeKind::Triangle => {
                let depth = dy + half;
                (0.0..=self.size).contains(&depth) && dx.abs() <= depth / 2.0
            }
        }
    }
}

/// Analytic description of one scene. Later objects are drawn on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: u8,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    /// Ground-truth attribute bits, in [`ATTRIBUTE_NAMES`] order.
    pub fn attribute_bits(&self) -> [bool; NUM_ATTRIBUTES] {
        let h = self.height as f64;
        let w = self.width as f64;
        let any = |f: &dyn Fn(&SceneObject) -> bool| self.objects.iter().any(f);
        let bg = background_brightness(self.background);
        [
            any(&|o| o.kind == ShapeKind::Circle),
            any(&|o| o.kind == ShapeKind::Square),
            any(&|o| o.kind == ShapeKind::Triangle),
            self.objects.len() >= 2,
            self.objects.len() == 3,
            bg == Brightness::Dark,
            bg == Brightness::Light,
            bg == Brightness::Mid,
            any(&|o| o.color == ObjectColor::Red),
            any(&|o| o.color == ObjectColor::Green),
            any(&|o| o.color == ObjectColor::Blue),
            any(&|o| o.color == ObjectColor::Yellow),
            any(&|o| o.size > 0.3 * h),
            any(&|o| o.size < 0.15 * h),
            any(&|o| o.cy < h / 2.0),
            any(&|o| o.cy >= h / 2.0),
            any(&|o| o.cx < w / 2.0),
            any(&|o| o.cx >= w / 2.0),
        ]
    }

    /// Index of the topmost object covering pixel `(y, x)`.
    pub fn topmost(&self, y: usize, x: usize) -> Option<usize> {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.objects.iter().rposition(|o| o.covers(px, py))
    }

    pub fn render(&self) -> (Image, SegmentationMap) {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut pixels = vec![0.0f32; 3 * plane];
        let mut labels = vec![0u8; plane];
        let bg = BACKGROUNDS[self.background as usize];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let rgb = match self.topmost(y, x) {
                    Some(k) => {
                        let o = &self.objects[k];
                        labels[i] = o.kind.class();
                        o.color.rgb()
                    }
                    None => bg,
                };
                for c in 0..3 {
                    pixels[c * plane + i] = rgb[c] as f32 / 255.0;
                }
            }
        }
        (
            Image::new(h, w, pixels).expect("canvas validated by caller"),
            SegmentationMap::new(h, w, NUM_CLASSES, labels).expect("labels below class count"),
        )
    }
}

/// Recomputes attribute bits using shape presence from a rendered label map
/// and everything else from the scene description.
pub fn attributes_from_labels(spec: &SceneSpec, seg: &SegmentationMap) -> [bool; NUM_ATTRIBUTES] {
    let mut bits = spec.attribute_bits();
    for kind in ShapeKind::ALL {
        bits[kind.class() as usize - 1] = seg.labels().contains(&kind.class());
    }
    bits
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub attributes: AttributeVector,
    pub segmentation: SegmentationMap,
    pub scene: SceneSpec,
}

fn check_canvas(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(rejected(format!(
            "canvas must be at least 32x32 with sides divisible by 4, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Smallest share of an object's own area that must stay visible.
const MIN_VISIBLE_FRACTION: f64 = 0.25;

fn sample_spec<R: Rng>(rng: &mut R, h: usize, w: usize, seed: u64) -> SceneSpec {
    let side = h.min(w) as f64;
    let count = rng.random_range(1..=3);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    while objects.len() < count {
        let size = rng.random_range(0.1 * side..=0.4 * side);
        let half = size / 2.0;
        let cx = rng.random_range(half..=w as f64 - half);
        let cy = rng.random_range(half..=h as f64 - half);
        let clear = objects.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d >= o.size.max(size) / 2.0
        });
        if clear {
            objects.push(SceneObject {
                kind: ShapeKind::ALL[rng.random_range(0..3)],
                color: ObjectColor::ALL[rng.random_range(0..4)],
                cx,
                cy,
                size,
            });
        }
    }
    SceneSpec {
        height: h,
        width: w,
        background: rng.random_range(0..BACKGROUNDS.len() as u8),
        objects,
        seed,
    }
}

fn visible_enough(spec: &SceneSpec, seg_owner: &[Option<usize>]) -> bool {
    let mut own = vec![0usize; spec.objects.len()];
    let mut visible = vec![0usize; spec.objects.len()];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (k, o) in spec.objects.iter().enumerate() {
                if o.covers(px, py) {
                    own[k] += 1;
                }
            }
            if let Some(k) = seg_owner[y * spec.width + x] {
                visible[k] += 1;
            }
        }
    }
    own.iter()
        .zip(&visible)
        .all(|(&o, &v)| o > 0 && v as f64 >= MIN_VISIBLE_FRACTION * o as f64)
}

/// Generates one labeled scene; identical seeds give identical samples.
pub fn generate_scene(seed: u64, canvas: (usize, usize)) -> Result<LabeledSample> {
    let (h, w) = canvas;
    check_canvas(h, w)?;
    let mut rng = seed::rng(seed);
    let spec = loop {
        let spec = sample_spec(&mut rng, h, w, seed);
        let owners: Vec<Option<usize>> = (0..h * w).map(|i| spec.topmost(i / w, i % w)).collect();
        if visible_enough(&spec, &owners) {
            break spec;
        }
    };
    let (image, segmentation) = spec.render();
    Ok(LabeledSample {
        image,
        attributes: AttributeVector::from_bits(&spec.attribute_bits()),
        segmentation,
        scene: spec,
    })
}

/// Hole side range for a canvas side, as fractions 0.3125..=0.625 of it.
pub fn mask_side_range(side: usize) -> (usize, usize) {
    let lo = (side as f64 * 0.3125).ceil() as usize;
    let hi = (side as f64 * 0.625).floor() as usize;
    (lo, hi.max(lo))
}

/// Random rectangular hole of random size, fully inside the canvas.
pub fn sample_mask(seed: u64, canvas: (usize, usize)) -> Result<Mask> {
    let (h, w) = canvas;
    if h < 32 || w < 32 {
        return Err(rejected(format!("canvas {h}x{w} smaller than 32x32")));
    }
    let mut rng = seed::rng(seed);
    let (hlo, hhi) = mask_side_range(h);
    let (wlo, whi) = mask_side_range(w);
    let height = rng.random_range(hlo..=hhi);
    let width = rng.random_range(wlo..=whi);
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    Mask::new(
        h,
        w,
        Rect {
            top,
            left,
            height,
            width,
        },
    )
}

/// Centered hole covering `fraction` of each side.
pub fn center_mask(canvas: (usize, usize), fraction: f64) -> Result<Mask> {
    let (h, w) = canvas;
    let height = (h as f64 * fraction).round() as usize;
    let width = (w as f64 * fraction).round() as usize;
    Mask::new(
        h,
        w,
        Rect {
            top: (h - height) / 2,
            left: (w - width) / 2,
            height,
            width,
        },
    )
}

/// Which of the three disjoint seed ranges a dataset draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    /// d0, the inpainting set.
    Inpainting,
    /// d1, auxiliary attribute-labeled set.
    Attributes,
    /// d2, auxiliary segmentation-labeled set.
    Segmentation,
}

impl DatasetRole {
    fn tag(self) -> u64 {
        match self {
            DatasetRole::Inpainting => 1,
            DatasetRole::Attributes => 2,
            DatasetRole::Segmentation => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inpainting" | "d0" => Ok(Self::Inpainting),
            "attributes" | "d1" => Ok(Self::Attributes),
            "segmentation" | "d2" => Ok(Self::Segmentation),
            other => Err(rejected(format!("unknown dataset role `{other}`"))),
        }
    }
}

/// Seed of sample `index`. The role occupies the top byte so the three
/// roles never share a scene seed.
pub fn scene_seed(role: DatasetRole, root: u64, index: usize) -> u64 {
    (role.tag() << 56)
        | (seed::splitmix64(root) & 0x00ff_ffff_0000_0000)
        | (index as u64 & 0xffff_ffff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fixed 0.8 / 0.1 / 0.1 split by sample index.
pub fn split_of(index: usize, n: usize) -> Split {
    let train = n * 8 / 10;
    let val = n * 9 / 10;
    if index < train {
        Split::Train
    } else if index < val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub canvas: (usize, usize),
    pub seed: u64,
    pub role: DatasetRole,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    attributes: Vec<u8>,
    split: Split,
    scene: SceneSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    n: usize,
    seed: u64,
    role: DatasetRole,
    height: usize,
    width: usize,
    attributes: Vec<String>,
    classes: usize,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

impl Dataset {
    /// Generates `n` samples in memory.
    pub fn generate(
        n: usize,
        seed: u64,
        canvas: (usize, usize),
        role: DatasetRole,
    ) -> Result<Self> {
        if n == 0 {
            return Err(rejected("dataset size must be at least 1"));
        }
        check_canvas(canvas.0, canvas.1)?;
        let samples = exec::map(n, |i| generate_scene(scene_seed(role, seed, i), canvas))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            canvas,
            seed,
            role,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let n = self.len();
        (0..n).filter(|&i| split_of(i, n) == split).collect()
    }

    /// Writes `images/{id}.png`, `segs/{id}.pgm`, `manifest.jsonl` and
    /// `dataset.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
        fs::create_dir_all(dir.join("segs")).map_err(io_err(dir))?;
        let n = self.len();
        let results = exec::map(n, |i| {
            let s = &self.samples[i];
            let id = sample_id(i);
            io::save_png(&s.image, &dir.join("images").join(format!("{id}.png")))?;
            io::save_pgm(&s.segmentation, &dir.join("segs").join(format!("{id}.pgm")))
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;

        let manifest_path = dir.join("manifest.jsonl");
        let mut out = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let rec = ManifestRecord {
                id: sample_id(i),
                attributes: s.attributes.bits().iter().map(|&b| b as u8).collect(),
                split: split_of(i, n),
                scene: s.scene.clone(),
            };
            serde_json::to_writer(&mut out, &rec).expect("manifest record serializes");
            out.push(b'\n');
        }
        fs::File::create(&manifest_path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(io_err(&manifest_path))?;

        let meta = DatasetMeta {
            n,
            seed: self.seed,
            role: self.role,
            height: self.canvas.0,
            width: self.canvas.1,
            attributes: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
            classes: NUM_CLASSES,
        };
        let meta_path = dir.join("dataset.json");
        fs::write(
            &meta_path,
            serde_json::to_vec_pretty(&meta).expect("meta serializes"),
        )
        .map_err(io_err(&meta_path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dataset.json");
        let meta: DatasetMeta = serde_json::from_slice(
            &fs::read(&meta_path).map_err(io_err(&meta_path))?,
        )
        .map_err(|e| Error::Parse {
            path: meta_path.clone(),
            msg: e.to_string(),
        })?;
        let manifest_path = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<ManifestRecord>(l).map_err(|e| Error::Parse {
                    path: manifest_path.clone(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if records.len() != meta.n {
            return Err(Error::Parse {
                path: manifest_path,
                msg: format!("expected {} records, found {}", meta.n, records.len()),
            });
        }
        let samples = exec::map(records.len(), |i| {
            let rec = &records[i];
            let image = io::load_png(&dir.join("images").join(format!("{}.png", rec.id)))?;
            let segmentation = io::load_pgm(
                &dir.join("segs").join(format!("{}.pgm", rec.id)),
                meta.classes,
            )?;
            let bits: Vec<bool> = rec.attributes.iter().map(|&b| b != 0).collect();
            Ok(LabeledSample {
                image,
                attributes: AttributeVector::from_bits(&bits),
                segmentation,
                scene: rec.scene.clone(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            canvas: (meta.height, meta.width),
            seed: meta.seed,
            role: meta.role,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(42, (64, 64)).unwrap();
        let b = generate_scene(42, (64, 64)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, (64, 64)).unwrap());
    }

    #[test]
    fn single_red_circle_attributes() {
        let spec = SceneSpec {
            height: 64,
            width: 64,
            background: 0,
            objects: vec![SceneObject {
                kind: ShapeKind::Circle,
                color: ObjectColor::Red,
                cx: 20.0,
                cy: 20.0,
                size: 16.0,
            }],
            seed: 0,
        };
        let bits = spec.attribute_bits();
        assert!(bits[0] && !bits[1] && !bits[2]);
        assert!(bits[8] && !bits[9] && !bits[10] && !bits[11]);
        assert!(bits[5] && !bits[6] && !bits[7]);
        assert!(!bits[3] && !bits[12] && !bits[13]);
        assert!(bits[14] && !bits[15] && bits[16] && !bits[17]);
    }

    #[test]
    fn rejects_small_or_odd_canvas() {
        assert!(generate_scene(1, (16, 16)).is_err());
        assert!(generate_scene(1, (34, 64)).is_err());
        assert!(sample_mask(1, (16, 64)).is_err());
    }

    #[test]
    fn labels_agree_with_scene() {
        for s in 0..200u64 {
            let sample = generate_scene(seed::derive_index(11, s), (64, 64)).unwrap();
            let recomputed = attributes_from_labels(&sample.scene, &sample.segmentation);
            assert_eq!(AttributeVector::from_bits(&recomputed), sample.attributes);
            assert!((1..=3).contains(&sample.scene.objects.len()));
        }
    }

    #[test]
    fn mask_sides_on_256_canvas() {
        assert_eq!(mask_side_range(256), (80, 160));
        assert_eq!(mask_side_range(64), (20, 40));
        for s in 0..500 {
            let r = sample_mask(s, (256, 256)).unwrap().rect();
            assert!((80..=160).contains(&r.height) && (80..=160).contains(&r.width));
        }
    }

    #[test]
    fn mask_sides_on_64_canvas_cover_range() {
        let mut seen_h = std::collections::BTreeSet::new();
        for s in 0..10_000 {
            let r = sample_mask(s, (64, 64)).unwrap().rect();
            assert!((20..=40).contains(&r.height) && (20..=40).contains(&r.width));
            assert!(r.top + r.height <= 64 && r.left + r.width <= 64);
            seen_h.insert(r.height);
        }
        assert_eq!(seen_h.len(), 21);
    }

    #[test]
    fn center_mask_is_half_the_side() {
        let r = center_mask((64, 64), 0.5).unwrap().rect();
        assert_eq!((r.top, r.left, r.height, r.width), (16, 16, 32, 32));
    }

    #[test]
    fn split_sizes() {
        let count = |n: usize, s: Split| (0..n).filter(|&i| split_of(i, n) == s).count();
        assert_eq!(
            (
                count(1000, Split::Train),
                count(1000, Split::Val),
                count(1000, Split::Test)
            ),
            (800, 100, 100)
        );
        assert_eq!(
            (
                count(10, Split::Train),
                count(10, Split::Val),
                count(10, Split::Test)
            ),
            (8, 1, 1)
        );
    }

    #[test]
    fn seed_ranges_are_disjoint() {
        let roles = [
            DatasetRole::Inpainting,
            DatasetRole::Attributes,
            DatasetRole::Segmentation,
        ];
        for (a, ra) in roles.iter().enumerate() {
            for rb in &roles[a + 1..] {
                assert_ne!(scene_seed(*ra, 5, 17) >> 56, scene_seed(*rb, 5, 17) >> 56);
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_stable_manifest() {
        let ds = Dataset::generate(10, 3, (32, 32), DatasetRole::Inpainting).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        ds.save(a.path()).unwrap();
        Dataset::generate(10, 3, (32, 32), DatasetRole::Inpainting)
            .unwrap()
            .save(b.path())
            .unwrap();
        let ma = fs::read(a.path().join("manifest.jsonl")).unwrap();
        let mb = fs::read(b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
        let back = Dataset::load(a.path()).unwrap();
        for (x, y) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(x.scene, y.scene, "scene");
            assert_eq!(x.attributes, y.attributes, "attr");
            assert_eq!(x.segmentation, y.segmentation, "seg");
            let d = x
                .image
                .pixels()
                .iter()
                .zip(y.image.pixels())
                .position(|(p, q)| p != q);
            assert_eq!(
                d,
                None,
                "{:?}",
                d.map(|i| (x.image.pixels()[i], y.image.pixels()[i]))
            );
        }
        assert_eq!(back, ds);
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let ds = Dataset::generate(1, 0, (32, 32), DatasetRole::Inpainting).unwrap();
        assert!(matches!(ds.save(&file.join("sub")), Err(Error::Io { .. })));
    }
}
