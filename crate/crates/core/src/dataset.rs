//! Labeled image ingestion: CSV manifests, deterministic splits, batching,
//! binary task views and the synthetic band-image generator used as the
//! canonical fixture.
//!
//! Synthetic parameter table (fractions of image height `H`, colours in RGB):
//!
//! | label                  | parameter                         | range                |
//! |------------------------|-----------------------------------|----------------------|
//! | keratin thin           | top band height                   | floor(U[0.08,0.14]·H) |
//! | keratin thick          | top band height                   | ceil(U[0.30,0.38]·H) |
//! | basketweave            | vertical stripe cycles across W   | {2, 3, 4}            |
//! | parakeratosis          | vertical stripe cycles across W   | {10, …, 14}          |
//! | dysplasia mild         | epidermis colour                  | (200,120,185)        |
//! | dysplasia full         | epidermis colour                  | (120, 50,130)        |
//! | dermis normal          | dermis colour                     | (235,150,180)        |
//! | dermis solar damage    | dermis colour                     | (165,150,205)        |
//! | dermis inflammation    | dermis colour                     | (210, 95,120)        |
//!
//! The epidermis band height is `round(U[0.30,0.38]·H)`, the dermis fills
//! the rest. Keratin colour is (238,190,215) modulated by a ±25 sinusoid.
//! Every colour gets a per-image jitter of ±6 per channel and every pixel
//! uniform noise of ±6.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use image::RgbImage;
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} value `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_enum!(KeratinThickness { Thin => "thin", Thick => "thick" });
label_enum!(KeratinType { Basketweave => "basketweave", Parakeratosis => "parakeratosis" });
label_enum!(Dysplasia { Mild => "mild", FullThickness => "full_thickness" });
label_enum!(Dermis { Normal => "normal", SolarDamage => "solar_damage", Inflammation => "inflammation" });
label_enum!(Split { Train => "train", Val => "val", Test => "test" });

pub const MANIFEST_HEADER: [&str; 7] = [
    "id",
    "path",
    "keratin_thickness",
    "keratin_type",
    "dysplasia",
    "dermis",
    "split",
];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub keratin_thickness: KeratinThickness,
    pub keratin_type: KeratinType,
    pub dysplasia: Dysplasia,
    pub dermis: Dermis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub labels: Labels,
    pub split: Split,
}

/// Parses manifest CSV text without touching the filesystem. Paths are
/// returned exactly as written.
pub fn parse_manifest(reader: impl Read) -> Result<Vec<ImageRecord>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = csv.headers().map_err(|e| Error::Manifest {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Manifest {
            line: 1,
            message: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in csv.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::Manifest { line, message };
        if row.len() != MANIFEST_HEADER.len() {
            return Err(bad(format!("expected 7 fields, found {}", row.len())));
        }
        let id = row[0].trim();
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        records.push(ImageRecord {
            id: id.to_string(),
            image_path: PathBuf::from(&row[1]),
            labels: Labels {
                keratin_thickness: row[2].trim().parse().map_err(bad)?,
                keratin_type: row[3].trim().parse().map_err(bad)?,
                dysplasia: row[4].trim().parse().map_err(bad)?,
                dermis: row[5].trim().parse().map_err(bad)?,
            },
            split: row[6].trim().parse().map_err(bad)?,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(records)
}

/// Loads a manifest and resolves image paths against `root`. Every image
/// must exist.
pub fn load_manifest(root: &Path, manifest: &Path) -> Result<Vec<ImageRecord>> {
    let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut records = parse_manifest(file)?;
    let mut missing = Vec::new();
    for r in &mut records {
        r.image_path = root.join(&r.image_path);
        if !r.image_path.is_file() {
            missing.push(r.id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingImages { ids: missing });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        what: "manifest",
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Format {
        what: "manifest",
        message: e.to_string(),
    };
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            &r.image_path.to_string_lossy(),
            r.labels.keratin_thickness.as_str(),
            r.labels.keratin_type.as_str(),
            r.labels.dysplasia.as_str(),
            r.labels.dermis.as_str(),
            r.split.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stable digest of ids, labels and splits, independent of row order.
pub fn fingerprint(records: &[ImageRecord]) -> [u8; 32] {
    let mut rows: Vec<String> = records
        .iter()
        .map(|r| {
            format!(
                "{}|{}|{}|{}|{}|{}",
                r.id,
                r.labels.keratin_thickness,
                r.labels.keratin_type,
                r.labels.dysplasia,
                r.labels.dermis,
                r.split
            )
        })
        .collect();
    rows.sort();
    let mut h = Sha256::new();
    for row in rows {
        h.update(row.as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1 }
    }
}

/// Deterministic split from `(id, seed)` alone.
pub fn assign_split(id: &str, seed: u64, fractions: SplitFractions) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let u = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64);
    if u < fractions.train {
        Split::Train
    } else if u < fractions.train + fractions.val {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn records_in_split(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

label_enum!(
    /// The five binary classification tasks on the simplified labels.
    BinaryTask {
        ThinVsThick => "thin_vs_thick",
        BasketweaveVsParakeratosis => "basketweave_vs_parakeratosis",
        MildVsFull => "mild_vs_full",
        NormalVsSolar => "normal_vs_solar",
        NormalVsInflammation => "normal_vs_inflammation",
    }
);

impl BinaryTask {
    /// `Some(true)` for the positive class, `None` when the record does not
    /// take part in the task.
    pub fn label(&self, labels: &Labels) -> Option<bool> {
        match self {
            BinaryTask::ThinVsThick => Some(labels.keratin_thickness == KeratinThickness::Thick),
            BinaryTask::BasketweaveVsParakeratosis => Some(labels.keratin_type == KeratinType::Parakeratosis),
            BinaryTask::MildVsFull => Some(labels.dysplasia == Dysplasia::FullThickness),
            BinaryTask::NormalVsSolar => match labels.dermis {
                Dermis::Normal => Some(false),
                Dermis::SolarDamage => Some(true),
                Dermis::Inflammation => None,
            },
            BinaryTask::NormalVsInflammation => match labels.dermis {
                Dermis::Normal => Some(false),
                Dermis::Inflammation => Some(true),
                Dermis::SolarDamage => None,
            },
        }
    }

    pub fn positive_class(&self) -> &'static str {
        match self {
            BinaryTask::ThinVsThick => "thick",
            BinaryTask::BasketweaveVsParakeratosis => "parakeratosis",
            BinaryTask::MildVsFull => "full_thickness",
            BinaryTask::NormalVsSolar => "solar_damage",
            BinaryTask::NormalVsInflammation => "inflammation",
        }
    }

    pub fn negative_class(&self) -> &'static str {
        match self {
            BinaryTask::ThinVsThick => "thin",
            BinaryTask::BasketweaveVsParakeratosis => "basketweave",
            BinaryTask::MildVsFull => "mild",
            BinaryTask::NormalVsSolar | BinaryTask::NormalVsInflammation => "normal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryTaskView {
    pub task: BinaryTask,
    pub positive_class: &'static str,
    /// `(index into the source records, label)`
    pub records: Vec<(usize, bool)>,
}

impl BinaryTaskView {
    pub fn new(task: BinaryTask, records: &[ImageRecord]) -> Self {
        BinaryTaskView {
            task,
            positive_class: task.positive_class(),
            records: records
                .iter()
                .enumerate()
                .filter_map(|(i, r)| task.label(&r.labels).map(|l| (i, l)))
                .collect(),
        }
    }

    pub fn has_both_classes(&self) -> bool {
        self.records.iter().any(|r| r.1) && self.records.iter().any(|r| !r.1)
    }
}

#[inline]
pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Rank-4 `(batch, H, W, 3)` array with values in [-1, 1], `H == W` a power
/// of two no smaller than 8.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array4<f32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (_, h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::shape(format!("images need 3 channels, got {c}")));
        }
        if h != w || h < 8 || !h.is_power_of_two() {
            return Err(Error::shape(format!("images must be square power-of-two >= 8, got {h}x{w}")));
        }
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [-1, 1]"));
        }
        Ok(ImageBatch { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.data.dim().1
    }
}

pub fn image_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        normalize_pixel(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn array_to_image(a: ArrayView3<'_, f32>) -> RgbImage {
    let (h, w, _) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            denormalize_pixel(a[[y, x, 0]]),
            denormalize_pixel(a[[y, x, 1]]),
            denormalize_pixel(a[[y, x, 2]]),
        ])
    })
}

/// Reads a PNG as 8-bit RGB, resizing to `resolution` when it differs.
pub fn load_image(path: &Path, resolution: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != resolution || rgb.height() as usize != resolution {
        rgb = image::imageops::resize(
            &rgb,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        );
    }
    Ok(image_to_array(&rgb))
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Format {
            what: "png",
            message: e.to_string(),
        })
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory png encoding");
    out.into_inner()
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)).map_err(|e| Error::io(path, e))
}

/// Tiles a batch into a near-square grid image.
pub fn grid_image(batch: &Array4<f32>) -> RgbImage {
    let (n, h, w, _) = batch.dim();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let mut out = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..n {
        let tile = array_to_image(batch.index_axis(Axis(0), i));
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        image::imageops::replace(&mut out, &tile, ox as i64, oy as i64);
    }
    out
}

/// Per-epoch permutation, a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Disk-backed batch stream. The final short batch is emitted.
pub struct BatchStream {
    records: Vec<ImageRecord>,
    order: Vec<usize>,
    batch_size: usize,
    resolution: usize,
    cursor: usize,
}

impl Iterator for BatchStream {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let mut data = Array4::zeros((idx.len(), self.resolution, self.resolution, 3));
        for (slot, &i) in idx.iter().enumerate() {
            match load_image(&self.records[i].image_path, self.resolution) {
                Ok(img) => data.index_axis_mut(Axis(0), slot).assign(&img),
                Err(e) => return Some(Err(e)),
            }
        }
        Some(ImageBatch::new(data))
    }
}

impl BatchStream {
    /// Moves decoding to a background thread with a bounded queue; the
    /// consumer still sees batches in order.
    pub fn prefetch(self, capacity: usize) -> impl Iterator<Item = Result<ImageBatch>> {
        prefetch(self, capacity)
    }
}

pub fn make_batches(
    records: &[ImageRecord],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    resolution: usize,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::invalid(format!("resolution {resolution} is not a power of two >= 8")));
    }
    Ok(BatchStream {
        records: records.to_vec(),
        order: epoch_order(records.len(), seed, epoch),
        batch_size,
        resolution,
        cursor: 0,
    })
}

pub fn prefetch<I>(iter: I, capacity: usize) -> impl Iterator<Item = I::Item>
where
    I: Iterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = mpsc::sync_channel(capacity.max(1));
    std::thread::spawn(move || {
        for item in iter {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}

/// Decoded images held in memory, in record order.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub images: Array4<f32>,
}

impl ImageSet {
    pub fn load(records: &[ImageRecord], resolution: usize) -> Result<Self> {
        let mut images = Array4::zeros((records.len(), resolution, resolution, 3));
        for (i, r) in records.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), i)
                .assign(&load_image(&r.image_path, resolution)?);
        }
        Ok(ImageSet {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            images: self.images.select(Axis(0), idx),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.dim().1
    }

    /// Shuffled batches for one epoch; same permutation as [`make_batches`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Array4<f32>> + '_ {
        let order = epoch_order(self.len(), seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |idx| self.images.select(Axis(0), &idx))
    }

    /// Sequential batches in record order.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = Array4<f32>> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |start| {
            let end = (start + batch_size).min(n);
            self.images.slice(s![start..end, .., .., ..]).to_owned()
        })
    }
}

// ---------------------------------------------------------------------------
// synthetic data

pub const SYNTHETIC_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];

const KERATIN_RGB: [f64; 3] = [238.0, 190.0, 215.0];
const EPI_MILD_RGB: [f64; 3] = [200.0, 120.0, 185.0];
const EPI_FULL_RGB: [f64; 3] = [120.0, 50.0, 130.0];
const DERMIS_NORMAL_RGB: [f64; 3] = [235.0, 150.0, 180.0];
const DERMIS_SOLAR_RGB: [f64; 3] = [165.0, 150.0, 205.0];
const DERMIS_INFLAMMATION_RGB: [f64; 3] = [210.0, 95.0, 120.0];
const STRIPE_AMPLITUDE: f64 = 25.0;
const COLOUR_JITTER: f64 = 6.0;
const PIXEL_NOISE: f64 = 6.0;

/// Rendering parameters of one synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct BandGeometry {
    pub keratin_rows: usize,
    pub epidermis_rows: usize,
    pub stripe_cycles: usize,
}

fn sample_labels(rng: &mut impl Rng) -> Labels {
    Labels {
        keratin_thickness: *KeratinThickness::ALL.choose(rng).expect("non-empty"),
        keratin_type: *KeratinType::ALL.choose(rng).expect("non-empty"),
        dysplasia: *Dysplasia::ALL.choose(rng).expect("non-empty"),
        dermis: *Dermis::ALL.choose(rng).expect("non-empty"),
    }
}

fn sample_geometry(labels: &Labels, resolution: usize, rng: &mut impl Rng) -> BandGeometry {
    let h = resolution as f64;
    let keratin_rows = match labels.keratin_thickness {
        KeratinThickness::Thin => ((rng.random_range(0.08..0.14) * h).floor() as usize).max(1),
        KeratinThickness::Thick => (rng.random_range(0.30..0.38) * h).ceil() as usize,
    };
    let epidermis_rows = (rng.random_range(0.30..0.38) * h).round() as usize;
    let stripe_cycles = match labels.keratin_type {
        KeratinType::Basketweave => rng.random_range(2..=4),
        KeratinType::Parakeratosis => rng.random_range(10..=14),
    };
    BandGeometry {
        keratin_rows,
        epidermis_rows,
        stripe_cycles,
    }
}

fn epidermis_rgb(d: Dysplasia) -> [f64; 3] {
    match d {
        Dysplasia::Mild => EPI_MILD_RGB,
        Dysplasia::FullThickness => EPI_FULL_RGB,
    }
}

fn dermis_rgb(d: Dermis) -> [f64; 3] {
    match d {
        Dermis::Normal => DERMIS_NORMAL_RGB,
        Dermis::SolarDamage => DERMIS_SOLAR_RGB,
        Dermis::Inflammation => DERMIS_INFLAMMATION_RGB,
    }
}

/// Renders one synthetic image; a pure function of its inputs.
pub fn render_synthetic(labels: &Labels, resolution: usize, seed: u64) -> (RgbImage, BandGeometry) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = sample_geometry(labels, resolution, &mut rng);
    let mut jitter = |base: [f64; 3]| base.map(|c| c + rng.random_range(-COLOUR_JITTER..=COLOUR_JITTER));
    let keratin = jitter(KERATIN_RGB);
    let epi = jitter(epidermis_rgb(labels.dysplasia));
    let dermis = jitter(dermis_rgb(labels.dermis));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let r = resolution as u32;
    let mut img = RgbImage::new(r, r);
    for y in 0..resolution {
        for x in 0..resolution {
            let colour = if y < geo.keratin_rows {
                let t = std::f64::consts::TAU * geo.stripe_cycles as f64 * x as f64 / resolution as f64 + phase;
                keratin.map(|c| c + STRIPE_AMPLITUDE * t.sin())
            } else if y < geo.keratin_rows + geo.epidermis_rows {
                epi
            } else {
                dermis
            };
            let px = colour.map(|c| (c + rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    (img, geo)
}

fn check_synthetic_args(n: usize, resolution: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    if !SYNTHETIC_RESOLUTIONS.contains(&resolution) {
        return Err(Error::invalid(format!(
            "synthetic resolution must be one of {SYNTHETIC_RESOLUTIONS:?}, got {resolution}"
        )));
    }
    Ok(())
}

/// The `(id, labels, image)` sequence shared by the on-disk and in-memory
/// generators.
fn synthetic_samples(n: usize, resolution: usize, seed: u64) -> impl Iterator<Item = (String, Labels, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(move |i| {
        let labels = sample_labels(&mut rng);
        let image_seed: u64 = rng.random();
        let (img, _) = render_synthetic(&labels, resolution, image_seed);
        (format!("syn_{i:05}"), labels, img)
    })
}

/// Writes `n` synthetic images plus `manifest.csv` into `out_dir` and
/// returns the manifest path. Splits are drawn from a hash of each id.
pub fn generate_synthetic_dataset(
    n: usize,
    resolution: usize,
    seed: u64,
    fractions: SplitFractions,
    out_dir: &Path,
) -> Result<PathBuf> {
    check_synthetic_args(n, resolution)?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for (id, labels, img) in synthetic_samples(n, resolution, seed) {
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        save_png(&img, &out_dir.join(&rel))?;
        records.push(ImageRecord {
            split: assign_split(&id, seed, fractions),
            id,
            image_path: rel,
            labels,
        });
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// The same images and labels as [`generate_synthetic_dataset`], without
/// touching the filesystem.
pub fn synthetic_in_memory(n: usize, resolution: usize, seed: u64) -> Result<(Vec<Labels>, ImageSet)> {
    check_synthetic_args(n, resolution)?;
    let mut images = Array4::zeros((n, resolution, resolution, 3));
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, (id, l, img)) in synthetic_samples(n, resolution, seed).enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&image_to_array(&img));
        ids.push(id);
        labels.push(l);
    }
    Ok((labels, ImageSet { ids, images }))
}

fn nearest(colour: [f64; 3], prototypes: &[[f64; 3]]) -> usize {
    let dist = |p: &[f64; 3]| (0..3).map(|i| (colour[i] - p[i]).powi(2)).sum::<f64>();
    (0..prototypes.len())
        .min_by(|&a, &b| dist(&prototypes[a]).total_cmp(&dist(&prototypes[b])))
        .expect("non-empty prototypes")
}

/// Rule-based reader: recovers the labels of a synthetic image from its band
/// geometry, stripe spectrum and band colours.
pub fn read_synthetic_labels(img: &RgbImage) -> (Labels, BandGeometry) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let row_mean = |y: usize| -> [f64; 3] {
        let mut acc = [0.0; 3];
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        acc.map(|v| v / w as f64)
    };
    let all = [
        KERATIN_RGB,
        EPI_MILD_RGB,
        EPI_FULL_RGB,
        DERMIS_NORMAL_RGB,
        DERMIS_SOLAR_RGB,
        DERMIS_INFLAMMATION_RGB,
    ];
    let keratin_rows = (0..h).take_while(|&y| nearest(row_mean(y), &all) == 0).count().max(1);
    let epidermis_rows = (keratin_rows..h)
        .take_while(|&y| matches!(nearest(row_mean(y), &all), 1 | 2))
        .count();

    // dominant stripe frequency of the column profile inside the keratin band
    let profile: Vec<f64> = (0..w)
        .map(|x| {
            (0..keratin_rows)
                .map(|y| {
                    let p = img.get_pixel(x as u32, y as u32);
                    (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
                })
                .sum::<f64>()
                / keratin_rows as f64
        })
        .collect();
    let stripe_cycles = (1..=w / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (x, v) in profile.iter().enumerate() {
                let t = std::f64::consts::TAU * (k * x) as f64 / w as f64;
                re += v * t.cos();
                im += v * t.sin();
            }
            (k, re * re + im * im)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);

    let band_mean = |rows: std::ops::Range<usize>| -> [f64; 3] {
        let len = rows.len().max(1) as f64;
        rows.map(row_mean)
            .fold([0.0; 3], |a, m| [a[0] + m[0], a[1] + m[1], a[2] + m[2]])
            .map(|v| v / len)
    };
    let epi = band_mean(keratin_rows..keratin_rows + epidermis_rows.max(1));
    let dermis_start = (keratin_rows + epidermis_rows).min(h - 1);
    let dermis = band_mean(dermis_start..h);

    let labels = Labels {
        keratin_thickness: if (keratin_rows as f64) / (h as f64) > 0.2 {
            KeratinThickness::Thick
        } else {
            KeratinThickness::Thin
        },
        keratin_type: if stripe_cycles <= 7 {
            KeratinType::Basketweave
        } else {
            KeratinType::Parakeratosis
        },
        dysplasia: [Dysplasia::Mild, Dysplasia::FullThickness][nearest(epi, &[EPI_MILD_RGB, EPI_FULL_RGB])],
        dermis: [Dermis::Normal, Dermis::SolarDamage, Dermis::Inflammation]
            [nearest(dermis, &[DERMIS_NORMAL_RGB, DERMIS_SOLAR_RGB, DERMIS_INFLAMMATION_RGB])],
    };
    (
        labels,
        BandGeometry {
            keratin_rows,
            epidermis_rows,
            stripe_cycles,
        },
    )
}
