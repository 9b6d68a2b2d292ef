//! Procedural multi-band images with Voronoi-region labels, and their on-disk
//! container (JSON manifest, little-endian f32 HWC blobs, u8 label maps).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::model::io::{f32_from_le, f32_to_le, read_blob, read_json, write_json, FORMAT_VERSION};
use crate::model::MANIFEST_FILE;
use crate::tensor::Tensor;

const FORMAT: &str = "dataset";
const NOISE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<ClassMap>,
}

/// A Voronoi site: pixel position and the class of its region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub y: usize,
    pub x: usize,
    pub class: u8,
}

/// Class of the nearest site by squared Euclidean distance; ties go to the
/// earlier site.
pub fn region_class(sites: &[Site], y: usize, x: usize) -> u8 {
    let d = |s: &Site| {
        let dy = s.y as i64 - y as i64;
        let dx = s.x as i64 - x as i64;
        dy * dy + dx * dx
    };
    let mut best = &sites[0];
    for s in &sites[1..] {
        if d(s) < d(best) {
            best = s;
        }
    }
    best.class
}

/// Sites for one image: one per class at distinct pixels, plus up to as many
/// extra sites with random classes.
fn draw_sites(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> Vec<Site> {
    let extra = rng.random_range(0..=classes);
    let n = (classes + extra).min(h * w);
    let cells = rand::seq::index::sample(rng, h * w, n).into_vec();
    cells
        .into_iter()
        .enumerate()
        .map(|(i, cell)| Site {
            y: cell / w,
            x: cell % w,
            class: if i < classes { i as u8 } else { rng.random_range(0..classes) as u8 },
        })
        .collect()
}

fn check(shape: [usize; 3], classes: usize) -> Result<()> {
    if !(2..=256).contains(&classes) {
        return Err(Error::InvalidArgument(format!("classes must lie in 2..=256, got {classes}")));
    }
    if shape[2] == 0 || shape[0] * shape[1] < classes {
        return Err(Error::InvalidArgument(format!("image {shape:?} cannot hold {classes} classes")));
    }
    Ok(())
}

/// Per-image site lists for `make_synthetic_dataset` with the same arguments.
pub fn synthetic_sites(seed: u64, count: usize, shape: [usize; 3], classes: usize) -> Result<Vec<Vec<Site>>> {
    check(shape, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let sites = draw_sites(&mut rng, shape[0], shape[1], classes);
            // Spectral draws come after the sites; skip them so site lists line up.
            let _ = signatures(&mut rng, classes, shape[2]);
            let _: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-NOISE..NOISE)).collect();
            sites
        })
        .collect())
}

fn signatures(rng: &mut ChaCha8Rng, classes: usize, bands: usize) -> Vec<Vec<f32>> {
    (0..classes)
        .map(|_| (0..bands).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

/// `count` images of `shape` (HWC) whose pixels follow a per-class spectral
/// signature plus uniform noise, labelled by Voronoi regions. Every class
/// appears in every label map.
pub fn make_synthetic_dataset(seed: u64, count: usize, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    check(shape, classes)?;
    let [h, w, c] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let sites = draw_sites(&mut rng, h, w, classes);
        let sig = signatures(&mut rng, classes, c);
        let map: Vec<u8> = (0..h * w).map(|p| region_class(&sites, p / w, p % w)).collect();
        let data: Vec<f32> = (0..h * w * c)
            .map(|i| sig[map[i / c] as usize][i % c] + rng.random_range(-NOISE..NOISE))
            .collect();
        images.push(Tensor::new(vec![h, w, c], data)?);
        labels.push(ClassMap::new(h, w, classes, map)?);
    }
    Ok(Dataset { images, labels })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    format: String,
    shape: [usize; 3],
    classes: usize,
    items: Vec<DatasetItem>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetItem {
    image_file: String,
    label_file: Option<String>,
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let first = ds.images.first().ok_or(Error::Empty("dataset"))?;
    let shape = first.hwc()?;
    let classes = ds.labels.first().map_or(0, ClassMap::classes);
    if !ds.labels.is_empty() && ds.labels.len() != ds.images.len() {
        return Err(Error::InvalidArgument("label count differs from image count".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(ds.images.len());
    for (i, img) in ds.images.iter().enumerate() {
        if img.hwc()? != shape {
            return Err(Error::shape("save_dataset", img.shape(), &shape));
        }
        let image_file = format!("image_{i:05}.f32");
        let path = dir.join(&image_file);
        fs::write(&path, f32_to_le(img.data())).map_err(|e| Error::io(&path, e))?;
        let label_file = match ds.labels.get(i) {
            Some(l) => {
                let name = format!("label_{i:05}.u8");
                let path = dir.join(&name);
                fs::write(&path, l.labels()).map_err(|e| Error::io(&path, e))?;
                Some(name)
            }
            None => None,
        };
        items.push(DatasetItem { image_file, label_file });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        format: FORMAT.into(),
        shape,
        classes,
        items,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let m: DatasetManifest = read_json(&manifest_path)?;
    if m.version != FORMAT_VERSION || m.format != FORMAT {
        return Err(Error::Manifest {
            path: manifest_path,
            msg: format!("unsupported version {} / format `{}`", m.version, m.format),
        });
    }
    let [h, w, c] = m.shape;
    let mut images = Vec::with_capacity(m.items.len());
    let mut labels = Vec::new();
    for item in &m.items {
        let path = dir.join(&item.image_file);
        let bytes = read_blob(&path, h * w * c * 4, h * w * c * 4)?;
        images.push(Tensor::new(vec![h, w, c], f32_from_le(&bytes))?);
        if let Some(name) = &item.label_file {
            let path = dir.join(name);
            labels.push(ClassMap::new(h, w, m.classes, read_blob(&path, h * w, h * w)?)?);
        }
    }
    if !labels.is_empty() && labels.len() != images.len() {
        return Err(Error::Manifest {
            path: manifest_path,
            msg: "labels must be given for all images or none".into(),
        });
    }
    Ok(Dataset { images, labels })
}
