use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical image geometry for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSpec {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A decoded image, channel-major `[C, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub spec: ImageSpec,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(spec: ImageSpec, data: Vec<f32>) -> Result<Self> {
        if data.len() != spec.numel() {
            return Err(Error::shape("image", format!("{spec:?} needs {} values, got {}", spec.numel(), data.len())));
        }
        Ok(Self { spec, data })
    }

    /// Rotation by 90° counter-clockwise, applied `quarter_turns` times.
    pub fn rotate90(&self, quarter_turns: usize) -> Result<Image> {
        let ImageSpec { channels, height, width } = self.spec;
        if height != width {
            return Err(Error::shape("rotate90", format!("image is {height}x{width}, rotation needs a square")));
        }
        let n = height;
        let mut cur = self.data.clone();
        for _ in 0..quarter_turns % 4 {
            let mut next = vec![0.0; cur.len()];
            for c in 0..channels {
                let plane = &cur[c * n * n..][..n * n];
                let dst = &mut next[c * n * n..][..n * n];
                for y in 0..n {
                    for x in 0..n {
                        // (y, x) -> (n-1-x, y)
                        dst[(n - 1 - x) * n + y] = plane[y * n + x];
                    }
                }
            }
            cur = next;
        }
        Ok(Image { spec: self.spec, data: cur })
    }
}

#[derive(Debug, Clone)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<Arc<Image>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled images of one split, grouped by class in a fixed order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: ImageSpec,
    pub split: Split,
    pub classes: Vec<ClassImages>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).min().unwrap_or(0)
    }
}

/// All splits of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl DatasetSplits {
    /// Fails when a class name appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ds in [Some(&self.train), self.val.as_ref(), Some(&self.test)].into_iter().flatten() {
            for c in &ds.classes {
                if !seen.insert(c.name.as_str()) {
                    return Err(Error::dataset(&c.name, "class appears in more than one split"));
                }
            }
        }
        Ok(())
    }
}

/// Contents of `dataset.toml` at a dataset root.
///
/// ```toml
/// channels = 1
/// height = 28
/// width = 28
///
/// [splits]
/// train = "train"   # directory names under the root
/// test = "test"
/// val = "val"       # optional
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub splits: SplitDirs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDirs {
    pub train: String,
    pub test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<String>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "dataset.toml";

    pub fn spec(&self) -> ImageSpec {
        ImageSpec { channels: self.channels, height: self.height, width: self.width }
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::dataset(&path, e.to_string()))?;
        let manifest: Self = toml::from_str(&text).map_err(|e| Error::dataset(&path, e.to_string()))?;
        if manifest.channels != 1 && manifest.channels != 3 {
            return Err(Error::dataset(&path, format!("channels must be 1 or 3, got {}", manifest.channels)));
        }
        if manifest.height == 0 || manifest.width == 0 {
            return Err(Error::dataset(&path, "image extents must be positive"));
        }
        Ok(manifest)
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Loads every split declared by `root/dataset.toml`.
pub fn load_dataset(root: &Path) -> Result<DatasetSplits> {
    let manifest = DatasetManifest::read(root)?;
    let spec = manifest.spec();
    let train = load_split(&root.join(&manifest.splits.train), spec, Split::Train)?;
    let test = load_split(&root.join(&manifest.splits.test), spec, Split::Test)?;
    let val = match &manifest.splits.val {
        Some(dir) => Some(load_split(&root.join(dir), spec, Split::Val)?),
        None => None,
    };
    let splits = DatasetSplits { train, val, test };
    splits.check_disjoint()?;
    Ok(splits)
}

/// Loads `dir/<class>/<image>` into a split, resizing to `spec` and scaling
/// pixel values to `[0, 1]`. Classes are ordered by name.
pub fn load_split(dir: &Path, spec: ImageSpec, split: Split) -> Result<Dataset> {
    let mut class_dirs = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::dataset(dir, e.to_string()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_dirs.insert(entry.file_name().to_string_lossy().into_owned(), entry.path());
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::dataset(dir, "split contains no class folders"));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    for (name, path) in class_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&path)
            .map_err(|e| Error::dataset(&path, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::dataset(&path, "class folder contains no images"));
        }
        let images = files.iter().map(|f| decode_image(f, spec).map(Arc::new)).collect::<Result<Vec<_>>>()?;
        classes.push(ClassImages { name, images });
    }
    Ok(Dataset { spec, split, classes })
}

pub fn decode_image(path: &Path, spec: ImageSpec) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    let (w, h) = (spec.width as u32, spec.height as u32);
    let img = if img.width() != w || img.height() != h { img.resize_exact(w, h, FilterType::Triangle) } else { img };
    let plane = spec.height * spec.width;
    let data = match spec.channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut out = vec![0.0; 3 * plane];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = px[c] as f32 / 255.0;
                }
            }
            out
        }
        c => return Err(Error::dataset(path, format!("unsupported channel count {c}"))),
    };
    Image::new(spec, data)
}

/// Writes an image as binary PGM (1 channel) or PPM (3 channels).
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let ImageSpec { channels, height, width } = img.spec;
    let plane = height * width;
    let to_byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = match channels {
        1 => format!("P5\n{width} {height}\n255\n").into_bytes(),
        3 => format!("P6\n{width} {height}\n255\n").into_bytes(),
        c => return Err(Error::dataset(path, format!("cannot write {c}-channel PNM"))),
    };
    for i in 0..plane {
        for c in 0..channels {
            out.push(to_byte(img.data[c * plane + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Each base class becomes four classes: its 0°, 90°, 180° and 270°
/// rotations. Rotated class names carry a `@rot<deg>` suffix.
pub fn augment_rotations(ds: &Dataset) -> Result<Dataset> {
    if ds.spec.height != ds.spec.width {
        return Err(Error::shape(
            "augment_rotations",
            format!("images are {}x{}, rotation needs squares", ds.spec.height, ds.spec.width),
        ));
    }
    let mut classes = Vec::with_capacity(ds.classes.len() * 4);
    for class in &ds.classes {
        for turns in 0..4 {
            let images = if turns == 0 {
                class.images.clone()
            } else {
                class.images.iter().map(|im| im.rotate90(turns).map(Arc::new)).collect::<Result<_>>()?
            };
            let name = if turns == 0 { class.name.clone() } else { format!("{}@rot{}", class.name, turns * 90) };
            classes.push(ClassImages { name, images });
        }
    }
    Ok(Dataset { spec: ds.spec, split: ds.split, classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, seed: usize) -> Image {
        let spec = ImageSpec { channels: 1, height: h, width: w };
        Image::new(spec, (0..h * w).map(|i| ((i * 31 + seed * 7) % 256) as f32 / 255.0).collect()).unwrap()
    }

    #[test]
    fn rotation_by_180_twice_is_identity() {
        let img = gray(5, 5, 3);
        let back = img.rotate90(2).unwrap().rotate90(2).unwrap();
        assert_eq!(back.data, img.data);
        assert_ne!(img.rotate90(1).unwrap().data, img.data);
        assert_eq!(img.rotate90(4).unwrap().data, img.data);
    }

    #[test]
    fn rotation_moves_corner() {
        let mut img = gray(3, 3, 0);
        img.data.iter_mut().for_each(|v| *v = 0.0);
        img.data[2] = 1.0; // top-right
        let r = img.rotate90(1).unwrap();
        assert_eq!(r.data[0], 1.0); // counter-clockwise: top-right -> top-left
    }

    #[test]
    fn rotation_rejects_non_square() {
        assert!(gray(4, 5, 0).rotate90(1).is_err());
    }

    #[test]
    fn augmentation_quadruples_classes() {
        let spec = ImageSpec { channels: 1, height: 4, width: 4 };
        let classes = (0..3)
            .map(|c| ClassImages {
                name: format!("c{c}"),
                images: (0..5).map(|i| Arc::new(gray(4, 4, c * 10 + i))).collect(),
            })
            .collect();
        let ds = Dataset { spec, split: Split::Train, classes };
        let aug = augment_rotations(&ds).unwrap();
        assert_eq!(aug.num_classes(), 12);
        assert!(aug.classes.iter().all(|c| c.images.len() == 5));
    }
}
