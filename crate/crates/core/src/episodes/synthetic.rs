//! Procedural glyph classes for fast, controllable-difficulty experiments.
//!
//! Every class owns a random binary `glyph × glyph` mask. Instances render
//! the mask at `size × size`, translate it by up to `shift` pixels in each
//! direction and flip each pixel with probability `flip`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{
    write_pnm, ClassImages, Dataset, DatasetManifest, DatasetSplits, Image, ImageSpec, Split, SplitDirs,
};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub glyph: usize,
    pub size: usize,
    pub density: f64,
    pub flip: f64,
    pub shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_classes: 32,
            val_classes: 0,
            test_classes: 8,
            images_per_class: 20,
            glyph: 4,
            size: 32,
            density: 0.5,
            flip: 0.05,
            shift: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn image_spec(&self) -> ImageSpec {
        ImageSpec { channels: 1, height: self.size, width: self.size }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| Err(Error::config(format!("synthetic.{field}"), detail));
        if self.glyph == 0 || self.size < self.glyph {
            return bad("size", "size must be at least glyph and glyph positive");
        }
        if self.train_classes == 0 || self.test_classes == 0 {
            return bad("train_classes", "train and test splits need at least one class");
        }
        if self.images_per_class == 0 {
            return bad("images_per_class", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.density) {
            return bad("density", "must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.flip) {
            return bad("flip", "must lie in [0, 0.5]");
        }
        if self.shift >= self.size {
            return bad("shift", "must be smaller than size");
        }
        Ok(())
    }
}

fn render<R: Rng>(mask: &[bool], spec: &SyntheticSpec, rng: &mut R) -> Image {
    let (g, n) = (spec.glyph, spec.size);
    let s = spec.shift as isize;
    let dy = rng.gen_range(-s..=s);
    let dx = rng.gen_range(-s..=s);
    let mut data = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            let on = sy >= 0
                && sx >= 0
                && (sy as usize) < n
                && (sx as usize) < n
                && mask[(sy as usize * g / n) * g + sx as usize * g / n];
            let flipped = rng.gen_bool(spec.flip);
            data[y * n + x] = if on != flipped { 1.0 } else { 0.0 };
        }
    }
    Image { spec: spec.image_spec(), data }
}

fn make_split(spec: &SyntheticSpec, seed: u64, split: Split, prefix: &str, count: usize, first: u64) -> Dataset {
    let classes = (0..count)
        .map(|c| {
            let mut rng = substream(seed, "synthetic", first + c as u64);
            let mask: Vec<bool> = (0..spec.glyph * spec.glyph).map(|_| rng.gen_bool(spec.density)).collect();
            let images = (0..spec.images_per_class).map(|_| Arc::new(render(&mask, spec, &mut rng))).collect();
            ClassImages { name: format!("{prefix}_{c:04}"), images }
        })
        .collect();
    Dataset { spec: spec.image_spec(), split, classes }
}

/// Deterministically generates train/val/test splits with disjoint classes.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplits> {
    spec.validate()?;
    let train = make_split(spec, seed, Split::Train, "train", spec.train_classes, 0);
    let val_first = spec.train_classes as u64;
    let val = (spec.val_classes > 0).then(|| make_split(spec, seed, Split::Val, "val", spec.val_classes, val_first));
    let test_first = val_first + spec.val_classes as u64;
    let test = make_split(spec, seed, Split::Test, "test", spec.test_classes, test_first);
    Ok(DatasetSplits { train, val, test })
}

/// Writes splits as a dataset directory readable by `load_dataset`.
pub fn write_tree(splits: &DatasetSplits, root: &Path) -> Result<()> {
    let spec = splits.train.spec;
    let manifest = DatasetManifest {
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
        splits: SplitDirs {
            train: "train".into(),
            test: "test".into(),
            val: splits.val.as_ref().map(|_| "val".into()),
        },
    };
    fs::create_dir_all(root)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::dataset(root, e.to_string()))?;
    fs::write(root.join(DatasetManifest::FILE_NAME), text)?;
    for (dir, ds) in [("train", Some(&splits.train)), ("val", splits.val.as_ref()), ("test", Some(&splits.test))] {
        let Some(ds) = ds else { continue };
        for class in &ds.classes {
            let cdir = root.join(dir).join(&class.name);
            fs::create_dir_all(&cdir)?;
            for (i, img) in class.images.iter().enumerate() {
                write_pnm(&cdir.join(format!("{i:04}.pgm")), img)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::load_dataset;

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let spec = SyntheticSpec {
            train_classes: 4,
            val_classes: 2,
            test_classes: 3,
            images_per_class: 5,
            ..Default::default()
        };
        let a = generate(&spec, 11).unwrap();
        let b = generate(&spec, 11).unwrap();
        assert_eq!(a.train.classes[2].images[3].data, b.train.classes[2].images[3].data);
        assert_eq!(a.val.as_ref().unwrap().num_classes(), 2);
        assert_eq!(a.test.num_classes(), 3);
        a.check_disjoint().unwrap();
        assert_ne!(a.train.classes[0].images[0].data, a.test.classes[0].images[0].data);
    }

    #[test]
    fn written_tree_loads_back_exactly() {
        let spec = SyntheticSpec { train_classes: 3, test_classes: 2, images_per_class: 4, ..Default::default() };
        let splits = generate(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tree(&splits, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train.num_classes(), 3);
        assert!(loaded.train.classes.iter().all(|c| c.images.len() == 4));
        assert_eq!(loaded.train.classes[1].images[2].data, splits.train.classes[1].images[2].data);
        assert!(loaded.val.is_none());
    }
}
