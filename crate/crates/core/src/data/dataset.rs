//! Image datasets with class-level splits, plus the on-disk manifest layout.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{io, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// All images in one `[n, 3, 16, 16]` tensor; classes index into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_samples: Vec<Vec<usize>>,
    split: Vec<Option<Split>>,
    pub descriptor: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, descriptor: String) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape(&[labels.len()], &[images.batch()]));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut class_samples = vec![Vec::new(); n_classes];
        for (i, &c) in labels.iter().enumerate() {
            class_samples[c].push(i);
        }
        Ok(Self {
            images,
            labels,
            class_samples,
            split: vec![None; n_classes],
            descriptor,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_samples.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images.item_shape()
    }

    pub fn label(&self, sample: usize) -> usize {
        self.labels[sample]
    }

    pub fn samples_of(&self, class: usize) -> &[usize] {
        &self.class_samples[class]
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        self.split[class]
    }

    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.n_classes()).filter(|&c| self.split[c] == Some(split)).collect()
    }

    /// Samples of every class in `split`.
    pub fn samples_in(&self, split: Split) -> Vec<usize> {
        self.classes_in(split)
            .into_iter()
            .flat_map(|c| self.class_samples[c].iter().copied())
            .collect()
    }

    pub fn gather(&self, ids: &[usize]) -> Tensor<f32> {
        self.images.select(ids)
    }

    pub fn set_split(&mut self, split: Vec<Option<Split>>) -> Result<()> {
        if split.len() != self.n_classes() {
            return Err(Error::shape(&[self.n_classes()], &[split.len()]));
        }
        self.split = split;
        Ok(())
    }

    /// Partitions classes into train/val/test with the given ratios.
    pub fn split_classes(&mut self, ratios: [f64; 3], seed: u64) -> Result<()> {
        if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
        }
        let n = self.n_classes();
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = (ratios[1] * n as f64).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::Config(format!("split ratios {ratios:?} leave an empty split for {n} classes")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::keyed(seed, &[0x5911]).shuffle(&mut order);
        let mut split = vec![None; n];
        for (rank, &c) in order.iter().enumerate() {
            split[c] = Some(if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
        self.split = split;
        Ok(())
    }

    /// Writes `manifest.txt` and one FSTN file per image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut manifest = String::new();
        manifest.push_str(&format!("# {}\n", self.descriptor));
        for (i, &c) in self.labels.iter().enumerate() {
            let rel = format!("images/{i:06}.fstn");
            io::tensor_write(dir.join(&rel), &self.images.item_tensor(i))?;
            let split = self.split[c].map_or("none".to_string(), |s| s.to_string());
            manifest.push_str(&format!("{c},{split},{rel}\n"));
        }
        let mpath = dir.join("manifest.txt");
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    /// Loads any dataset in the manifest layout. `u8` images are rescaled to [0,1].
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut descriptor = String::new();
        let mut labels = Vec::new();
        let mut splits: Vec<(usize, Option<Split>)> = Vec::new();
        let mut images = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if let Some(d) = line.strip_prefix('#') {
                descriptor = d.trim().to_string();
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Config(format!("manifest line {}: expected 3 fields", ln + 1)));
            }
            let class: usize = fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {}: bad class id", ln + 1)))?;
            let split = match fields[1] {
                "none" => None,
                s => Some(s.parse()?),
            };
            let img = io::tensor_read_f32(dir.join(fields[2]))?;
            labels.push(class);
            splits.push((class, split));
            images.push(img);
        }
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let mut ds = Dataset::new(Tensor::stack(&refs)?, labels, descriptor)?;
        let mut split = vec![None; ds.n_classes()];
        for (c, s) in splits {
            if split[c].is_some() && split[c] != s {
                return Err(Error::Config(format!("class {c} appears in two splits")));
            }
            split[c] = s;
        }
        ds.set_split(split)?;
        Ok(ds)
    }

    /// Checks that the three class splits are pairwise disjoint and non-empty.
    pub fn validate_splits(&self) -> Result<()> {
        let sets: Vec<BTreeSet<usize>> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| self.classes_in(s).into_iter().collect())
            .collect();
        if sets.iter().any(BTreeSet::is_empty) {
            return Err(Error::Config("a split has no classes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_generate;

    #[test]
    fn split_sizes_14_4_6() {
        let mut ds = synth_generate(24, 20, 1).unwrap();
        ds.split_classes([14.0 / 24.0, 4.0 / 24.0, 6.0 / 24.0], 9).unwrap();
        assert_eq!(ds.classes_in(Split::Train).len(), 14);
        assert_eq!(ds.classes_in(Split::Val).len(), 4);
        assert_eq!(ds.classes_in(Split::Test).len(), 6);
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| ds.classes_in(s))
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());

        let mut again = synth_generate(24, 20, 1).unwrap();
        again.split_classes([14.0 / 24.0, 4.0 / 24.0, 6.0 / 24.0], 9).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn bad_ratios_rejected() {
        let mut ds = synth_generate(8, 20, 1).unwrap();
        assert!(ds.split_classes([0.5, 0.5, 0.5], 1).is_err());
        assert!(ds.split_classes([0.95, 0.05, 0.0], 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut ds = synth_generate(8, 20, 4).unwrap();
        ds.split_classes([0.5, 0.25, 0.25], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_rescales_u8_images() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("img")).unwrap();
        let mut manifest = String::new();
        for i in 0..4u8 {
            let t = Tensor::new(vec![3, 16, 16], vec![i * 60; 768]).unwrap();
            io::tensor_write(dir.path().join(format!("img/{i}.fstn")), &t).unwrap();
            let split = ["train", "val", "test", "test"][i as usize];
            manifest.push_str(&format!("{i},{split},img/{i}.fstn\n"));
        }
        fs::write(dir.path().join("manifest.txt"), manifest).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        assert!((ds.images().item(3)[0] - 180.0 / 255.0).abs() < 1e-7);
        assert_eq!(ds.classes_in(Split::Test), vec![2, 3]);
    }
}
