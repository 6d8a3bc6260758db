//! Multi-domain image datasets, leave-one-domain-out splits and a
//! synthetic shapes generator.

mod folder;
mod synthetic;

pub use folder::{load_folder_dataset, LoadOptions};
pub use synthetic::{generate_synthetic, glyph_mask, DomainStyle, SyntheticSpec, GLYPHS};

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::ImageBatch;
use crate::error::{CirlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: String,
    pub class: String,
    pub file: String,
    pub sha256: String,
    pub split: Split,
}

/// All samples of one domain. Images are `[n, 3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Dataset-wide unique sample ids.
    pub ids: Vec<u64>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub classes: Vec<String>,
    pub domains: Vec<DomainData>,
    pub manifest: Vec<ManifestEntry>,
}

impl DomainDataset {
    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_size(&self) -> usize {
        self.domains.first().map_or(0, |d| d.images.dim().2)
    }

    /// SHA-256 of the canonical JSON manifest.
    pub fn manifest_digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.manifest).expect("manifest serializes")))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| CirlError::io(path, e))
    }

    /// Writes every image as a PNG under `<root>/<domain>/<class>/`, in a
    /// layout [`load_folder_dataset`] reads back.
    pub fn write_png_tree(&self, root: &Path) -> Result<()> {
        for d in &self.domains {
            for (i, img) in d.images.outer_iter().enumerate() {
                let dir = root.join(&d.name).join(&self.classes[d.labels[i]]);
                std::fs::create_dir_all(&dir).map_err(|e| CirlError::io(&dir, e))?;
                let (_, h, w) = img.dim();
                let mut buf = image::RgbImage::new(w as u32, h as u32);
                for (x, y, px) in buf.enumerate_pixels_mut() {
                    for c in 0..3 {
                        px.0[c] = (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
                let path = dir.join(format!("{:06}.png", d.ids[i]));
                buf.save(&path).map_err(|e| CirlError::Load(format!("cannot write {}: {e}", path.display())))?;
            }
        }
        Ok(())
    }
}

/// Marks `round(val_fraction * n)` samples of every (domain, class) cell as
/// validation, chosen by a seeded shuffle.
pub(crate) fn assign_splits(labels: &[usize], domain_index: usize, val_fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((domain_index as u64) << 32) | c as u64);
        members.shuffle(&mut rng);
        let n_val = (val_fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_val] {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Source domains of a leave-one-domain-out split. Domain tags in the
/// batches index `domain_names`.
#[derive(Clone, Debug)]
pub struct SourceSet {
    pub classes: Vec<String>,
    pub domain_names: Vec<String>,
    pub train: ImageBatch<f32>,
    pub train_ids: Vec<u64>,
    pub val: ImageBatch<f32>,
    pub val_ids: Vec<u64>,
}

/// The held-out domain, reserved for evaluation.
#[derive(Clone, Debug)]
pub struct TargetSet {
    pub classes: Vec<String>,
    pub name: String,
    pub data: ImageBatch<f32>,
    pub ids: Vec<u64>,
}

fn stack(parts: &[(usize, &DomainData, Vec<usize>)]) -> (ImageBatch<f32>, Vec<u64>) {
    let views: Vec<_> = parts.iter().map(|(_, d, idx)| d.images.select(Axis(0), idx)).collect();
    let images = if views.is_empty() {
        Array4::zeros((0, 3, 0, 0))
    } else {
        ndarray::concatenate(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("same image shape")
    };
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut ids = Vec::new();
    for (tag, d, idx) in parts {
        labels.extend(idx.iter().map(|&i| d.labels[i]));
        domains.extend(idx.iter().map(|_| *tag));
        ids.extend(idx.iter().map(|&i| d.ids[i]));
    }
    (ImageBatch::new(images, labels, domains).expect("consistent lengths"), ids)
}

/// Holds out `target` entirely; the remaining domains keep their splits.
pub fn leave_one_domain_out(ds: &DomainDataset, target: &str) -> Result<(SourceSet, TargetSet)> {
    let t = ds.domains.iter().position(|d| d.name == target).ok_or_else(|| {
        CirlError::invalid(format!("unknown domain `{target}`; available: {}", ds.domain_names().join(", ")))
    })?;
    if ds.domains.len() < 2 {
        return Err(CirlError::invalid("need at least one source domain besides the target"));
    }
    let sources: Vec<&DomainData> = ds.domains.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, d)| d).collect();
    let pick = |split: Split| -> Vec<(usize, &DomainData, Vec<usize>)> {
        sources
            .iter()
            .enumerate()
            .map(|(tag, d)| (tag, *d, (0..d.len()).filter(|&i| d.splits[i] == split).collect()))
            .collect()
    };
    let (train, train_ids) = stack(&pick(Split::Train));
    let (val, val_ids) = stack(&pick(Split::Val));
    let td = &ds.domains[t];
    let (data, ids) = stack(&[(0, td, (0..td.len()).collect())]);
    Ok((
        SourceSet {
            classes: ds.classes.clone(),
            domain_names: sources.iter().map(|d| d.name.clone()).collect(),
            train,
            train_ids,
            val,
            val_ids,
        },
        TargetSet {
            classes: ds.classes.clone(),
            name: td.name.clone(),
            data,
            ids,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(domains: usize) -> DomainDataset {
        let mut spec = SyntheticSpec::benchmark(3, 10, 7);
        spec.styles.truncate(domains);
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn four_domains_leave_three_sources() {
        let ds = tiny(4);
        let name = ds.domains[3].name.clone();
        let (src, tgt) = leave_one_domain_out(&ds, &name).unwrap();
        assert_eq!(src.domain_names.len(), 3);
        assert!(!src.domain_names.contains(&name));
        assert_eq!(tgt.data.len(), 30);
        assert_eq!(src.train.len() + src.val.len(), 90);
        assert_eq!(src.val.len(), 18);
        assert!(src.train.domains.iter().all(|&d| d < 3));
        let target_ids: BTreeSet<u64> = tgt.ids.iter().copied().collect();
        assert!(src.train_ids.iter().chain(&src.val_ids).all(|id| !target_ids.contains(id)));
    }

    #[test]
    fn two_domains_leave_one_source() {
        let ds = tiny(2);
        let (src, _) = leave_one_domain_out(&ds, &ds.domains[0].name).unwrap();
        assert_eq!(src.domain_names, vec![ds.domains[1].name.clone()]);
    }

    #[test]
    fn unknown_target_is_invalid() {
        let ds = tiny(2);
        assert!(matches!(leave_one_domain_out(&ds, "nope"), Err(CirlError::InvalidInput(_))));
    }

    #[test]
    fn splits_are_eighty_twenty_per_class() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let s = assign_splits(&labels, 0, 0.2, 1);
        for c in 0..5 {
            let val = (0..50).filter(|&i| labels[i] == c && s[i] == Split::Val).count();
            assert_eq!(val, 2);
        }
        assert_eq!(s, assign_splits(&labels, 0, 0.2, 1));
    }
}
