use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array4;
use sha2::{Digest, Sha256};

use super::{assign_splits, DomainData, DomainDataset, ManifestEntry};
use crate::error::{CirlError, Result};

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Images are resized to `image_size x image_size`.
    pub image_size: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: 32,
            val_fraction: 0.2,
            split_seed: 0,
        }
    }
}

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CirlError::io(dir, e))? {
        let path = entry.map_err(|e| CirlError::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads `<root>/<domain>/<class>/<image>`. Domains, classes and files are
/// visited in sorted order, so identical trees give identical datasets and
/// manifests.
pub fn load_folder_dataset(root: &Path, opts: &LoadOptions) -> Result<DomainDataset> {
    if opts.image_size == 0 || !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(CirlError::config("image_size must be positive and val_fraction in [0, 1)"));
    }
    let domain_dirs = sorted_entries(root, true)?;
    if domain_dirs.len() < 2 {
        return Err(CirlError::Schema(format!(
            "{} holds {} domain folders, need at least 2",
            root.display(),
            domain_dirs.len()
        )));
    }

    let mut class_sets = Vec::new();
    for d in &domain_dirs {
        let classes: BTreeSet<String> = sorted_entries(d, true)?.iter().map(|p| file_name(p)).collect();
        class_sets.push(classes);
    }
    let all: BTreeSet<String> = class_sets.iter().flatten().cloned().collect();
    let mut problems = Vec::new();
    for (d, set) in domain_dirs.iter().zip(&class_sets) {
        let missing: Vec<&str> = all.difference(set).map(String::as_str).collect();
        if !missing.is_empty() {
            problems.push(format!("domain `{}` lacks {{{}}}", file_name(d), missing.join(", ")));
        }
    }
    if !problems.is_empty() {
        return Err(CirlError::Schema(format!("class sets differ across domains: {}", problems.join("; "))));
    }
    let classes: Vec<String> = all.into_iter().collect();

    let size = opts.image_size;
    let mut domains = Vec::new();
    let mut manifest = Vec::new();
    let mut next_id = 0u64;
    for (di, dir) in domain_dirs.iter().enumerate() {
        let name = file_name(dir);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut files = Vec::new();
        for (ci, class) in classes.iter().enumerate() {
            let class_dir = dir.join(class);
            for path in sorted_entries(&class_dir, false)? {
                let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
                if !EXTENSIONS.contains(&ext.as_str()) {
                    continue;
                }
                if ext == "jpg" || ext == "jpeg" {
                    log::warn!("{} is lossy; decoded pixels may vary across decoders", path.display());
                }
                let bytes = std::fs::read(&path).map_err(|e| CirlError::io(&path, e))?;
                let img = image::load_from_memory(&bytes)
                    .map_err(|e| CirlError::io(&path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?
                    .to_rgb8();
                let img = if img.width() as usize == size && img.height() as usize == size {
                    img
                } else {
                    image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
                };
                let mut chw = vec![0f32; 3 * size * size];
                for (x, y, px) in img.enumerate_pixels() {
                    for c in 0..3 {
                        chw[c * size * size + y as usize * size + x as usize] = px.0[c] as f32 / 255.0;
                    }
                }
                pixels.extend(chw);
                labels.push(ci);
                files.push((class.clone(), format!("{name}/{class}/{}", file_name(&path)), hex::encode(Sha256::digest(&bytes))));
            }
        }
        if labels.is_empty() {
            return Err(CirlError::Schema(format!("domain `{name}` holds no images")));
        }
        let splits = assign_splits(&labels, di, opts.val_fraction, opts.split_seed);
        let n = labels.len();
        for ((class, file, sha256), split) in files.into_iter().zip(&splits) {
            manifest.push(ManifestEntry {
                domain: name.clone(),
                class,
                file,
                sha256,
                split: *split,
            });
        }
        domains.push(DomainData {
            name,
            images: Array4::from_shape_vec((n, 3, size, size), pixels).expect("pixel count"),
            labels,
            splits,
            ids: (next_id..next_id + n as u64).collect(),
        });
        next_id += n as u64;
    }
    Ok(DomainDataset {
        classes,
        domains,
        manifest,
    })
}
