//! Folder-backed datasets: one directory per class under `images/`,
//! optional `masks/` mirror, and a JSON manifest with the label order.
//!
//! Layout written by [`save_dataset`]:
//! ```text
//! root/manifest.json
//! root/images/<class>/<id>.png
//! root/masks/<class>/<id>.png      (0/255 grayscale, when masks exist)
//! ```
//! [`load_dataset`] also accepts manifest-less folders (classes become the
//! lexicographically sorted directory names) and PPM/PGM images.

use crate::data::{Dataset, Sample};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    num_classes: usize,
    class_names: Vec<String>,
    has_masks: bool,
    /// id -> class index, sorted by id for stable files.
    samples: BTreeMap<String, usize>,
}

/// Load-time options.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Require a mask per sample; missing ones become a data error that
    /// lists the offending ids.
    pub with_masks: bool,
    /// Resize everything to this edge length: images bilinearly, masks by
    /// nearest neighbor. `None` keeps files as-is and requires one uniform
    /// size across the folder.
    pub resize_to: Option<usize>,
}

/// Writes images (and masks when present) as 8-bit PNGs plus the manifest.
/// Values are quantized with round(v*255); data generated on the u8 grid
/// round-trips bit-exactly.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    let has_masks = ds.samples.iter().all(|s| s.mask.is_some());
    fs::create_dir_all(root)?;
    let hw = ds.image_size * ds.image_size;
    let mut manifest = Manifest {
        image_size: ds.image_size,
        num_classes: ds.num_classes,
        class_names: ds.class_names.clone(),
        has_masks,
        samples: BTreeMap::new(),
    };
    for s in &ds.samples {
        let class = &ds.class_names[s.label];
        let img_dir = root.join("images").join(class);
        fs::create_dir_all(&img_dir)?;
        let mut rgb = image::RgbImage::new(ds.image_size as u32, ds.image_size as u32);
        let data = s.image.data();
        for (p, px) in rgb.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (data[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        rgb.save(img_dir.join(format!("{}.png", s.id)))
            .map_err(|e| Error::Format(format!("writing image {}: {e}", s.id)))?;
        if let Some(mask) = &s.mask {
            let mask_dir = root.join("masks").join(class);
            fs::create_dir_all(&mask_dir)?;
            let mut gray = image::GrayImage::new(ds.image_size as u32, ds.image_size as u32);
            for (p, px) in gray.pixels_mut().enumerate() {
                px.0[0] = if mask[p] == 1 { 255 } else { 0 };
            }
            gray.save(mask_dir.join(format!("{}.png", s.id)))
                .map_err(|e| Error::Format(format!("writing mask {}: {e}", s.id)))?;
        }
        manifest.samples.insert(s.id.clone(), s.label);
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(root.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a dataset folder. See [`LoadOptions`].
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset folder does not exist: {}",
            root.display()
        )));
    }
    let manifest: Option<Manifest> = {
        let p = root.join("manifest.json");
        if p.is_file() {
            Some(serde_json::from_str(&fs::read_to_string(p)?)?)
        } else {
            None
        }
    };
    let class_names: Vec<String> = match &manifest {
        Some(m) => m.class_names.clone(),
        None => {
            let mut names: Vec<String> = list_dir(&root.join("images"))?
                .into_iter()
                .filter(|p| p.is_dir())
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::Data(format!(
                    "no class directories under {}",
                    root.join("images").display()
                )));
            }
            names
        }
    };

    let mut samples = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut missing_masks: Vec<String> = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let dir = root.join("images").join(class);
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "missing class directory {}",
                dir.display()
            )));
        }
        let mut files: Vec<PathBuf> = list_dir(&dir)?
            .into_iter()
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("ppm") | Some("pgm")
                )
            })
            .collect();
        files.sort();
        for file in files {
            let id = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let (image, size) = load_image(&file, opts.resize_to)?;
            sizes.push(size);
            let mask = load_mask(root, class, &id, size, opts)?;
            if opts.with_masks && mask.is_none() {
                missing_masks.push(id.clone());
            }
            samples.push(Sample {
                id,
                image,
                label,
                mask,
            });
        }
    }
    if !missing_masks.is_empty() {
        missing_masks.sort();
        return Err(Error::Data(format!(
            "masks required but missing for {} sample(s): {}",
            missing_masks.len(),
            missing_masks.join(", ")
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no images found under {}",
            root.display()
        )));
    }
    let image_size = sizes[0];
    if sizes.iter().any(|&s| s != image_size) {
        return Err(Error::Data(
            "images have mixed sizes; pass a resize target to unify them".into(),
        ));
    }
    let ds = Dataset {
        samples,
        num_classes: class_names.len(),
        image_size,
        class_names,
    };
    ds.validate()?;
    Ok(ds)
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn load_image(path: &Path, resize_to: Option<usize>) -> Result<(Tensor<f32>, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("decoding {}: {e}", path.display())))?;
    let img = match resize_to {
        Some(t) if img.width() != t as u32 || img.height() != t as u32 => {
            image::DynamicImage::ImageRgba8(image::imageops::resize(
                &img,
                t as u32,
                t as u32,
                FilterType::Triangle,
            ))
        }
        _ => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w != h {
        return Err(Error::Data(format!(
            "image {} is {w}x{h}; only square images are supported (use a resize target)",
            path.display()
        )));
    }
    let hw = w * h;
    let mut data = vec![0.0f32; 3 * hw];
    for (p, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px.0[c] as f32 / 255.0;
        }
    }
    Ok((Tensor::from_vec(&[3, h, w], data)?, w))
}

fn load_mask(
    root: &Path,
    class: &str,
    id: &str,
    size: usize,
    opts: &LoadOptions,
) -> Result<Option<Vec<u8>>> {
    let dir = root.join("masks").join(class);
    let path = ["png", "pgm", "ppm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file());
    let Some(path) = path else {
        return Ok(None);
    };
    let img = image::open(&path)
        .map_err(|e| Error::Format(format!("decoding mask {}: {e}", path.display())))?;
    let gray = match opts.resize_to {
        Some(t) if img.width() != t as u32 || img.height() != t as u32 => image::imageops::resize(
            &img.to_luma8(),
            t as u32,
            t as u32,
            FilterType::Nearest,
        ),
        _ => img.to_luma8(),
    };
    if gray.width() as usize != size || gray.height() as usize != size {
        return Err(Error::Data(format!(
            "mask {} is {}x{}, image is {size}x{size}",
            path.display(),
            gray.width(),
            gray.height()
        )));
    }
    Ok(Some(
        gray.pixels().map(|p| u8::from(p.0[0] >= 128)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, ShapesConfig};

    fn tiny() -> Dataset {
        gen_shapes(&ShapesConfig {
            count: 8,
            image_size: 32,
            seed: 21,
            ..ShapesConfig::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(
            dir.path(),
            &LoadOptions {
                with_masks: true,
                resize_to: None,
            },
        )
        .unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.class_names, ds.class_names);
        for orig in &ds.samples {
            let got = back.samples.iter().find(|s| s.id == orig.id).unwrap();
            assert_eq!(got.label, orig.label);
            assert_eq!(got.image.data(), orig.image.data(), "pixels changed for {}", orig.id);
            assert_eq!(got.mask.as_ref(), orig.mask.as_ref());
        }
    }

    #[test]
    fn missing_masks_are_listed() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // Remove one mask file.
        let victim = &ds.samples[3];
        let class = &ds.class_names[victim.label];
        fs::remove_file(
            dir.path()
                .join("masks")
                .join(class)
                .join(format!("{}.png", victim.id)),
        )
        .unwrap();
        let err = load_dataset(
            dir.path(),
            &LoadOptions {
                with_masks: true,
                resize_to: None,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains(&victim.id), "{err}");
        // Without the requirement the load succeeds.
        assert!(load_dataset(dir.path(), &LoadOptions::default()).is_ok());
    }

    #[test]
    fn loads_without_manifest_using_sorted_dirs() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("manifest.json")).unwrap();
        let back = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        // Sorted class dirs: cross, disc, square, triangle.
        assert_eq!(
            back.class_names,
            vec!["cross", "disc", "square", "triangle"]
        );
        assert_eq!(back.len(), ds.len());
    }

    #[test]
    fn resize_unifies_resolution() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(
            dir.path(),
            &LoadOptions {
                with_masks: true,
                resize_to: Some(16),
            },
        )
        .unwrap();
        assert_eq!(back.image_size, 16);
        for s in &back.samples {
            assert_eq!(s.image.shape(), &[3, 16, 16]);
            assert_eq!(s.mask.as_ref().unwrap().len(), 256);
            // Nearest-neighbor masks stay binary.
            assert!(s.mask.as_ref().unwrap().iter().all(|&m| m <= 1));
        }
    }

    #[test]
    fn missing_folder_is_a_data_error() {
        let err = load_dataset(Path::new("/nonexistent/xyz"), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn reads_pnm_files_too() {
        let dir = tempfile::tempdir().unwrap();
        let class_dir = dir.path().join("images").join("a");
        fs::create_dir_all(&class_dir).unwrap();
        // 2x2 gray PGM written through the image crate.
        let gray = image::GrayImage::from_raw(2, 2, vec![0, 64, 128, 255]).unwrap();
        gray.save(class_dir.join("s0.pgm")).unwrap();
        let class_dir_b = dir.path().join("images").join("b");
        fs::create_dir_all(&class_dir_b).unwrap();
        let rgb = image::RgbImage::from_raw(2, 2, vec![255u8; 12]).unwrap();
        rgb.save(class_dir_b.join("s1.ppm")).unwrap();
        let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_size, 2);
        // Grayscale replicates across channels.
        let s0 = ds.samples.iter().find(|s| s.id == "s0").unwrap();
        assert_eq!(s0.image.at(&[0, 0, 1]), 64.0 / 255.0);
        assert_eq!(s0.image.at(&[2, 0, 1]), 64.0 / 255.0);
    }
}
