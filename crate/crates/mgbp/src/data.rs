//! Training data preparation and sampling.
//!
//! `prep_dataset` cuts a folder of photographs into fixed-size PNG patches
//! ahead of training, so the hot loop never decodes full-size images. The
//! patches for each source image land in their own subdirectory, and a
//! line-oriented manifest records what was cut. Sampling then draws
//! uniformly in three stages (image, patch file, crop offset), which weights
//! every photograph equally no matter how many patches it produced, and
//! synthesizes the low-resolution partner on the fly by a 16x down-up
//! round trip.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{read_image, write_png};
use crate::resample::{downscale, upscale};
use crate::tensor::{Shape, Tensor};
use crate::tile::{copy_window, plan_tiles};

/// Items per training batch at desk scale.
pub const DEFAULT_BATCH: usize = 4;

/// Down-up factor used to synthesize the low-resolution partner of a patch.
pub const LR_FACTOR: u32 = 16;

/// Manifest file name at the root of a prepared patch tree.
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Preparation patches carry this much margin beyond the training crop, so
/// random offsets have room to move.
pub fn default_prep_patch(train_patch: usize) -> usize {
    train_patch + 64
}

/// Geometry for cutting source images into stored patches.
#[derive(Debug, Clone, Copy)]
pub struct PrepConfig {
    pub patch: usize,
    pub stride: usize,
}

/// What a preparation run did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrepReport {
    /// Images cut into patches.
    pub prepped: usize,
    /// Patch files written in total.
    pub patches: usize,
    /// Files that failed to decode; recorded in the manifest with count 0.
    pub unreadable: usize,
    /// Images smaller than the patch in either axis; skipped with a warning.
    pub skipped: usize,
}

pub(crate) fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

fn unique_dir_name(stem: &str, used: &mut HashSet<String>) -> String {
    if used.insert(stem.to_string()) {
        return stem.to_string();
    }
    for k in 2.. {
        let candidate = format!("{}-{}", stem, k);
        if used.insert(candidate.clone()) {
            return candidate;
        }
    }
    unreachable!("suffix loop terminates at the first free name")
}

/// Cut every readable image under `input` into overlapping patches under
/// `output`, one subdirectory per image, patch files named by their grid
/// origin (`r{row}_c{col}.png`).
///
/// The manifest at the output root gets one tab-separated line per source
/// image: subdirectory name, patch count, patch size, stride. A file that
/// fails to decode is recorded under its own file name with a count of zero
/// and processing continues; an image smaller than the patch is skipped with
/// a warning and no manifest line.
pub fn prep_dataset(input: &Path, output: &Path, cfg: &PrepConfig) -> Result<PrepReport> {
    if cfg.patch == 0 || cfg.stride == 0 || cfg.stride > cfg.patch {
        return Err(Error::invalid(
            "prep_dataset",
            format!("patch {} / stride {} is not a valid grid", cfg.patch, cfg.stride),
        ));
    }
    let mut sources: Vec<PathBuf> = fs::read_dir(input)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    sources.sort();

    fs::create_dir_all(output)?;
    let mut manifest = String::new();
    let mut report = PrepReport::default();
    let mut used_names = HashSet::new();

    for src in &sources {
        let file_name = src
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("unnamed")
            .to_string();
        let image = match read_image(src) {
            Ok(t) => t,
            Err(err) => {
                log::warn!("cannot decode {}: {}", src.display(), err);
                manifest.push_str(&format!(
                    "{}\t0\t{}\t{}\n",
                    file_name, cfg.patch, cfg.stride
                ));
                report.unreadable += 1;
                continue;
            }
        };
        let s = image.shape();
        if s.height < cfg.patch || s.width < cfg.patch {
            log::warn!(
                "skipping {}: {}x{} is smaller than the {} patch",
                src.display(),
                s.height,
                s.width,
                cfg.patch
            );
            report.skipped += 1;
            continue;
        }
        let grid = plan_tiles(s.height, s.width, cfg.patch, cfg.stride)?;
        let stem = src
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("unnamed");
        let dir_name = unique_dir_name(stem, &mut used_names);
        let dir = output.join(&dir_name);
        fs::create_dir_all(&dir)?;
        for &(oy, ox) in &grid.origins {
            let crop = copy_window(&image, oy, ox, cfg.patch);
            write_png(&dir.join(format!("r{}_c{}.png", oy, ox)), &crop)?;
        }
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            dir_name,
            grid.origins.len(),
            cfg.patch,
            cfg.stride
        ));
        report.prepped += 1;
        report.patches += grid.origins.len();
    }

    fs::write(output.join(MANIFEST_NAME), manifest)?;
    Ok(report)
}

/// One prepared image: its subdirectory and the sorted patch files inside.
#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub dir: String,
    pub files: Vec<String>,
}

/// A prepared patch tree, opened through its manifest.
#[derive(Debug, Clone)]
pub struct PatchStore {
    pub root: PathBuf,
    /// Stored patch size; crops are drawn inside this square.
    pub patch: usize,
    pub stride: usize,
    /// Usable images only; unreadable manifest entries are dropped here.
    pub images: Vec<ImageEntry>,
}

/// Open a prepared tree: parse the manifest, verify each listed directory
/// holds exactly the recorded number of patch files, and drop zero-count
/// (unreadable) entries.
pub fn open_store(root: &Path) -> Result<PatchStore> {
    let manifest = fs::read_to_string(root.join(MANIFEST_NAME))?;
    let mut images = Vec::new();
    let mut geometry: Option<(usize, usize)> = None;
    for (ln, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "manifest line {}: expected 4 tab-separated fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let count: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad count", ln + 1)))?;
        let patch: usize = fields[2]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad patch size", ln + 1)))?;
        let stride: usize = fields[3]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad stride", ln + 1)))?;
        match geometry {
            None => geometry = Some((patch, stride)),
            Some(g) if g != (patch, stride) => {
                return Err(Error::format(format!(
                    "manifest line {}: geometry {}x{} disagrees with earlier {}x{}",
                    ln + 1,
                    patch,
                    stride,
                    g.0,
                    g.1
                )));
            }
            Some(_) => {}
        }
        if count == 0 {
            continue;
        }
        let dir = fields[0].to_string();
        let mut files: Vec<String> = fs::read_dir(root.join(&dir))?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".png"))
            .collect();
        files.sort();
        if files.len() != count {
            return Err(Error::format(format!(
                "{}: manifest promises {} patches, directory holds {}",
                dir,
                count,
                files.len()
            )));
        }
        images.push(ImageEntry { dir, files });
    }
    let (patch, stride) = geometry.ok_or_else(|| Error::EmptyDataset {
        root: root.display().to_string(),
    })?;
    if images.is_empty() {
        return Err(Error::EmptyDataset {
            root: root.display().to_string(),
        });
    }
    Ok(PatchStore {
        root: root.to_path_buf(),
        patch,
        stride,
        images,
    })
}

/// Where one sample comes from: image index, patch file index, crop origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSite {
    pub image: usize,
    pub file: usize,
    pub oy: usize,
    pub ox: usize,
}

/// Draw one sample location in three uniform stages: image, patch file
/// within the image, crop origin within the patch. Stage one is uniform over
/// images regardless of how many patches each produced.
pub fn draw_site(store: &PatchStore, train_patch: usize, rng: &mut ChaCha8Rng) -> Result<SampleSite> {
    if train_patch == 0 || train_patch > store.patch {
        return Err(Error::invalid(
            "draw_site",
            format!("crop {} does not fit stored patch {}", train_patch, store.patch),
        ));
    }
    let image = rng.gen_range(0..store.images.len());
    let file = rng.gen_range(0..store.images[image].files.len());
    let room = store.patch - train_patch;
    let oy = rng.gen_range(0..=room);
    let ox = rng.gen_range(0..=room);
    Ok(SampleSite { image, file, oy, ox })
}

/// Decode the patch file behind a site and crop it to the training size.
pub fn load_site(store: &PatchStore, site: &SampleSite, train_patch: usize) -> Result<Tensor> {
    let entry = &store.images[site.image];
    let path = store.root.join(&entry.dir).join(&entry.files[site.file]);
    let patch = read_image(&path)?;
    let s = patch.shape();
    if s.height != store.patch || s.width != store.patch {
        return Err(Error::format(format!(
            "{}: expected a {}x{} patch, decoded {}x{}",
            path.display(),
            store.patch,
            store.patch,
            s.height,
            s.width
        )));
    }
    Ok(copy_window(&patch, site.oy, site.ox, train_patch))
}

/// A matched training pair: ground truth and its degraded partner, both at
/// the training resolution.
pub struct Batch {
    pub hr: Tensor,
    pub lr: Tensor,
}

/// Sample a batch of crops and synthesize their low-resolution partners by
/// downscaling 16x and upscaling back. The crop size must be a multiple of
/// 16 so the round trip lands on the same geometry.
pub fn sample_batch(
    store: &PatchStore,
    train_patch: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if train_patch % LR_FACTOR as usize != 0 {
        return Err(Error::invalid(
            "sample_batch",
            format!("crop {} is not a multiple of {}", train_patch, LR_FACTOR),
        ));
    }
    let min_crop = LR_FACTOR as usize * crate::resample::MIN_DIM;
    if train_patch < min_crop {
        return Err(Error::invalid(
            "sample_batch",
            format!(
                "crop {} leaves less than a {}x{} plane after {}x degradation; need at least {}",
                train_patch,
                crate::resample::MIN_DIM,
                crate::resample::MIN_DIM,
                LR_FACTOR,
                min_crop
            ),
        ));
    }
    let mut data = Vec::with_capacity(batch * 3 * train_patch * train_patch);
    for _ in 0..batch {
        let site = draw_site(store, train_patch, rng)?;
        let crop = load_site(store, &site, train_patch)?;
        data.extend_from_slice(&crop.data());
    }
    let hr = Tensor::from_vec(Shape::new(batch, 3, train_patch, train_patch), data)?;
    let lr = upscale(&downscale(&hr, LR_FACTOR)?, LR_FACTOR)?;
    Ok(Batch { hr, lr })
}
