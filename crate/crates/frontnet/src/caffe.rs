//! Loader for the benchmark's directory layout.
//!
//! Images live under `sar_images/` and zone labels under `zones/` with the
//! same relative path and a `_zones` suffix; a directory without those two
//! subfolders is read flat with images and labels side by side. Zone PNGs
//! use gray levels 0/64/127/254 for NA/rock/glacier/ocean; rasters already
//! holding 0..=3 are taken as is.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use frontnet_core::data::{parse_caffe_name, Raster, Scene};

use crate::io::read_gray_png;

/// A file that could not be turned into a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub reason: String,
}

fn pngs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            pngs(&p, out)?;
        } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Maps benchmark gray levels to class indices.
pub fn zone_classes(raw: &Raster<u8>) -> Raster<u8> {
    if raw.data.iter().all(|&v| v <= 3) {
        return raw.clone();
    }
    raw.map(|v| match v {
        0..=31 => 0,
        32..=95 => 1,
        96..=190 => 2,
        _ => 3,
    })
}

/// One scene per well-formed image/label pair plus the files that failed.
pub fn load_caffe_directory(root: &Path) -> Result<(Vec<(String, Scene)>, Vec<LoadIssue>)> {
    let (img_dir, zone_dir) = if root.join("sar_images").is_dir() && root.join("zones").is_dir() {
        (root.join("sar_images"), root.join("zones"))
    } else {
        (root.to_path_buf(), root.to_path_buf())
    };
    let mut files = Vec::new();
    pngs(&img_dir, &mut files)?;
    let mut scenes = Vec::new();
    let mut issues = Vec::new();
    for path in files {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if stem.ends_with("_zones") {
            continue;
        }
        let issue = |reason: String| LoadIssue {
            path: path.clone(),
            reason,
        };
        let Some(name) = parse_caffe_name(stem) else {
            issues.push(issue("file name does not follow <glacier>_<date>_<satellite>_<resolution>_…".into()));
            continue;
        };
        let rel = path.parent().and_then(|p| p.strip_prefix(&img_dir).ok()).unwrap_or(Path::new(""));
        let zone_path = zone_dir.join(rel).join(format!("{stem}_zones.png"));
        if !zone_path.is_file() {
            issues.push(issue(format!("missing zone label {}", zone_path.display())));
            continue;
        }
        let loaded = read_gray_png(&path).and_then(|img| {
            let zones = zone_classes(&read_gray_png(&zone_path)?);
            Ok(Scene::new(img, zones, name.resolution, name.meta())?)
        });
        match loaded {
            Ok(s) => scenes.push((stem.to_string(), s)),
            Err(e) => issues.push(issue(format!("{e:#}"))),
        }
    }
    Ok((scenes, issues))
}
