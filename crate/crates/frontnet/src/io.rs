//! Scene rasters as PNG, metadata sidecars and front CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use frontnet_core::data::{Raster, Scene, SceneMeta, Season};
use frontnet_core::eval::FrontSet;

use crate::config::parse_kv;

pub fn read_gray_png(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster::new(h as usize, w as usize, img.into_raw())?)
}

pub fn write_gray_png(path: &Path, r: &Raster<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(r.width as u32, r.height as u32, r.data.clone())
        .context("raster size does not fit an image")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb).context("rgb buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn meta_text(meta: &SceneMeta, mpp: f64) -> String {
    let mut s = format!(
        "glacier_id = {}\nseason = {}\nsatellite = {}\nmeters_per_pixel = {}\nresolution_class = {}\n",
        meta.glacier_id,
        meta.season.name(),
        meta.satellite,
        mpp,
        meta.resolution_class
    );
    if let Some(d) = &meta.date {
        s.push_str(&format!("date = {d}\n"));
    }
    s
}

/// Parses a sidecar; returns the metadata and meters per pixel.
pub fn parse_meta(text: &str) -> Result<(SceneMeta, f64)> {
    let kv = parse_kv(text)?;
    let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let need = |k: &str| get(k).with_context(|| format!("sidecar is missing `{k}`"));
    let mpp: f64 = need("meters_per_pixel")?.parse().context("meters_per_pixel")?;
    let season = need("season")?;
    let meta = SceneMeta {
        glacier_id: need("glacier_id")?.into(),
        season: Season::parse(season).with_context(|| format!("unknown season `{season}`"))?,
        satellite: need("satellite")?.into(),
        resolution_class: match get("resolution_class") {
            Some(v) => v.parse().context("resolution_class")?,
            None => mpp,
        },
        date: get("date").map(String::from),
    };
    Ok((meta, mpp))
}

/// `<dir>/<name>.png`, `<dir>/<name>_zones.png`, `<dir>/<name>.meta`.
pub fn save_scene(dir: &Path, name: &str, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_gray_png(&dir.join(format!("{name}.png")), &scene.image)?;
    write_gray_png(&dir.join(format!("{name}_zones.png")), &scene.zones)?;
    fs::write(dir.join(format!("{name}.meta")), meta_text(&scene.meta, scene.meters_per_pixel))?;
    Ok(())
}

pub fn load_scene(dir: &Path, name: &str) -> Result<Scene> {
    let image = read_gray_png(&dir.join(format!("{name}.png")))?;
    let zones = read_gray_png(&dir.join(format!("{name}_zones.png")))?;
    let meta_path = dir.join(format!("{name}.meta"));
    let text = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let (meta, mpp) = parse_meta(&text).with_context(|| meta_path.display().to_string())?;
    Ok(Scene::new(image, zones, mpp, meta)?)
}

/// Names of all scenes (sidecar stems) in `dir`, sorted.
pub fn scene_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "meta") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(s.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_scenes(dir: &Path) -> Result<Vec<(String, Scene)>> {
    scene_names(dir)?
        .into_iter()
        .map(|n| load_scene(dir, &n).map(|s| (n, s)))
        .collect()
}

/// `# meters_per_pixel = …` header, then `row,col` lines.
pub fn write_front_csv(path: &Path, front: &FrontSet) -> Result<()> {
    let mut s = format!("# meters_per_pixel = {}\nrow,col\n", front.meters_per_pixel);
    for (r, c) in &front.pixels {
        s.push_str(&format!("{r},{c}\n"));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_front_csv(path: &Path) -> Result<FrontSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty front file")?;
    let Some(mpp) = header.strip_prefix("# meters_per_pixel =") else {
        bail!("missing meters_per_pixel header in {}", path.display());
    };
    let meters_per_pixel: f64 = mpp.trim().parse()?;
    let body = lines.collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut pixels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<usize> { Ok(rec.get(i).context("front row needs two columns")?.trim().parse()?) };
        pixels.push((field(0)?, field(1)?));
    }
    Ok(FrontSet { pixels, meters_per_pixel })
}

pub fn ensure_dir(p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(p.to_path_buf())
}
