use std::fs;

use frontnet::caffe::{load_caffe_directory, zone_classes};
use frontnet::checkpoint;
use frontnet::config::RunConfig;
use frontnet::io::{load_scene, read_front_csv, save_scene, write_front_csv, write_gray_png};
use frontnet_core::data::{generate_scene, Raster};
use frontnet_core::eval::FrontSet;
use frontnet_core::model::Model;
use frontnet_core::nn::ParamId;

#[test]
fn scene_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(7, 96, 130, 30.0, 24).unwrap();
    save_scene(dir.path(), "a", &s).unwrap();
    assert_eq!(load_scene(dir.path(), "a").unwrap(), s);
}

#[test]
fn front_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    let front = FrontSet {
        pixels: vec![(0, 3), (4, 1), (17, 200)],
        meters_per_pixel: 6.5,
    };
    write_front_csv(&p, &front).unwrap();
    assert_eq!(read_front_csv(&p).unwrap(), front);
    let empty = FrontSet {
        pixels: vec![],
        meters_per_pixel: 20.0,
    };
    write_front_csv(&p, &empty).unwrap();
    assert_eq!(read_front_csv(&p).unwrap(), empty);
    fs::write(&p, "row,col\n1,2\n").unwrap();
    assert!(read_front_csv(&p).is_err());
}

#[test]
fn benchmark_gray_levels_map_to_classes() {
    let raw = Raster::new(1, 4, vec![0, 64, 127, 254]).unwrap();
    assert_eq!(zone_classes(&raw).data, [0, 1, 2, 3]);
    let already = Raster::new(1, 3, vec![3, 0, 2]).unwrap();
    assert_eq!(zone_classes(&already), already);
}

#[test]
fn benchmark_layout_loads_good_pairs_and_reports_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let img = Raster::from_fn(8, 10, |r, c| (r * 10 + c) as u8);
    let zones = Raster::from_fn(8, 10, |_, c| [0u8, 64, 127, 254][c * 4 / 10]);
    let good = "Mapple_2008-10-13_TSX_7_3";
    let (imgs, zdir) = (root.join("sar_images/train"), root.join("zones/train"));
    fs::create_dir_all(&imgs).unwrap();
    fs::create_dir_all(&zdir).unwrap();
    write_gray_png(&imgs.join(format!("{good}.png")), &img).unwrap();
    write_gray_png(&zdir.join(format!("{good}_zones.png")), &zones).unwrap();
    write_gray_png(&imgs.join("notes.png"), &img).unwrap();
    write_gray_png(&imgs.join("JAC_2015-01-02_S1_20_2.png"), &img).unwrap();
    let (scenes, issues) = load_caffe_directory(root).unwrap();
    assert_eq!(scenes.len(), 1);
    let (name, s) = &scenes[0];
    assert_eq!(name, good);
    assert_eq!(s.meters_per_pixel, 7.0);
    assert_eq!(s.meta.glacier_id, "Mapple");
    assert_eq!(s.image, img);
    assert_eq!(s.zones.data.iter().copied().max(), Some(3));
    assert_eq!(issues.len(), 2);
    assert!(issues.iter().any(|i| i.reason.contains("missing zone label")));
    assert!(issues.iter().any(|i| i.reason.contains("file name")));
}

fn tiny_store(seed: u64) -> (RunConfig, frontnet_core::nn::ParamStore<f32>) {
    let cfg = RunConfig::default();
    let (_, store) = Model::new::<f32>(cfg.train.model.clone(), seed).unwrap();
    (cfg, store)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let (mut cfg, store) = tiny_store(3);
    cfg.set("tau", "0.2").unwrap();
    checkpoint::save(&p, &cfg, &store).unwrap();
    let (cfg2, _, loaded) = checkpoint::load(&p).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(loaded.len(), store.len());
    for i in 0..store.len() {
        let id = ParamId(i);
        assert_eq!(loaded.name(id), store.name(id));
        assert_eq!(loaded.get(id), store.get(id));
    }
}

#[test]
fn checkpoint_rejects_mismatch_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let (mut cfg, store) = tiny_store(0);
    cfg.set("context_dim", "12").unwrap();
    checkpoint::save(&p, &cfg, &store).unwrap();
    assert!(checkpoint::load(&p).is_err());

    let (cfg, store) = tiny_store(0);
    checkpoint::save(&p, &cfg, &store).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(checkpoint::read(&p).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&p, &bad).unwrap();
    assert!(checkpoint::read(&p).is_err());
}
