use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn frontnet(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_frontnet")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
}

fn only_subdir(p: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1);
    dirs[0].clone()
}

#[test]
fn generate_train_evaluate_predict_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    frontnet(&["gen-data", "--out", &s(&data), "--train", "4", "--val", "2", "--size", "224", "--patch", "56"]);
    assert_eq!(fs::read_dir(data.join("train")).unwrap().count(), 12);

    let runs = root.join("runs");
    let (train, val) = (s(&data.join("train")), s(&data.join("val")));
    frontnet(&["train", "--data", &train, "--runs", &s(&runs), "--epochs", "2", "--batch_size", "2", "--val_fraction", "0.25"]);
    let run = only_subdir(&runs);
    for f in ["config.txt", "run.txt", "best.ckpt", "steps.csv", "epochs.csv", "checkpoints/epoch_000.ckpt", "checkpoints/epoch_001.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let record = fs::read_to_string(run.join("run.txt")).unwrap();
    assert!(record.contains("epochs = 2\n") && record.contains("best_epoch = "));
    let epochs = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().next().unwrap(), "epoch,lr,L_t,L_c,L_aux,total,val_macro_iou,degenerate_steps");
    assert_eq!(epochs.lines().count(), 3);

    let ckpt = s(&run.join("best.ckpt"));
    let eval = root.join("eval");
    frontnet(&["evaluate", "--checkpoint", &ckpt, "--data", &val, "--out", &s(&eval)]);
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "row,glacier,season,satellite,resolution,images,precision,recall,f1,iou,mde_m,hd95_m,no_front"
    );
    let rows: Vec<&str> = lines.collect();
    assert!(rows[0].starts_with("scene_0000,") && rows[1].starts_with("scene_0001,"));
    assert!(rows[2].starts_with("ALL,,,,,2,"));
    assert!(fs::read_to_string(eval.join("report.txt")).unwrap().contains("all (2 images)"));

    let pred = root.join("pred");
    frontnet(&["predict", "--checkpoint", &ckpt, "--data", &val, "--scenes", "scene_0001", "--out", &s(&pred)]);
    for f in ["scene_0001_pred_zones.png", "scene_0001_front.csv", "scene_0001_overlay.png"] {
        assert!(pred.join(f).is_file(), "{f}");
    }
    frontnet::io::read_front_csv(&pred.join("scene_0001_front.csv")).unwrap();

    frontnet(&["plot", "--run", &s(&run)]);
    assert!(run.join("loss_curves.png").is_file());
}

#[test]
fn unknown_override_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_frontnet"))
        .args(["train", "--data", "nowhere", "--bogus", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
