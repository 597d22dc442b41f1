//! CSV and text renderings of logs, metric reports and ablation tables.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use frontnet_core::eval::{ImageResult, MetricsReport, PairDistances, HdMode, Summary};
use frontnet_core::train::{AblationArm, EpochLog, StepLog};

/// Metric columns of the per-image and aggregate report rows.
pub const METRIC_COLUMNS: [&str; 7] = ["precision", "recall", "f1", "iou", "mde_m", "hd95_m", "no_front"];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

pub fn write_steps_csv(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "L_t", "L_c", "L_cds", "total", "lr"])?;
    for s in steps {
        w.write_record([s.step.to_string(), s.l_t.to_string(), s.l_c.to_string(), s.aux.to_string(), s.total.to_string(), s.lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_epochs_csv(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "L_t", "L_c", "L_aux", "total", "val_macro_iou", "degenerate_steps"])?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.l_t.to_string(),
            e.l_c.to_string(),
            e.aux.to_string(),
            e.total.to_string(),
            e.val_macro_iou.to_string(),
            e.degenerate_steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn summary_cells(s: &Summary) -> Vec<String> {
    let m = &s.seg.macro_avg;
    vec![
        m.precision.to_string(),
        m.recall.to_string(),
        m.f1.to_string(),
        m.iou.to_string(),
        opt(s.mde_m),
        opt(s.hd95_m),
        s.no_front.to_string(),
    ]
}

/// One row per image, then one `ALL` row and one row per group.
pub fn write_metrics_csv(path: &Path, results: &[ImageResult], report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row", "glacier", "season", "satellite", "resolution", "images"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for r in results {
        let m = &r.seg.macro_avg;
        let (mde, hd95) = if r.gt_front.is_empty() || r.pred_front.is_empty() {
            (String::new(), String::new())
        } else {
            let d = PairDistances::new(&r.gt_front, &r.pred_front);
            let n = (d.p_to_q.len() + d.q_to_p.len()) as f64;
            let mde = (d.p_to_q.iter().sum::<f64>() + d.q_to_p.iter().sum::<f64>()) / n * d.meters_per_pixel;
            (mde.to_string(), d.hausdorff(HdMode::Directed95).to_string())
        };
        w.write_record([
            r.name.clone(),
            r.meta.glacier_id.clone(),
            r.meta.season.name().into(),
            r.meta.satellite.clone(),
            r.meta.resolution_class.to_string(),
            "1".into(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.iou.to_string(),
            mde,
            hd95,
            (r.pred_front.is_empty() as u8).to_string(),
        ])?;
    }
    let mut agg = |label: String, s: &Summary| -> Result<()> {
        let mut row = vec![label, String::new(), String::new(), String::new(), String::new(), s.images.to_string()];
        row.extend(summary_cells(s));
        w.write_record(&row)?;
        Ok(())
    };
    agg("ALL".into(), &report.overall)?;
    for ((key, value), s) in &report.groups {
        agg(format!("{}={}", key.name(), value), s)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>, width: usize) -> String {
    match v {
        Some(v) => format!("{v:>width$.1}"),
        None => format!("{:>width$}", "-"),
    }
}

/// Human-readable table: zone metrics (×100) and front metrics overall,
/// then front metrics per group.
pub fn text_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    let o = &report.overall;
    let m = &o.seg.macro_avg;
    let _ = writeln!(s, "{:<24}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>6}", "", "Precision", "Recall", "F1-score", "IoU", "MDE [m]", "HD95 [m]", "∅");
    let _ = writeln!(
        s,
        "{:<24}{:>10.1}{:>10.1}{:>10.1}{:>10.1}{}{}{:>6}",
        format!("all ({} images)", o.images),
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f1,
        100.0 * m.iou,
        fmt_opt(o.mde_m, 10),
        fmt_opt(o.hd95_m, 10),
        o.no_front
    );
    let names = ["NA", "rock", "glacier", "ocean"];
    let _ = writeln!(s, "\nper-class IoU");
    for (k, n) in names.iter().enumerate() {
        let _ = writeln!(s, "  {:<10}{:>8.1}", n, 100.0 * o.seg.per_class[k].iou);
    }
    let _ = writeln!(s, "\n{:<32}{:>8}{:>10}{:>10}{:>6}", "group", "images", "MDE [m]", "HD95 [m]", "∅");
    for ((key, value), g) in &report.groups {
        let _ = writeln!(
            s,
            "{:<32}{:>8}{}{}{:>6}",
            format!("{}={}", key.name(), value),
            g.images,
            fmt_opt(g.mde_m, 10),
            fmt_opt(g.hd95_m, 10),
            g.no_front
        );
    }
    s
}

fn pm(v: (f64, f64), scale: f64, prec: usize) -> String {
    format!("{:.prec$}±{:.prec$}", v.0 * scale, v.1 * scale)
}

/// Arms as rows: hook flags, supervision, then IoU (×100), MDE, HD95 and ∅
/// as mean ± std over seeds.
pub fn ablation_table(arms: &[AblationArm]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6}{:<6}{:<6}{:<6}{:<6}{:>14}{:>18}{:>18}{:>12}  seeds",
        "SA", "SENet", "CBAM", "ESCA", "sup", "IoU", "MDE [m]", "HD95 [m]", "∅"
    );
    for a in arms {
        let mark = |k: &str| if a.hook.map(|h| h.name()) == Some(k) { "x" } else { "" };
        let [iou, mde, hd] = a.stats();
        let nf: Vec<f64> = a.runs.iter().map(|r| r.no_front as f64).collect();
        let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{:<6}{:<6}{:<6}{:<6}{:<6}{:>14}{:>18}{:>18}{:>12}  {}",
            mark("sa"),
            mark("senet"),
            mark("cbam"),
            mark("esca"),
            a.supervision.name(),
            pm(iou, 100.0, 1),
            pm(mde, 1.0, 1),
            pm(hd, 1.0, 1),
            pm(frontnet_core::train::mean_std(&nf), 1.0, 1),
            seeds.join(",")
        );
    }
    s
}

pub fn write_ablation_csv(path: &Path, arms: &[AblationArm]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["hook", "supervision", "seed", "iou", "mde_m", "hd95_m", "no_front"])?;
    for a in arms {
        for (seed, r) in a.seeds.iter().zip(&a.runs) {
            w.write_record([
                a.hook.map_or("none", |h| h.name()).to_string(),
                a.supervision.name().to_string(),
                seed.to_string(),
                r.seg.macro_avg.iou.to_string(),
                opt(r.mde_m),
                opt(r.hd95_m),
                r.no_front.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
