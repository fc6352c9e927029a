//! Plot-ready text exports: channel images and learning-curve tables.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::Method;
use super::sweep::{median, SweepRow};
use crate::channels::ChannelMatrix;
use crate::error::Result;
use crate::observers::ObserverModel;
use crate::persist;

/// Writes one whitespace-separated `side x side` text file per channel:
/// `<prefix>_ch<k>.txt`. Returns the written paths.
pub fn export_channel_images(channels: &ChannelMatrix, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(channels.channel_count());
    for k in 0..channels.channel_count() {
        let path = dir.join(format!("{prefix}_ch{k}.txt"));
        persist::write_atomic(&path, channels.channel_image_text(k).as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

/// Writes the image-domain template of an observer as a `side x side` grid.
pub fn export_template_image(model: &ObserverModel, path: &Path) -> Result<()> {
    let side = model.side();
    let t = model.image_template();
    let mut text = String::new();
    for y in 0..side {
        let line: Vec<String> = (0..side).map(|x| t[y * side + x].to_string()).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    persist::write_atomic(path, text.as_bytes())
}

/// One row per (method, subset): median and spread of the test AUC across
/// restarts. Failed cells are counted but excluded from the statistics.
pub fn learning_curves(rows: &[SweepRow]) -> String {
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.method, r.subset)) {
            keys.push((r.method, r.subset));
        }
    }
    keys.sort_by_key(|&(m, k)| (m as u8, k));
    let mut out = String::from("method subset n_ok n_failed median_auc min_auc max_auc median_std_error\n");
    for (method, subset) in keys {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.method == method && r.subset == subset).collect();
        let ok: Vec<&&SweepRow> = group.iter().filter(|r| r.is_ok()).collect();
        let aucs: Vec<f64> = ok.iter().map(|r| r.test_auc_binormal).collect();
        let ses: Vec<f64> = ok.iter().map(|r| r.test_auc_std_error).collect();
        let min = aucs.iter().copied().fold(f64::NAN, f64::min);
        let max = aucs.iter().copied().fold(f64::NAN, f64::max);
        out.push_str(&format!(
            "{method} {subset} {} {} {} {min} {max} {}\n",
            ok.len(),
            group.len() - ok.len(),
            median(&aucs),
            median(&ses)
        ));
    }
    out
}

pub fn write_learning_curves(rows: &[SweepRow], path: &Path) -> Result<()> {
    persist::write_atomic(path, learning_curves(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, subset: usize, auc: f64, status: &str) -> SweepRow {
        SweepRow {
            method,
            subset,
            restart: 0,
            seed: 0,
            hyperparameters: "-".into(),
            channels: 1,
            degenerate: false,
            validation_auc: auc,
            test_auc_empirical: auc,
            test_auc_binormal: auc,
            test_auc_std_error: 0.01,
            test_snr: 1.0,
            status: status.into(),
        }
    }

    #[test]
    fn curves_take_medians_and_count_failures() {
        let rows = vec![
            row(Method::AeTask, 100, 0.7, "ok"),
            row(Method::AeTask, 100, 0.9, "ok"),
            row(Method::AeTask, 100, 0.8, "ok"),
            row(Method::AeTask, 100, f64::NAN, "failed: x"),
            row(Method::Pls, 100, 0.75, "ok"),
        ];
        let text = learning_curves(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "ae_task 100 3 1 0.8 0.7 0.9 0.01");
        assert!(lines[2].starts_with("pls 100 1 0 0.75"));
    }
}
