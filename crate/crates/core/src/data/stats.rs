//! Image-level (mean, std) statistics grouped by domain.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::preprocess::load_gray;
use crate::error::{Error, Result};
use crate::scalar::EPSILON;
use crate::style::channel_stats;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub path: String,
    pub domain: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: usize,
    pub count: usize,
    pub centroid: [f64; 2],
    /// Root-mean-square distance of the domain's points to its centroid.
    pub rms_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistance {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub domains: Vec<DomainSummary>,
    pub pairwise: Vec<CentroidDistance>,
    pub mean_within_spread: f64,
    pub min_pairwise_distance: f64,
    /// Fraction of images whose nearest centroid is their own domain's.
    pub nearest_centroid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub rows: Vec<ImageStats>,
    pub summary: StatsSummary,
}

/// `(mean, sqrt(var + ε))` of one single-channel image on the 0–255 scale.
pub fn image_stats(pixels: &Tensor<f64>) -> Result<(f64, f64)> {
    let s = channel_stats(pixels, EPSILON)?;
    Ok((s.mean[0], s.std[0]))
}

pub fn summarize(rows: &[ImageStats]) -> StatsSummary {
    let mut ids: Vec<usize> = rows.iter().map(|r| r.domain).collect();
    ids.sort_unstable();
    ids.dedup();
    let domains: Vec<DomainSummary> = ids
        .iter()
        .map(|&d| {
            let pts: Vec<[f64; 2]> = rows
                .iter()
                .filter(|r| r.domain == d)
                .map(|r| [r.mean, r.std])
                .collect();
            let n = pts.len() as f64;
            let c = [
                pts.iter().map(|p| p[0]).sum::<f64>() / n,
                pts.iter().map(|p| p[1]).sum::<f64>() / n,
            ];
            let ms = pts.iter().map(|p| dist2(*p, c)).sum::<f64>() / n;
            DomainSummary {
                domain: d,
                count: pts.len(),
                centroid: c,
                rms_spread: ms.sqrt(),
            }
        })
        .collect();
    let mut pairwise = Vec::new();
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            pairwise.push(CentroidDistance {
                a: domains[i].domain,
                b: domains[j].domain,
                distance: dist2(domains[i].centroid, domains[j].centroid).sqrt(),
            });
        }
    }
    let correct = rows
        .iter()
        .filter(|r| {
            let p = [r.mean, r.std];
            domains
                .iter()
                .min_by(|a, b| dist2(p, a.centroid).total_cmp(&dist2(p, b.centroid)))
                .is_some_and(|d| d.domain == r.domain)
        })
        .count();
    StatsSummary {
        mean_within_spread: domains.iter().map(|d| d.rms_spread).sum::<f64>()
            / domains.len().max(1) as f64,
        min_pairwise_distance: pairwise
            .iter()
            .map(|p| p.distance)
            .fold(f64::INFINITY, f64::min),
        nearest_centroid_accuracy: correct as f64 / rows.len().max(1) as f64,
        domains,
        pairwise,
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Reads every image in the manifest; unreadable files are collected and
/// reported together.
pub fn stats_report(manifest: &DatasetManifest, root: &Path) -> Result<StatsReport> {
    let results: Vec<Result<ImageStats>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let img = load_gray(&root.join(&r.path))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let t = Tensor::new(&[1, h, w], img.as_raw().iter().map(|&p| p as f64).collect())?;
            let (mean, std) = image_stats(&t)?;
            Ok(ImageStats {
                path: r.path.clone(),
                domain: r.domain,
                mean,
                std,
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => rows.push(s),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Other(format!(
            "{} image(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    rows.sort_by_key(|r| r.domain);
    let summary = summarize(&rows);
    Ok(StatsReport { rows, summary })
}

/// Writes `stats.csv` and `stats_summary.json` into `dir`.
pub fn write_stats(report: &StatsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv_path = dir.join("stats.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::Other(format!("{}: {e}", csv_path.display())))?;
    for r in &report.rows {
        w.serialize(r)
            .map_err(|e| Error::Other(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    let json_path = dir.join("stats_summary.json");
    let text = serde_json::to_string_pretty(&report.summary)?;
    std::fs::write(&json_path, text)
        .map_err(|e| Error::io(format!("writing {}", json_path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image() {
        let (m, s) = image_stats(&Tensor::full(&[1, 4, 4], 80.0)).unwrap();
        assert_eq!(m, 80.0);
        assert!((s - EPSILON.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_domains_coincide() {
        let rows: Vec<ImageStats> = (0..20)
            .map(|i| ImageStats {
                path: format!("{i}"),
                domain: i % 2,
                mean: 100.0 + (i / 2) as f64,
                std: 20.0 + (i / 2) as f64,
            })
            .collect();
        let s = summarize(&rows);
        assert!(s.pairwise[0].distance < 1e-12);
        assert_eq!(s.domains.len(), 2);
        assert!((s.domains[0].rms_spread - s.domains[1].rms_spread).abs() < 1e-12);
    }

    #[test]
    fn separated_domains_classified() {
        let rows: Vec<ImageStats> = (0..30)
            .map(|i| ImageStats {
                path: String::new(),
                domain: i % 3,
                mean: 50.0 * (i % 3) as f64 + (i % 5) as f64,
                std: 10.0,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.nearest_centroid_accuracy, 1.0);
        assert!((s.min_pairwise_distance - 50.0).abs() < 1e-9);
    }
}
