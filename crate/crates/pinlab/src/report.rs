//! CSV tables. Every writer emits a header row, even for empty tables.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use pinlab_core::amplification::SweepRow;
use pinlab_core::dissect::{AblationStep, ArtifactReport, NoiseResample};
use pinlab_core::generator::BiasRow;
use pinlab_core::training::{MetricsRow, RhoHistogram, VariantRow};

#[derive(Serialize)]
struct AmplifyRecord {
    alpha: f64,
    exact: f64,
    approx: f64,
    empirical_mean: f64,
    empirical_stderr: f64,
    n_seeds: usize,
}

#[derive(Serialize)]
struct MetricsRecord {
    step: u64,
    d_loss: f64,
    g_loss: f64,
    amp_metric: Option<f64>,
}

#[derive(Serialize)]
struct RegionRecord {
    site: usize,
    region_id: usize,
    centroid_h: f64,
    centroid_w: f64,
    n_pixels: usize,
    peak: f64,
    mean: f64,
    contrast: f64,
}

#[derive(Serialize)]
struct RhoRecord {
    site: usize,
    resolution: usize,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

#[derive(Serialize)]
struct CompareRecord {
    variant: &'static str,
    amp_metric: f64,
    final_d_loss: f64,
    final_g_loss: f64,
    region_count: usize,
}

#[derive(Serialize)]
struct BiasRecord {
    channel: usize,
    abs_b_mu: f64,
    abs_b_sigma: f64,
}

#[derive(Serialize)]
struct AblationRecord {
    step: usize,
    added_site: Option<usize>,
    added_channel: Option<usize>,
    n_masked: usize,
    n_regions: usize,
    top_centroid_h: Option<f64>,
    top_centroid_w: Option<f64>,
    top_peak: Option<f64>,
    top_contrast: Option<f64>,
}

#[derive(Serialize)]
struct DistanceRecord {
    seed_a: u64,
    seed_b: u64,
    distance: Option<f64>,
}

#[derive(Serialize)]
struct ProfileRecord {
    channel: usize,
    value: f64,
}

#[derive(Serialize)]
pub struct NormalizationRecord {
    pub site: usize,
    pub stage: &'static str,
    pub channel: usize,
    pub min: f64,
    pub max: f64,
}

fn write_rows<W: Write, T: Serialize>(out: W, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn to_file<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_rows(std::io::BufWriter::new(f), header, rows).with_context(|| format!("writing {}", path.display()))
}

pub const AMPLIFY_HEADER: [&str; 6] = ["alpha", "exact", "approx", "empirical_mean", "empirical_stderr", "n_seeds"];
pub const METRICS_HEADER: [&str; 4] = ["step", "d_loss", "g_loss", "amp_metric"];
pub const REGIONS_HEADER: [&str; 8] = [
    "site", "region_id", "centroid_h", "centroid_w", "n_pixels", "peak", "mean", "contrast",
];
pub const RHO_HEADER: [&str; 6] = ["site", "resolution", "bin", "lo", "hi", "count"];
pub const COMPARE_HEADER: [&str; 5] = ["variant", "amp_metric", "final_d_loss", "final_g_loss", "region_count"];
pub const BIAS_HEADER: [&str; 3] = ["channel", "abs_b_mu", "abs_b_sigma"];
pub const ABLATION_HEADER: [&str; 9] = [
    "step",
    "added_site",
    "added_channel",
    "n_masked",
    "n_regions",
    "top_centroid_h",
    "top_centroid_w",
    "top_peak",
    "top_contrast",
];
pub const DISTANCE_HEADER: [&str; 3] = ["seed_a", "seed_b", "distance"];
pub const PROFILE_HEADER: [&str; 2] = ["channel", "value"];
pub const NORMALIZATION_HEADER: [&str; 5] = ["site", "stage", "channel", "min", "max"];

pub fn write_amplify<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    write_rows(
        out,
        &AMPLIFY_HEADER,
        rows.iter().map(|r| AmplifyRecord {
            alpha: r.alpha,
            exact: r.exact,
            approx: r.approx,
            empirical_mean: r.empirical_mean,
            empirical_stderr: r.empirical_stderr,
            n_seeds: r.n_seeds,
        }),
    )
}

pub fn save_amplify(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_amplify(std::io::BufWriter::new(f), rows)
}

pub fn save_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    to_file(
        path,
        &METRICS_HEADER,
        rows.iter().map(|r| MetricsRecord {
            step: r.step,
            d_loss: r.d_loss,
            g_loss: r.g_loss,
            amp_metric: r.amp_metric,
        }),
    )
}

fn region_records(report: &ArtifactReport) -> impl Iterator<Item = RegionRecord> + '_ {
    report.regions.iter().enumerate().map(|(i, r)| RegionRecord {
        site: report.site,
        region_id: i,
        centroid_h: r.centroid.0,
        centroid_w: r.centroid.1,
        n_pixels: r.n_pixels(),
        peak: r.peak,
        mean: r.mean,
        contrast: r.contrast,
    })
}

pub fn save_regions(path: &Path, report: &ArtifactReport) -> Result<()> {
    to_file(path, &REGIONS_HEADER, region_records(report))
}

pub fn save_rho_histogram(path: &Path, hists: &[RhoHistogram]) -> Result<()> {
    let rows = hists.iter().flat_map(|h| {
        let bins = h.counts.len();
        h.counts.iter().enumerate().map(move |(b, &count)| RhoRecord {
            site: h.site,
            resolution: h.resolution,
            bin: b,
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count,
        })
    });
    to_file(path, &RHO_HEADER, rows)
}

pub fn save_compare(path: &Path, rows: &[VariantRow]) -> Result<()> {
    to_file(
        path,
        &COMPARE_HEADER,
        rows.iter().map(|r| CompareRecord {
            variant: r.variant.name(),
            amp_metric: r.amp_metric,
            final_d_loss: r.final_d_loss,
            final_g_loss: r.final_g_loss,
            region_count: r.region_count,
        }),
    )
}

pub fn save_bias_scatter(path: &Path, rows: &[BiasRow]) -> Result<()> {
    to_file(
        path,
        &BIAS_HEADER,
        rows.iter().map(|r| BiasRecord {
            channel: r.channel,
            abs_b_mu: r.abs_b_mu,
            abs_b_sigma: r.abs_b_sigma,
        }),
    )
}

pub fn save_ablation(path: &Path, steps: &[AblationStep]) -> Result<()> {
    to_file(
        path,
        &ABLATION_HEADER,
        steps.iter().enumerate().map(|(i, s)| {
            let top = s.report.top();
            AblationRecord {
                step: i,
                added_site: s.added.map(|u| u.site),
                added_channel: s.added.map(|u| u.channel),
                n_masked: s.mask.len(),
                n_regions: s.report.regions.len(),
                top_centroid_h: top.map(|r| r.centroid.0),
                top_centroid_w: top.map(|r| r.centroid.1),
                top_peak: top.map(|r| r.peak),
                top_contrast: top.map(|r| r.contrast),
            }
        }),
    )
}

pub fn save_noise_distances(path: &Path, res: &NoiseResample) -> Result<()> {
    to_file(
        path,
        &DISTANCE_HEADER,
        res.distances.iter().map(|d| DistanceRecord {
            seed_a: res.seeds[d.a],
            seed_b: res.seeds[d.b],
            distance: d.distance,
        }),
    )
}

pub fn save_profile(path: &Path, profile: &[f32]) -> Result<()> {
    to_file(
        path,
        &PROFILE_HEADER,
        profile.iter().enumerate().map(|(c, &v)| ProfileRecord {
            channel: c,
            value: v as f64,
        }),
    )
}

pub fn save_normalization(path: &Path, rows: &[NormalizationRecord]) -> Result<()> {
    to_file(path, &NORMALIZATION_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplify_csv_layout() {
        let rows = [SweepRow {
            alpha: 0.5,
            exact: 1.0,
            approx: 1.0,
            empirical_mean: 1.0,
            empirical_stderr: 0.0,
            n_seeds: 2,
        }];
        let mut buf = Vec::new();
        write_amplify(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "alpha,exact,approx,empirical_mean,empirical_stderr,n_seeds\n0.5,1.0,1.0,1.0,0.0,2\n"
        );
    }

    #[test]
    fn empty_table_keeps_header() {
        let mut buf = Vec::new();
        write_amplify(&mut buf, &[]).unwrap();
        assert_eq!(buf, b"alpha,exact,approx,empirical_mean,empirical_stderr,n_seeds\n");
    }

    #[test]
    fn missing_metric_is_empty_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = [
            MetricsRow { step: 1, d_loss: 1.5, g_loss: 0.25, amp_metric: None },
            MetricsRow { step: 2, d_loss: 1.0, g_loss: 0.5, amp_metric: Some(3.0) },
        ];
        save_metrics(&p, &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(p).unwrap(),
            "step,d_loss,g_loss,amp_metric\n1,1.5,0.25,\n2,1.0,0.5,3.0\n"
        );
    }
}
