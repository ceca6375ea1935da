//! Checkpoint evaluation: predicts every test sample and reports the four
//! matting metrics per image plus their mean, as CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::ckpt::load_checkpoint;
use crate::error::Result;
use crate::img::{AlphaMatte, Sample};
use crate::infer::predict_alpha;
use crate::metrics::{self, MetricReport};
use crate::model::Model;
use crate::synth::load_split;

/// Predicts each sample's matte and scores it against the ground truth.
pub fn evaluate_split(
    model: &Model,
    samples: &[Sample],
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let preds: Vec<AlphaMatte> = samples
        .iter()
        .map(|s| predict_alpha(model, &s.image))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&AlphaMatte, &AlphaMatte)> =
        preds.iter().zip(samples).map(|(p, s)| (p, &s.alpha)).collect();
    metrics::evaluate(&pairs)
}

/// One row per image (ids are the zero-padded sample indices) and a final
/// `mean` row.
pub fn write_report_csv(
    path: &Path,
    reports: &[MetricReport],
    mean: &MetricReport,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", MetricReport::csv_header())?;
    for (i, report) in reports.iter().enumerate() {
        writeln!(w, "{}", report.csv_row(&format!("{i:04}")))?;
    }
    writeln!(w, "{}", mean.csv_row("mean"))?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, scores it on the dataset's test split, and writes the
/// CSV. Returns the per-image reports and their mean.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data: &Path,
    out_csv: &Path,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let (model, _, _) = load_checkpoint(checkpoint)?;
    let samples = load_split(data, "test")?;
    let (reports, mean) = evaluate_split(&model, &samples)?;
    write_report_csv(out_csv, &reports, &mean)?;
    Ok((reports, mean))
}
