//! Ablation runner: trains model variants under one shared budget and seed,
//! scores each on the test split, and formats the comparison table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ckpt::load_checkpoint;
use crate::error::{MatteError, Result};
use crate::evaluate::evaluate_split;
use crate::metrics::MetricReport;
use crate::model::FusionMode;
use crate::synth::load_split;
use crate::train::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    GuidanceTaps,
    FusionMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    /// Guidance tap set; required on the guidance axis.
    #[serde(default)]
    pub taps: Option<Vec<usize>>,
    /// Fusion rule; required on the fusion axis.
    #[serde(default)]
    pub fusion: Option<FusionMode>,
    /// Published full-scale SAD shown beside the measured row for context.
    /// Never asserted against.
    #[serde(default)]
    pub reference_sad: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub variants: Vec<AblationVariant>,
    pub train: TrainConfig,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.len() < 2 {
            return Err(MatteError::Config("an ablation needs at least 2 variants".into()));
        }
        for v in &self.variants {
            let ok = match self.axis {
                AblationAxis::GuidanceTaps => v.taps.is_some(),
                AblationAxis::FusionMode => v.fusion.is_some(),
            };
            if !ok {
                return Err(MatteError::Config(format!(
                    "variant {:?} is missing the field for axis {:?}",
                    v.name, self.axis
                )));
            }
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub mean: MetricReport,
    pub reference_sad: Option<f64>,
}

fn slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

/// Trains and evaluates every variant with identical seeds and budget.
/// Each variant's run lands in `out/NN-<slug>/`; the formatted table is
/// written to `out/table.txt` and returned row by row.
pub fn ablate(spec: &AblationSpec, out: &Path) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let test = load_split(&spec.train.dataset, "test")?;
    let mut rows = Vec::with_capacity(spec.variants.len());
    for (i, variant) in spec.variants.iter().enumerate() {
        let mut config = spec.train.clone();
        match spec.axis {
            AblationAxis::GuidanceTaps => {
                config.model.guidance_taps = variant.taps.clone().expect("validated");
            }
            AblationAxis::FusionMode => {
                config.model.fusion = variant.fusion.expect("validated");
            }
        }
        let dir = out.join(format!("{:02}-{}", i, slug(&variant.name)));
        train(&config, &dir)?;
        let (model, _, _) = load_checkpoint(&dir.join("final"))?;
        let (_, mean) = evaluate_split(&model, &test)?;
        rows.push(AblationRow {
            name: variant.name.clone(),
            mean,
            reference_sad: variant.reference_sad,
        });
    }
    fs::write(out.join("table.txt"), format_table(&rows))?;
    Ok(rows)
}

/// Fixed-width table, one variant per row, with the optional published SAD
/// in the last column.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<18} {:>10} {:>10} {:>10} {:>10} {:>15}\n",
        "variant", "SAD", "MSE", "Grad", "Conn", "reference SAD"
    );
    for row in rows {
        let reference = match row.reference_sad {
            Some(v) => format!("{v:.2}"),
            None => "-".to_string(),
        };
        s.push_str(&format!(
            "{:<18} {:>10.3} {:>10.5} {:>10.3} {:>10.3} {:>15}\n",
            row.name, row.mean.sad, row.mean.mse, row.mean.grad, row.mean.conn, reference
        ));
    }
    s
}
