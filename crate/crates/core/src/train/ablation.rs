//! Seven-row ablation report: every row runs the same folds and seeds.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::loso::{run_loso, LosoOptions};
use super::trainer::TrainConfig;
use crate::error::Result;
use crate::model::{Ablation, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub inputs: String,
    pub mf: bool,
    pub hca: bool,
    pub params: usize,
    pub wa: f64,
    pub ua: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Parameter count of `base` under `ablation`.
pub fn variant_params(base: &ModelConfig, ablation: Ablation) -> Result<usize> {
    let cfg = ModelConfig {
        ablation,
        ..base.clone()
    };
    Ok(Model::<f32>::new(cfg, 0)?.count_params())
}

/// Runs leave-one-speaker-out evaluation for every row of [`Ablation::TABLE`].
pub fn run_ablation(ds: &Dataset, base: &ModelConfig, train: &TrainConfig, opts: &LosoOptions) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(Ablation::TABLE.len());
    for ablation in Ablation::TABLE {
        let cfg = ModelConfig {
            ablation,
            ..base.clone()
        };
        let params = variant_params(base, ablation)?;
        let (report, _) = run_loso(ds, &cfg, train, opts)?;
        rows.push(AblationRow {
            variant: ablation.to_string(),
            inputs: ablation.inputs_label().to_string(),
            mf: ablation.mf,
            hca: ablation.coattention_enabled(),
            params,
            wa: report.mean_wa,
            ua: report.mean_ua,
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        let mut s = format!(
            "{:<14} {:<4} {:<4} {:>10} {:>8} {:>8}\n",
            "inputs", "MF", "HCA", "params", "WA", "UA"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:<4} {:<4} {:>10} {:>8.4} {:>8.4}\n",
                r.inputs,
                mark(r.mf),
                mark(r.hca),
                r.params,
                r.wa,
                r.ua
            ));
        }
        s
    }
}
