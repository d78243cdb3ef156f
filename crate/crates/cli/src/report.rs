//! Report structures produced by the pipeline, plus CSV flattening.
//! Everything here serializes deterministically: vectors are built in a
//! fixed order and maps are sorted, so identical runs yield identical
//! bytes.

use mergeguard::analysis::{DensityReport, GeometryReport};
use mergeguard::defense::ProtectReport;
use mergeguard::merging::AdaOutcome;
use mergeguard::toymodels::EvalMetrics;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub model: String,
    pub task: String,
    pub accuracy: f64,
    pub ce_loss: f64,
    pub mean_entropy: f64,
}

impl EvalEntry {
    pub fn new(model: &str, task: &str, m: EvalMetrics) -> Self {
        Self {
            model: model.to_string(),
            task: task.to_string(),
            accuracy: m.accuracy,
            ce_loss: m.ce_loss,
            mean_entropy: m.mean_entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedProtectReport {
    pub variant: String,
    pub report: ProtectReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub method: String,
    pub variant: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ada: Option<AdaOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmaskReport {
    pub lambda: f64,
    pub merge_method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEraseReport {
    pub retrain_data_frac: f64,
    pub epochs: usize,
    pub lr: f64,
    pub subset_size: usize,
    /// |<total update, v_disturb>| / (||update|| ||v||); near zero by
    /// construction.
    pub orthogonality_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackRunReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unmask: Option<UnmaskReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graderase: Option<GradEraseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedGeometry {
    pub pair: String,
    pub report: GeometryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDensity {
    pub vector: String,
    pub report: DensityReport,
}

/// One node of the artifact DAG: a relative path, its content hash, and
/// the hashes of the artifacts it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub kind: String,
    pub hash: String,
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRunReport {
    pub seed: u64,
    pub evals: Vec<EvalEntry>,
    pub merges: Vec<MergeRecord>,
    pub protect: Vec<NamedProtectReport>,
    pub attack: AttackRunReport,
    pub geometry: Vec<NamedGeometry>,
    pub density: Vec<NamedDensity>,
    pub artifacts: Vec<ArtifactRecord>,
}

impl SeedRunReport {
    pub fn acc(&self, model: &str, task: &str) -> Option<f64> {
        self.evals
            .iter()
            .find(|e| e.model == model && e.task == task)
            .map(|e| e.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub model: String,
    pub task: String,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seeds: Vec<SeedRunReport>,
    pub summary: Vec<SummaryEntry>,
}

impl ExperimentReport {
    pub fn mean_acc(&self, model: &str, task: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.model == model && s.task == task)
            .map(|s| s.mean_accuracy)
    }

    pub fn build_summary(seeds: &[SeedRunReport]) -> Vec<SummaryEntry> {
        let mut out = Vec::new();
        if seeds.is_empty() {
            return out;
        }
        for entry in &seeds[0].evals {
            let accs: Vec<f64> = seeds
                .iter()
                .filter_map(|s| s.acc(&entry.model, &entry.task))
                .collect();
            if accs.len() == seeds.len() {
                out.push(SummaryEntry {
                    model: entry.model.clone(),
                    task: entry.task.clone(),
                    mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                });
            }
        }
        out
    }

    /// Flat CSV of every (seed, model, task) evaluation row.
    pub fn evals_csv(&self) -> String {
        let mut out = String::from("seed,model,task,accuracy,ce_loss,mean_entropy\n");
        for seed in &self.seeds {
            for e in &seed.evals {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    seed.seed, e.model, e.task, e.accuracy, e.ce_loss, e.mean_entropy
                );
            }
        }
        out
    }

    /// Flat CSV of geometry and density diagnostics.
    pub fn geometry_csv(&self) -> String {
        let mut out = String::from("seed,kind,name,angle_phi,cos_phi,interference,top_frac_mass,gini\n");
        for seed in &self.seeds {
            for g in &seed.geometry {
                let _ = writeln!(
                    out,
                    "{},angle,{},{},{},{},,",
                    seed.seed, g.pair, g.report.angle_phi, g.report.cos_phi, g.report.interference
                );
            }
            for d in &seed.density {
                let _ = writeln!(
                    out,
                    "{},density,{},,,,{},{}",
                    seed.seed, d.vector, d.report.top_frac_mass, d.report.gini
                );
            }
        }
        out
    }
}
