//! Report aggregation and rendering.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?} (md or csv)")),
        }
    }
}

/// Arithmetic means over rows. Fidelity averages only rows that have it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub clip_t: f64,
    pub clip_i: f64,
    pub alignment: f64,
    pub coherence: f64,
    pub fidelity: Option<f64>,
    pub n: usize,
    pub fidelity_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub embedding_model: String,
    /// Sorted by sample id.
    pub rows: Vec<MetricRow>,
    pub aggregate: Aggregates,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<(String, String)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn from_rows(model: &str, embedding_model: &str, mut rows: Vec<MetricRow>) -> Self {
        rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let aggregate = Aggregates {
            clip_t: mean(rows.iter().map(|r| r.clip_t)).unwrap_or(0.0),
            clip_i: mean(rows.iter().map(|r| r.clip_i)).unwrap_or(0.0),
            alignment: mean(rows.iter().map(|r| r.alignment as f64)).unwrap_or(0.0),
            coherence: mean(rows.iter().map(|r| r.coherence as f64)).unwrap_or(0.0),
            fidelity: mean(rows.iter().filter_map(|r| r.fidelity)),
            n: rows.len(),
            fidelity_n: rows.iter().filter(|r| r.fidelity.is_some()).count(),
        };
        Self {
            model: model.to_string(),
            embedding_model: embedding_model.to_string(),
            rows,
            aggregate,
            errors: Vec::new(),
        }
    }
}

fn fidelity_cell(f: Option<f64>) -> String {
    f.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// One row per model: CLIP-T, CLIP-I, Ali., Coh., then Fidelity.
/// CLIP values get 3 decimals, judge means are rounded to integers.
pub fn emit_report(reports: &[MetricReport], format: ReportFormat) -> String {
    let mut models: Vec<&str> = reports.iter().map(|r| r.embedding_model.as_str()).collect();
    models.dedup();
    let embed = models.join(", ");
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str(&format!("Embedding model: {embed}. Ali. and Coh. are means over samples.\n\n"));
            out.push_str("| Model | CLIP-T | CLIP-I | Ali. | Coh. | Fidelity |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            for r in reports {
                let a = &r.aggregate;
                out.push_str(&format!(
                    "| {} | {:.3} | {:.3} | {:.0} | {:.0} | {} |\n",
                    r.model,
                    a.clip_t,
                    a.clip_i,
                    a.alignment,
                    a.coherence,
                    fidelity_cell(a.fidelity)
                ));
            }
        }
        ReportFormat::Csv => {
            out.push_str(&format!("# embedding_model: {embed}\n# judge columns: mean over samples\n"));
            out.push_str("model,clip_t,clip_i,alignment,coherence,fidelity\n");
            for r in reports {
                let a = &r.aggregate;
                out.push_str(&format!(
                    "{},{:.3},{:.3},{:.0},{:.0},{}\n",
                    r.model.replace(',', " "),
                    a.clip_t,
                    a.clip_i,
                    a.alignment,
                    a.coherence,
                    a.fidelity.map_or(String::new(), |v| format!("{v:.3}"))
                ));
            }
        }
    }
    out
}

/// Parse model rows back out of either format, as
/// (model, clip_t, clip_i, alignment, coherence, fidelity) text cells.
pub fn parse_csv_report(text: &str) -> Vec<[String; 6]> {
    let md = text.contains("| Model |");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| {
            let cells: Vec<String> = if md {
                if !l.starts_with('|') || l.starts_with("|---") || l.starts_with("| Model") {
                    return None;
                }
                l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
            } else {
                if l.starts_with("model,") {
                    return None;
                }
                l.split(',').map(|c| c.trim().to_string()).collect()
            };
            let mut cells = cells;
            if cells.len() != 6 {
                return None;
            }
            if cells[5] == "-" {
                cells[5].clear();
            }
            Some([0, 1, 2, 3, 4, 5].map(|i| cells[i].clone()))
        })
        .collect()
}
