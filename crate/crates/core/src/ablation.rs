//! Partition-grid and component ablations: one model per configuration,
//! identical data and seeds, every model scored over all repetitions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::comment_block;
use crate::datasets::{EvalProtocol, ImageLibrary};
use crate::error::{Error, Result};
use crate::head::{Components, PartitionScheme};
use crate::model::check_compatible;
use crate::retrieval::evaluate;
use crate::training::{train, TrainConfig};

pub const H_PARTS: [usize; 4] = [1, 2, 3, 4];
pub const V_PARTS: [usize; 3] = [1, 2, 3];
pub const COMPONENT_ORDER: [Components; 3] = [Components::GlobalOnly, Components::LocalOnly, Components::Both];

/// Reference rank-1 / mAP (%) on the full-scale right-palmar benchmark,
/// rows `H_p = 1..4`, columns `V_p = 1..3`.
pub const REFERENCE_GRID: [[(f64, f64); 3]; 4] = [
    [(91.19, 92.14), (93.45, 94.40), (92.16, 93.20)],
    [(93.05, 94.01), (94.06, 94.83), (93.60, 94.21)],
    [(95.83, 96.31), (95.39, 95.95), (94.07, 94.80)],
    [(95.42, 95.95), (94.41, 95.08), (93.81, 94.50)],
];

pub fn reference_components(c: Components) -> (f64, f64) {
    match c {
        Components::GlobalOnly => (91.19, 92.14),
        Components::LocalOnly => (94.33, 94.91),
        Components::Both => (95.83, 96.31),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Cell {
    Done { rank1: f64, map: f64 },
    Infeasible { reason: String },
    Failed { reason: String },
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Done { rank1, map } => format!("{:.2} ({:.2})", 100.0 * rank1, 100.0 * map),
            Cell::Infeasible { .. } => "infeasible".into(),
            Cell::Failed { .. } => "failed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    /// `grid[h][v]` for `H_p = h + 1`, `V_p = v + 1`.
    pub grid: Vec<Vec<Cell>>,
    pub scheme: PartitionScheme,
    pub components: Vec<(Components, Cell)>,
}

fn run(protocols: &[EvalProtocol], images: &mut ImageLibrary, config: &TrainConfig) -> Result<Cell> {
    if let Err(e) = check_compatible(&config.backbone, config.head.scheme()) {
        return match e {
            Error::Range { msg, .. } => Ok(Cell::Infeasible { reason: msg }),
            other => Err(other),
        };
    }
    let outcome = match train(&protocols[0], images, config, |_| {}) {
        Ok(o) => o,
        Err(Error::Numeric(msg)) => return Ok(Cell::Failed { reason: msg }),
        Err(e) => return Err(e),
    };
    let mut model = outcome.model;
    let report = evaluate(&mut model, protocols, images)?;
    Ok(Cell::Done {
        rank1: report.mean_rank1,
        map: report.mean_map,
    })
}

/// Trains on the first protocol's training split and scores each model
/// over every protocol. `progress` receives a label per finished run.
pub fn ablate(
    protocols: &[EvalProtocol],
    images: &mut ImageLibrary,
    base: &TrainConfig,
    mut progress: impl FnMut(&str, &Cell),
) -> Result<AblationReport> {
    if protocols.is_empty() {
        return Err(Error::invalid("ablate", "no protocols"));
    }
    let mut grid = Vec::with_capacity(H_PARTS.len());
    for &h in &H_PARTS {
        let mut row = Vec::with_capacity(V_PARTS.len());
        for &v in &V_PARTS {
            let mut cfg = base.clone();
            cfg.head.h_parts = h;
            cfg.head.v_parts = v;
            cfg.head.components = Components::Both;
            let cell = run(protocols, images, &cfg)?;
            progress(&format!("grid {h}x{v}"), &cell);
            row.push(cell);
        }
        grid.push(row);
    }

    let scheme = base.head.scheme();
    let mut components = Vec::with_capacity(COMPONENT_ORDER.len());
    for c in COMPONENT_ORDER {
        let in_grid = H_PARTS.iter().position(|h| *h == scheme.h_parts).zip(V_PARTS.iter().position(|v| *v == scheme.v_parts));
        let cell = match (c, in_grid) {
            (Components::Both, Some((h, v))) => grid[h][v].clone(),
            _ => {
                let mut cfg = base.clone();
                cfg.head.components = c;
                run(protocols, images, &cfg)?
            }
        };
        progress(c.label(), &cell);
        components.push((c, cell));
    }
    Ok(AblationReport {
        config: None,
        grid,
        scheme,
        components,
    })
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(cfg) = &self.config {
            out.push_str(&comment_block(cfg));
            out.push('\n');
        }
        let w = 18;
        writeln!(out, "Partition grid, rank-1 (mAP) in %").unwrap();
        write!(out, "{:<10}", "H_p \\ V_p").unwrap();
        for v in V_PARTS {
            write!(out, "| {:<w$}", v).unwrap();
        }
        out.push('\n');
        writeln!(out, "{}", "-".repeat(10 + V_PARTS.len() * (w + 2))).unwrap();
        for (h, row) in H_PARTS.iter().zip(&self.grid) {
            write!(out, "{:<10}", h).unwrap();
            for cell in row {
                write!(out, "| {:<w$}", cell.render()).unwrap();
            }
            out.push('\n');
        }
        let notes: Vec<String> = H_PARTS
            .iter()
            .zip(&self.grid)
            .flat_map(|(h, row)| V_PARTS.iter().zip(row).map(move |(v, c)| (h, v, c)))
            .filter_map(|(h, v, c)| match c {
                Cell::Infeasible { reason } | Cell::Failed { reason } => Some(format!("  {h}x{v}: {reason}")),
                Cell::Done { .. } => None,
            })
            .collect();
        for n in notes {
            writeln!(out, "{n}").unwrap();
        }

        writeln!(out, "\nComponents at {}x{}, in %", self.scheme.h_parts, self.scheme.v_parts).unwrap();
        writeln!(out, "{:<13}| {:<8}| {:<8}| {:<10}| {:<8}", "method", "rank-1", "mAP", "ref rank-1", "ref mAP").unwrap();
        writeln!(out, "{}", "-".repeat(55)).unwrap();
        for (c, cell) in &self.components {
            let (rr, rm) = reference_components(*c);
            let (r1, m) = match cell {
                Cell::Done { rank1, map } => (format!("{:.2}", 100.0 * rank1), format!("{:.2}", 100.0 * map)),
                other => (other.render(), String::new()),
            };
            writeln!(out, "{:<13}| {:<8}| {:<8}| {:<10}| {:<8}", c.label(), r1, m, format!("{rr:.2}*"), format!("{rm:.2}*")).unwrap();
        }

        writeln!(out, "\n* Reference values from the full-scale right-palmar hand benchmark").unwrap();
        writeln!(out, "  (384x384 inputs, ImageNet-pretrained ResNet-50 backbone); not expected").unwrap();
        writeln!(out, "  at desk scale. Reference grid, rank-1 (mAP):").unwrap();
        for (h, row) in H_PARTS.iter().zip(REFERENCE_GRID) {
            write!(out, "  {h}:").unwrap();
            for (r, m) in row {
                write!(out, "  {r:.2} ({m:.2})").unwrap();
            }
            out.push('\n');
        }
        writeln!(out, "  In the reference grid the 1x1 cell is the global branch alone.").unwrap();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Data(format!("cannot serialize ablation: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> AblationReport {
        let grid = H_PARTS
            .iter()
            .map(|h| {
                V_PARTS
                    .iter()
                    .map(|v| {
                        if *h == 4 && *v == 3 {
                            Cell::Infeasible { reason: "4x3 parts exceed the 2x2 activation grid".into() }
                        } else {
                            Cell::Done { rank1: 0.5, map: 0.625 }
                        }
                    })
                    .collect()
            })
            .collect();
        AblationReport {
            config: Some("seed = 1".into()),
            grid,
            scheme: PartitionScheme::new(3, 1),
            components: COMPONENT_ORDER.iter().map(|c| (*c, Cell::Done { rank1: 1.0, map: 1.0 })).collect(),
        }
    }

    #[test]
    fn rendering_has_grid_components_and_footer() {
        let text = report().render();
        assert!(text.starts_with("# seed = 1\n"));
        assert!(text.contains("H_p \\ V_p"));
        assert_eq!(text.matches("50.00 (62.50)").count(), 11);
        assert!(text.contains("infeasible"));
        assert!(text.contains("4x3: 4x3 parts exceed"));
        for label in ["global-only", "local-only", "combined"] {
            assert!(text.contains(label));
        }
        assert!(text.contains("95.83*") && text.contains("91.19*") && text.contains("94.33*"));
        assert!(text.contains("96.31*") && text.contains("92.14*") && text.contains("94.91*"));
    }

    #[test]
    fn json_round_trip() {
        let r = report();
        let back: AblationReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
