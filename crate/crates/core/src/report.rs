//! Study reports: per-level error tables with observed convergence orders,
//! serialized to JSON, CSV or markdown.
//!
//! CSV layout: one row per level with the fixed column order
//! `n,h,dofs,<error columns...>`, followed by a `# orders` section with one
//! row per adjacent level pair (`order(<col>)` entries; empty cells where
//! an error has saturated below 1e-13).

use std::collections::BTreeMap;

use crate::analysis::{observed_order, NsErrorRow};
use crate::diffusion::DiffusionErrors;
use crate::error::Error;
use crate::Result;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LevelRow {
    pub n: usize,
    pub h: f64,
    pub dofs: usize,
    /// Values aligned with `StudyReport::columns`.
    pub values: Vec<f64>,
    /// Additional named scalars carried along (not rated).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct OrderRow {
    pub from_n: usize,
    pub to_n: usize,
    /// One entry per column; `None` marks saturation.
    pub orders: Vec<Option<f64>>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct StudyReport {
    pub problem: String,
    pub family: String,
    pub k: u32,
    pub nu: f64,
    pub columns: Vec<String>,
    pub levels: Vec<LevelRow>,
    pub orders: Vec<OrderRow>,
}

impl StudyReport {
    pub fn new(problem: &str, family: &str, k: u32, nu: f64, columns: &[&str]) -> Self {
        Self {
            problem: problem.into(),
            family: family.into(),
            k,
            nu,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            levels: Vec::new(),
            orders: Vec::new(),
        }
    }

    pub fn push_level(&mut self, row: LevelRow) {
        assert_eq!(row.values.len(), self.columns.len());
        if let Some(prev) = self.levels.last() {
            let orders = prev
                .values
                .iter()
                .zip(&row.values)
                .map(|(&a, &b)| observed_order(a, b))
                .collect();
            self.orders.push(OrderRow {
                from_n: prev.n,
                to_n: row.n,
                orders,
            });
        }
        self.levels.push(row);
    }

    /// Observed order of a named column between the two finest levels.
    pub fn final_order(&self, column: &str) -> Option<f64> {
        let idx = self.columns.iter().position(|c| c == column)?;
        self.orders.last().and_then(|o| o.orders[idx])
    }

    /// All per-pair orders of a named column.
    pub fn order_history(&self, column: &str) -> Vec<Option<f64>> {
        let Some(idx) = self.columns.iter().position(|c| c == column) else {
            return Vec::new();
        };
        self.orders.iter().map(|o| o.orders[idx]).collect()
    }

    pub fn value(&self, level: usize, column: &str) -> Option<f64> {
        let idx = self.columns.iter().position(|c| c == column)?;
        self.levels.get(level).map(|l| l.values[idx])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report parse: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("n,h,dofs");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        for key in self.extra_keys() {
            out.push(',');
            out.push_str(&key);
        }
        out.push('\n');
        for row in &self.levels {
            out.push_str(&format!("{},{:e},{}", row.n, row.h, row.dofs));
            for v in &row.values {
                out.push_str(&format!(",{v:e}"));
            }
            for key in self.extra_keys() {
                match row.extra.get(&key) {
                    Some(v) => out.push_str(&format!(",{v:e}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        if !self.orders.is_empty() {
            out.push_str("# orders\nfrom_n,to_n");
            for c in &self.columns {
                out.push_str(&format!(",order({c})"));
            }
            out.push('\n');
            for o in &self.orders {
                out.push_str(&format!("{},{}", o.from_n, o.to_n));
                for v in &o.orders {
                    match v {
                        Some(v) => out.push_str(&format!(",{v:.4}")),
                        None => out.push_str(",saturated"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "## {} study: family {}, k = {}, nu = {}\n\n",
            self.problem, self.family, self.k, self.nu
        ));
        out.push_str("| n | h | dofs |");
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|---|---|");
        for _ in &self.columns {
            out.push_str("---|");
        }
        out.push('\n');
        for row in &self.levels {
            out.push_str(&format!("| {} | {:.4e} | {} |", row.n, row.h, row.dofs));
            for v in &row.values {
                out.push_str(&format!(" {v:.4e} |"));
            }
            out.push('\n');
        }
        if !self.orders.is_empty() {
            out.push_str("\n| pair |");
            for c in &self.columns {
                out.push_str(&format!(" order({c}) |"));
            }
            out.push_str("\n|---|");
            for _ in &self.columns {
                out.push_str("---|");
            }
            out.push('\n');
            for o in &self.orders {
                out.push_str(&format!("| {}-{} |", o.from_n, o.to_n));
                for v in &o.orders {
                    match v {
                        Some(v) => out.push_str(&format!(" {v:.2} |")),
                        None => out.push_str(" saturated |"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    fn extra_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .levels
            .iter()
            .flat_map(|l| l.extra.keys().cloned())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }
}

/// Column order of Navier-Stokes study reports.
pub const NS_COLUMNS: [&str; 9] = [
    "err_L",
    "err_u",
    "err_p",
    "e_L",
    "e_u",
    "e_h1",
    "e_pf_scaled",
    "e_l0",
    "theta_ns_sqrt",
];

pub fn ns_level_row(row: &NsErrorRow) -> LevelRow {
    let mut extra = BTreeMap::new();
    extra.insert("max_div_beta".into(), row.max_div_beta);
    extra.insert("energy".into(), row.energy);
    extra.insert("ratio_energy_bound".into(), row.ratio_energy_bound);
    extra.insert("stability_ratio".into(), row.stability_ratio);
    extra.insert("quadrature_drift".into(), row.quadrature_drift);
    extra.insert("picard_iterations".into(), row.picard_iterations as f64);
    LevelRow {
        n: row.n,
        h: row.h,
        dofs: row.dofs,
        values: vec![
            row.err_l,
            row.err_u,
            row.err_p,
            row.e_l,
            row.e_u,
            row.e_h1,
            row.e_pf_scaled,
            row.e_l0,
            row.theta_ns_sqrt,
        ],
        extra,
    }
}

/// Column order of diffusion study reports.
pub const DIFFUSION_COLUMNS: [&str; 2] = ["err_q", "err_u"];

pub fn diffusion_level_row(row: &DiffusionErrors) -> LevelRow {
    let mut extra = BTreeMap::new();
    extra.insert("conservation".into(), row.conservation);
    LevelRow {
        n: row.n,
        h: row.h,
        dofs: row.trace_dofs,
        values: vec![row.err_q, row.err_u],
        extra,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report(levels: usize) -> StudyReport {
        let mut rep = StudyReport::new("diffusion", "rt", 1, 1.0, &["err_q", "err_u"]);
        for i in 0..levels {
            let n = 2usize << i;
            rep.push_level(LevelRow {
                n,
                h: 1.0 / n as f64,
                dofs: n * n,
                values: vec![1.0 / (n * n) as f64, 0.5 / (n * n) as f64],
                extra: BTreeMap::new(),
            });
        }
        rep
    }

    #[test]
    fn empty_report_header_only_csv() {
        let rep = StudyReport::new("diffusion", "rt", 1, 1.0, &["err_q", "err_u"]);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("n,h,dofs,err_q,err_u"));
    }

    #[test]
    fn single_level_has_no_orders() {
        let rep = sample_report(1);
        assert!(rep.orders.is_empty());
        assert!(!rep.to_csv().contains("# orders"));
    }

    #[test]
    fn four_levels_give_three_order_rows() {
        let rep = sample_report(4);
        assert_eq!(rep.orders.len(), 3);
        for o in &rep.orders {
            for v in &o.orders {
                assert!((v.unwrap() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rep = sample_report(3);
        rep.levels[0].values[0] = 0.1 + 0.2; // a value with an awkward binary tail
        rep.levels[1].extra.insert("conservation".into(), 1.23e-14);
        let text = rep.to_json();
        let back = StudyReport::from_json(&text).unwrap();
        assert_eq!(back, rep);
        // bit-exact floats
        assert_eq!(back.levels[0].values[0].to_bits(), rep.levels[0].values[0].to_bits());
    }

    #[test]
    fn saturated_orders_marked() {
        let mut rep = StudyReport::new("diffusion", "rt", 1, 1.0, &["err_q"]);
        for (n, v) in [(2, 1e-14), (4, 1e-15)] {
            rep.push_level(LevelRow {
                n,
                h: 1.0 / n as f64,
                dofs: n,
                values: vec![v],
                extra: BTreeMap::new(),
            });
        }
        assert!(rep.orders[0].orders[0].is_none());
        assert!(rep.to_csv().contains("saturated"));
    }

    #[test]
    fn markdown_contains_tables() {
        let rep = sample_report(2);
        let md = rep.to_markdown();
        assert!(md.contains("| n | h | dofs |"));
        assert!(md.contains("order(err_q)"));
    }
}
