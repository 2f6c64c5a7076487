//! Comparison tables over run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Evaluation, MetricPanel};
use crate::reference::{ReferenceRow, ABLATION, READER_COMPARISON};
use crate::training::Ablation;

/// Panel export written into every evaluated run directory.
pub const PANEL_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelExport {
    pub run: String,
    pub lesion: MetricPanel,
    pub patient: MetricPanel,
}

impl PanelExport {
    pub fn from_evaluation(run: impl Into<String>, ev: &Evaluation) -> Self {
        PanelExport { run: run.into(), lesion: ev.lesion.clone(), patient: ev.patient.clone() }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(PANEL_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(PANEL_FILE);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Error::InvalidArgument(format!("missing panel file {}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Run,
    /// Published value, not reproduced here.
    Reference,
}

impl RowKind {
    fn as_str(self) -> &'static str {
        match self {
            RowKind::Run => "run",
            RowKind::Reference => "reference",
        }
    }
}

pub const METRICS: [&str; 6] = ["ROC-AUC", "SE", "SP", "PPV", "NPV", "ACC"];

/// Six lesion-level values then six patient-level values; `None` is missing
/// or undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub kind: RowKind,
    pub values: [Option<f64>; 12],
}

fn panel_values(p: &MetricPanel) -> [Option<f64>; 6] {
    [p.roc_auc, p.se, p.sp, p.ppv, p.npv, p.acc].map(|v| (!v.is_nan()).then_some(v))
}

impl ReportRow {
    pub fn from_export(e: &PanelExport) -> Self {
        let mut values = [None; 12];
        values[..6].copy_from_slice(&panel_values(&e.lesion));
        values[6..].copy_from_slice(&panel_values(&e.patient));
        ReportRow { name: e.run.clone(), kind: RowKind::Run, values }
    }

    pub fn from_reference(r: &ReferenceRow) -> Self {
        let mut values = [None; 12];
        for (i, v) in r.lesion.iter().enumerate() {
            values[i] = Some(*v);
        }
        for (i, v) in r.patient.iter().enumerate() {
            values[7 + i] = Some(*v);
        }
        ReportRow { name: r.name.to_string(), kind: RowKind::Reference, values }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

fn preset_rank(name: &str) -> usize {
    name.parse::<Ablation>().map_or(usize::MAX, |a| a as usize)
}

impl ReportTable {
    /// Run rows (preset names in table order, others after in input order)
    /// followed by all reference rows.
    pub fn build(exports: &[PanelExport]) -> Self {
        let mut runs: Vec<ReportRow> = exports.iter().map(ReportRow::from_export).collect();
        runs.sort_by_key(|r| preset_rank(&r.name));
        runs.extend(ABLATION.iter().chain(&READER_COMPARISON).map(ReportRow::from_reference));
        ReportTable { rows: runs }
    }

    pub fn from_dirs(dirs: &[PathBuf]) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::InvalidArgument("no run directories given".into()));
        }
        let exports = dirs.iter().map(|d| PanelExport::read(d)).collect::<Result<Vec<_>>>()?;
        Ok(ReportTable::build(&exports))
    }

    fn header() -> Vec<String> {
        let mut h = vec!["name".to_string(), "kind".to_string()];
        for level in ["lesion", "patient"] {
            for m in METRICS {
                h.push(format!("{level}_{}", m.to_lowercase().replace('-', "_")));
            }
        }
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header())?;
        for r in &self.rows {
            let mut rec = vec![r.name.clone(), r.kind.as_str().to_string()];
            rec.extend(r.values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Pipe-separated text table; values are printed exactly so that
    /// [`ReportTable::parse`] recovers them.
    pub fn render(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut head = vec!["Model".to_string(), "Kind".to_string()];
        for level in ["Lesion", "Patient"] {
            head.extend(METRICS.iter().map(|m| format!("{level} {m}")));
        }
        cells.push(head);
        for r in &self.rows {
            let mut c = vec![r.name.clone(), r.kind.as_str().to_string()];
            c.extend(r.values.iter().map(|v| v.map_or("-".to_string(), |x| x.to_string())));
            cells.push(c);
        }
        let widths: Vec<usize> =
            (0..14).map(|j| cells.iter().map(|c| c[j].chars().count()).max().unwrap_or(0)).collect();
        let lesion_w: usize = widths[2..8].iter().sum::<usize>() + 3 * 5;
        let patient_w: usize = widths[8..14].iter().sum::<usize>() + 3 * 5;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "| {:w0$} | {:w1$} | {:^lw$} | {:^pw$} |",
            "",
            "",
            "Lesion-Level",
            "Patient-Level",
            w0 = widths[0],
            w1 = widths[1],
            lw = lesion_w,
            pw = patient_w
        );
        for (i, c) in cells.iter().enumerate() {
            out.push('|');
            for (j, s) in c.iter().enumerate() {
                let _ = write!(out, " {s:w$} |", w = widths[j]);
            }
            out.push('\n');
            if i == 0 {
                out.push('|');
                for w in &widths {
                    let _ = write!(out, "{}|", "-".repeat(w + 2));
                }
                out.push('\n');
            }
        }
        out.push_str("Rows of kind `reference` are published values, not results of this build.\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("report table: {m}"));
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(3) {
            let line = line.trim();
            if !line.starts_with('|') {
                continue;
            }
            let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
            if cells.len() != 14 {
                return Err(bad(format!("line {}: expected 14 cells, got {}", ln + 1, cells.len())));
            }
            let kind = match cells[1] {
                "run" => RowKind::Run,
                "reference" => RowKind::Reference,
                k => return Err(bad(format!("line {}: unknown kind {k:?}", ln + 1))),
            };
            let mut values = [None; 12];
            for (v, s) in values.iter_mut().zip(&cells[2..]) {
                if *s != "-" {
                    *v = Some(s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", ln + 1)))?);
                }
            }
            rows.push(ReportRow { name: cells[0].to_string(), kind, values });
        }
        Ok(ReportTable { rows })
    }

    /// Writes `report.csv` and `report.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(r) = self.rows.iter().find(|r| r.name.contains('|') || r.name.trim() != r.name) {
            return Err(Error::InvalidArgument(format!("run name {:?} cannot be tabulated", r.name)));
        }
        let csv = dir.join("report.csv");
        let txt = dir.join("report.txt");
        self.write_csv(&csv)?;
        std::fs::write(&txt, self.render()).map_err(|e| Error::io(&txt, e))?;
        Ok((csv, txt))
    }
}
