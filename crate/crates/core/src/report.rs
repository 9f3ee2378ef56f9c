//! Aggregation of cell results into model x (window, protocol) tables,
//! per-fold CSV, and cross-model statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autonn::{FreezePolicy, Init, ProjectionKind};
use crate::error::{Error, Result};
use crate::evalstats::{adjust_family, wilcoxon_signed_rank, Protocol, StatTestResult};
use crate::experiment::{align, CellResult, ModelKind, Task, RESULT_SCHEMA};
use crate::preproc::WindowKind;

pub struct LoadedResults {
    pub results: Vec<CellResult>,
    /// Files that were skipped, with the reason.
    pub warnings: Vec<String>,
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_json(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json")
            && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.starts_with("result"))
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads every `result*.json` below `dir`. Unparseable files are skipped
/// with a warning.
pub fn load_results(dir: &Path) -> Result<LoadedResults> {
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    let mut results = Vec::new();
    let mut warnings = Vec::new();
    for f in files {
        let parsed = fs::read(&f)
            .map_err(Error::from)
            .and_then(|b| serde_json::from_slice::<CellResult>(&b).map_err(Error::from));
        match parsed {
            Ok(r) if r.schema == RESULT_SCHEMA => results.push(r),
            Ok(r) => warnings.push(format!("{}: unsupported schema {}", f.display(), r.schema)),
            Err(e) => warnings.push(format!("{}: {}", f.display(), e)),
        }
    }
    for w in &warnings {
        warn!("skipped {}", w);
    }
    Ok(LoadedResults { results, warnings })
}

/// Row label: the model name, with the transfer variant for ResNet-18.
pub fn row_label(r: &CellResult) -> String {
    let c = &r.config;
    if c.model != ModelKind::ResNet18 {
        return c.model.to_string();
    }
    let p = match c.projection {
        ProjectionKind::Conv => "conv",
        ProjectionKind::Pca3 => "pca3",
    };
    let i = match r.effective_init {
        Init::Pretrained => "pretrained",
        Init::RandomInit => "random",
    };
    let f = match c.freeze {
        FreezePolicy::PartialFt => "partial",
        FreezePolicy::FullFt => "full",
    };
    format!("resnet18 ({}, {}, {})", p, i, f)
}

pub fn columns() -> Vec<(WindowKind, Protocol)> {
    WindowKind::ALL
        .iter()
        .flat_map(|&w| [Protocol::Sap, Protocol::Loso].map(|p| (w, p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub mean: f64,
    pub ci: (f64, f64),
    pub p_perm: f64,
    pub n_folds: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub task: Task,
    pub chance: f64,
    pub models: Vec<String>,
    pub columns: Vec<(WindowKind, Protocol)>,
    /// `cells[row][column]`, `None` where no result exists.
    pub cells: Vec<Vec<Option<ReportCell>>>,
    pub footnotes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: Task,
    pub window: WindowKind,
    pub protocol: Protocol,
    pub model_a: String,
    pub model_b: String,
    pub result: Option<StatTestResult>,
    /// Why no test was run.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceTest {
    pub task: Task,
    pub window: WindowKind,
    pub protocol: Protocol,
    pub model: String,
    pub result: StatTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub tables: Vec<ReportTable>,
    pub comparisons: Vec<Comparison>,
    pub chance_tests: Vec<ChanceTest>,
    pub warnings: Vec<String>,
}

type CellKey = (Task, WindowKind, Protocol, String);

/// Builds one table per task, pairwise Wilcoxon tests between models in
/// the same (task, window, protocol) group, and permutation-vs-chance
/// tests, each family Holm-adjusted.
pub fn build_report(results: &[CellResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::InsufficientData("no results to report".into()));
    }
    let mut warnings = Vec::new();
    let mut cells: BTreeMap<CellKey, &CellResult> = BTreeMap::new();
    for r in results {
        let key = (r.config.task, r.config.window, r.config.protocol, row_label(r));
        if cells.contains_key(&key) {
            warnings.push(format!("duplicate result for {}; keeping the first", r.config.cell_id()));
            continue;
        }
        cells.insert(key, r);
    }

    let mut chance_tests: Vec<ChanceTest> = cells
        .iter()
        .map(|((task, window, protocol, model), r)| ChanceTest {
            task: *task,
            window: *window,
            protocol: *protocol,
            model: model.clone(),
            result: r.permutation.clone(),
        })
        .collect();
    let mut family: Vec<StatTestResult> = chance_tests.iter().map(|c| c.result.clone()).collect();
    adjust_family(&mut family)?;
    for (c, r) in chance_tests.iter_mut().zip(family) {
        c.result = r;
    }

    let mut groups: BTreeMap<(Task, WindowKind, Protocol), Vec<(&String, &CellResult)>> = BTreeMap::new();
    for ((t, w, p, m), r) in &cells {
        groups.entry((*t, *w, *p)).or_default().push((m, r));
    }
    let mut comparisons = Vec::new();
    for ((task, window, protocol), members) in &groups {
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let (ma, ra) = members[i];
                let (mb, rb) = members[j];
                let (result, note) = if ra.fold_scores.len() != rb.fold_scores.len() || ra.seed != rb.seed {
                    (None, Some("fold plans differ".to_string()))
                } else {
                    match wilcoxon_signed_rank(&ra.fold_scores, &rb.fold_scores) {
                        Ok(t) => (Some(t), None),
                        Err(e) => (None, Some(e.to_string())),
                    }
                };
                comparisons.push(Comparison {
                    task: *task,
                    window: *window,
                    protocol: *protocol,
                    model_a: ma.clone(),
                    model_b: mb.clone(),
                    result,
                    note,
                });
            }
        }
    }
    let mut tested: Vec<StatTestResult> = comparisons.iter().filter_map(|c| c.result.clone()).collect();
    adjust_family(&mut tested)?;
    let mut it = tested.into_iter();
    for c in comparisons.iter_mut().filter(|c| c.result.is_some()) {
        c.result = it.next();
    }

    let cols = columns();
    let mut tables = Vec::new();
    for task in Task::ALL {
        let models: Vec<String> = cells
            .keys()
            .filter(|k| k.0 == task)
            .map(|k| k.3.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if models.is_empty() {
            continue;
        }
        let grid = models
            .iter()
            .map(|m| {
                cols.iter()
                    .map(|&(w, p)| {
                        cells.get(&(task, w, p, m.clone())).map(|r| ReportCell {
                            mean: r.mean,
                            ci: r.ci,
                            p_perm: r.permutation.p_raw,
                            n_folds: r.fold_scores.len(),
                            text: r.cell_text(),
                        })
                    })
                    .collect()
            })
            .collect();
        let footnotes = comparisons
            .iter()
            .filter(|c| c.task == task)
            .map(|c| match (&c.result, &c.note) {
                (Some(t), _) => format!(
                    "{} vs {} ({}, {}): Wilcoxon W+ = {}, p = {:.4} (Holm {:.4})",
                    c.model_a, c.model_b, c.window, c.protocol, t.statistic, t.p_raw, t.p_adjusted
                ),
                (None, note) => format!(
                    "{} vs {} ({}, {}): not tested ({})",
                    c.model_a,
                    c.model_b,
                    c.window,
                    c.protocol,
                    note.as_deref().unwrap_or("unknown")
                ),
            })
            .collect();
        tables.push(ReportTable {
            task,
            chance: task.chance(),
            models,
            columns: cols.clone(),
            cells: grid,
            footnotes,
        });
    }
    Ok(Report {
        schema: RESULT_SCHEMA,
        tables,
        comparisons,
        chance_tests,
        warnings,
    })
}

impl ReportTable {
    pub fn populated_cells(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&format!(
                "Task {}: balanced accuracy, mean ± 95% CI half-width (chance {:.2})\n",
                t.task, t.chance
            ));
            let mut rows = vec![std::iter::once("Model".to_string())
                .chain(t.columns.iter().map(|(w, p)| format!("{} {}", w, p.to_string().to_uppercase())))
                .collect::<Vec<_>>()];
            for (m, row) in t.models.iter().zip(&t.cells) {
                let mut line = vec![m.clone()];
                line.extend(row.iter().map(|c| c.as_ref().map_or("-".to_string(), |c| c.text.clone())));
                rows.push(line);
            }
            out.push_str(&align(&rows));
            for f in &t.footnotes {
                out.push_str(&format!("  * {}\n", f));
            }
            out.push('\n');
        }
        out.push_str("Permutation tests vs chance (Holm-adjusted)\n");
        let mut rows = vec![vec![
            "Task".to_string(),
            "Window".into(),
            "Protocol".into(),
            "Model".into(),
            "BA".into(),
            "p".into(),
            "p_holm".into(),
        ]];
        for c in &self.chance_tests {
            rows.push(vec![
                c.task.to_string(),
                c.window.to_string(),
                c.protocol.to_string(),
                c.model.clone(),
                format!("{:.3}", c.result.statistic),
                format!("{:.4}", c.result.p_raw),
                format!("{:.4}", c.result.p_adjusted),
            ]);
        }
        out.push_str(&align(&rows));
        for w in &self.warnings {
            out.push_str(&format!("warning: {}\n", w));
        }
        out
    }

    /// One line per populated cell.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("task,model,window,protocol,mean,ci_low,ci_high,p_perm,n_folds\n");
        for t in &self.tables {
            for (m, row) in t.models.iter().zip(&t.cells) {
                for ((w, p), c) in t.columns.iter().zip(row) {
                    if let Some(c) = c {
                        out.push_str(&format!(
                            "{},\"{}\",{},{},{},{},{},{},{}\n",
                            t.task, m, w, p, c.mean, c.ci.0, c.ci.1, c.p_perm, c.n_folds
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Per-fold scores of every result, for external plotting.
pub fn folds_csv(results: &[CellResult]) -> String {
    let mut out = String::from("task,model,window,protocol,seed,fold,balanced_accuracy\n");
    for r in results {
        for f in &r.folds {
            out.push_str(&format!(
                "{},\"{}\",{},{},{},{},{}\n",
                r.config.task,
                row_label(r),
                r.config.window,
                r.config.protocol,
                r.seed,
                f.fold,
                f.balanced_accuracy
            ));
        }
    }
    out
}
