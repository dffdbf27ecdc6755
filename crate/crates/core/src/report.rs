//! Report files: the JSON report, its manifest, comparison tables and
//! plot series.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::harness::{CellResult, Classification, Correlation, FirstTokenResult, StudyFailure, StudyReport};
use crate::layers::{ConvergenceCurve, UpLayer};

pub const REPORT_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to emit: {0}")]
    EmptyInput(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, ReportError> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| ReportError::Serialize(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub report_version: u32,
    pub toolkit_version: String,
    pub config_digest: String,
    /// Output files relative to the output directory, sorted.
    pub outputs: Vec<String>,
    pub failures: Vec<StudyFailure>,
}

/// Kept apart from the report so the report stays reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub config_digest: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifest: RunManifest,
    #[serde(flatten)]
    pub studies: StudyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableShape {
    Sampling,
    Prior,
    FirstToken,
    Escore,
}

impl TableShape {
    pub fn stem(self) -> &'static str {
        match self {
            TableShape::Sampling => "sampling",
            TableShape::Prior => "prior",
            TableShape::FirstToken => "first_token",
            TableShape::Escore => "escore",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub shape: TableShape,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

fn ordered<'a, I: Iterator<Item = &'a str>>(items: I) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

fn group_of(cells: &[&CellResult]) -> String {
    let mut classes = cells.iter().map(|c| c.classification);
    let first = classes.next().unwrap_or(Classification::Indeterminate);
    if classes.all(|c| c == first) {
        first.to_string()
    } else {
        "mixed".into()
    }
}

/// Model-by-task grid of ATVD-step and the three pairwise ATVDs, with a
/// per-group average row.
pub fn sampling_table(cells: &[CellResult]) -> Result<Table, ReportError> {
    if cells.is_empty() {
        return Err(ReportError::EmptyInput("no cells"));
    }
    let tasks = ordered(cells.iter().map(|c| c.task.as_str()));
    let models = ordered(cells.iter().map(|c| c.model.as_str()));
    let mut columns = vec!["group".to_string(), "model".to_string()];
    for t in &tasks {
        for m in ["atvd_step", "atvd_task_token", "atvd_task_result", "atvd_token_result"] {
            columns.push(format!("{t}/{m}"));
        }
    }
    let find = |m: &str, t: &str| cells.iter().find(|c| c.model == m && c.task == t);
    let values = |c: &CellResult| {
        let (m, s) = (&c.aggregate.mean, &c.aggregate.std);
        [
            (m.atvd_step, None),
            (m.atvd_task_token, Some(s.atvd_task_token)),
            (m.atvd_task_result, Some(s.atvd_task_result)),
            (m.atvd_token_result, Some(s.atvd_token_result)),
        ]
    };
    let fmt = |(m, s): (f64, Option<f64>)| match s {
        Some(s) => pm(m, s),
        None => format!("{m:.3}"),
    };

    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    for model in &models {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| &c.model == model).collect();
        let g = group_of(&mine);
        match groups.iter_mut().find(|(name, _)| *name == g) {
            Some((_, ms)) => ms.push(model.clone()),
            None => groups.push((g, vec![model.clone()])),
        }
    }

    let mut rows = Vec::new();
    for (group, members) in &groups {
        for model in members {
            let mut row = vec![group.clone(), model.clone()];
            for t in &tasks {
                match find(model, t) {
                    Some(c) => row.extend(values(c).map(fmt)),
                    None => row.extend(std::iter::repeat_n("-".to_string(), 4)),
                }
            }
            rows.push(row);
        }
        if members.len() > 1 {
            let mut row = vec![group.clone(), "AVG".to_string()];
            for t in &tasks {
                let present: Vec<[(f64, Option<f64>); 4]> =
                    members.iter().filter_map(|m| find(m, t)).map(|c| values(c)).collect();
                if present.is_empty() {
                    row.extend(std::iter::repeat_n("-".to_string(), 4));
                    continue;
                }
                let n = present.len() as f64;
                for k in 0..4 {
                    let mean = present.iter().map(|v| v[k].0).sum::<f64>() / n;
                    let std = present[0][k].1.map(|_| present.iter().filter_map(|v| v[k].1).sum::<f64>() / n);
                    row.push(fmt((mean, std)));
                }
            }
            rows.push(row);
        }
    }
    Ok(Table {
        shape: TableShape::Sampling,
        columns,
        rows,
    })
}

/// One row per prior cell: ATVD against the uniform target.
pub fn prior_table(cells: &[CellResult]) -> Result<Table, ReportError> {
    if cells.is_empty() {
        return Err(ReportError::EmptyInput("no prior cells"));
    }
    let columns = ["group", "model", "task", "atvd_task_result", "atvd_task_token", "atvd_token_result"]
        .map(String::from)
        .to_vec();
    let rows = cells
        .iter()
        .map(|c| {
            let (m, s) = (&c.aggregate.mean, &c.aggregate.std);
            vec![
                c.classification.to_string(),
                c.model.clone(),
                c.task.clone(),
                pm(m.atvd_task_result, s.atvd_task_result),
                pm(m.atvd_task_token, s.atvd_task_token),
                pm(m.atvd_token_result, s.atvd_token_result),
            ]
        })
        .collect();
    Ok(Table {
        shape: TableShape::Prior,
        columns,
        rows,
    })
}

/// e-score of every cell with its margin over the task's largest probability.
pub fn escore_table(cells: &[CellResult]) -> Result<Table, ReportError> {
    if cells.is_empty() {
        return Err(ReportError::EmptyInput("no cells"));
    }
    let columns = ["model", "task", "temperature", "e_score", "max_p_task", "margin", "hamming", "trials", "class"]
        .map(String::from)
        .to_vec();
    let rows = cells
        .iter()
        .map(|c| {
            let max_p = c.task_probs.iter().copied().fold(0.0, f64::max);
            vec![
                c.model.clone(),
                c.task.clone(),
                format!("{:.3}", c.temperature),
                pm(c.aggregate.mean.e_score, c.aggregate.std.e_score),
                format!("{max_p:.3}"),
                format!("{:.3}", c.aggregate.mean.e_score - max_p),
                pm(c.aggregate.mean.hamming, c.aggregate.std.hamming),
                format!("{}/{}", c.aggregate.trials, c.attempted),
                c.classification.to_string(),
            ]
        })
        .collect();
    Ok(Table {
        shape: TableShape::Escore,
        columns,
        rows,
    })
}

/// First-token e-score per model, one column per subset plus `all`.
pub fn first_token_table(results: &[FirstTokenResult]) -> Result<Table, ReportError> {
    if results.is_empty() {
        return Err(ReportError::EmptyInput("no first-token results"));
    }
    let subsets = ordered(results.iter().flat_map(|r| r.subsets.iter().map(|s| s.subset.as_str())));
    let mut columns = vec!["model".to_string()];
    columns.extend(subsets.iter().cloned());
    columns.push("all".into());
    let rows = results
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone()];
            for s in &subsets {
                row.push(match r.subsets.iter().find(|x| &x.subset == s) {
                    Some(x) if x.prompts > 0 => format!("{:.3}", x.e_score),
                    _ => "-".into(),
                });
            }
            row.push(format!("{:.3}", r.e_score));
            row
        })
        .collect();
    Ok(Table {
        shape: TableShape::FirstToken,
        columns,
        rows,
    })
}

/// Writes `<stem>.json` and `<stem>.csv` under `dir`.
pub fn emit_table(table: &Table, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if table.rows.is_empty() {
        return Err(ReportError::EmptyInput("table has no rows"));
    }
    let json_path = dir.join(format!("{}.json", table.shape.stem()));
    write_file(&json_path, &to_json(table)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ReportError::Serialize(e.to_string());
    w.write_record(&table.columns).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Serialize(e.to_string()))?;
    let csv_path = dir.join(format!("{}.csv", table.shape.stem()));
    write_file(&csv_path, &bytes)?;
    Ok(vec![json_path, csv_path])
}

fn tsv(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out.into_bytes()
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "NaN".into()
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Step-by-symbol matrix of `P_token` for the first usable trial of a cell.
pub fn step_trace_series(cell: &CellResult) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let trial = cell.usable_trials().next()?;
    let n = cell.task_probs.len();
    let mut header = vec!["step".to_string()];
    header.extend((0..n).map(|i| format!("p{i}")));
    header.push("task_max".into());
    let task_max = cell.task_probs.iter().copied().fold(0.0, f64::max);
    let rows: Vec<Vec<String>> = trial
        .steps
        .iter()
        .filter_map(|s| s.distribution.as_ref())
        .map(|d| {
            let mut r = vec![d.step_index.to_string()];
            r.extend(d.probs.iter().map(|p| num(*p)));
            r.push(num(task_max));
            r
        })
        .collect();
    (!rows.is_empty()).then_some((header, rows))
}

pub fn convergence_series(curve: &ConvergenceCurve) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["layer".to_string(), "atvd_mean".to_string()];
    header.extend(curve.steps.iter().map(|s| format!("step{s}")));
    let rows = curve
        .mean_curve
        .iter()
        .zip(&curve.per_step)
        .enumerate()
        .map(|(l, (m, per))| {
            let mut r = vec![l.to_string(), num(*m)];
            r.extend(per.iter().map(|x| num(*x)));
            r
        })
        .collect();
    (header, rows)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Writes one tab-separated series file per figure family under `dir`.
pub fn emit_plotdata(report: &StudyReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<(), ReportError> {
        let p = dir.join(rel);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };

    for cell in &report.cells {
        if let Some((h, rows)) = step_trace_series(cell) {
            put(
                format!("step_traces/{}__{}.tsv", file_safe(&cell.model), file_safe(&cell.task)),
                tsv(&h, &rows),
            )?;
        }
    }

    if !report.cells.is_empty() {
        let rows: Vec<Vec<String>> = report
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.model.clone(),
                    c.task.clone(),
                    num(c.aggregate.mean.e_score),
                    num(c.aggregate.std.e_score),
                ]
            })
            .collect();
        put(
            "escore.tsv".into(),
            tsv(&header(&["model", "task", "e_score_mean", "e_score_std"]), &rows),
        )?;
    }

    if !report.sweeps.is_empty() {
        let rows: Vec<Vec<String>> = report
            .sweeps
            .iter()
            .flat_map(|s| {
                s.points.iter().map(move |p| {
                    vec![
                        s.model.clone(),
                        s.task.clone(),
                        num(p.temperature),
                        num(p.e_score_mean),
                        num(p.e_score_std),
                    ]
                })
            })
            .collect();
        put(
            "temperature.tsv".into(),
            tsv(
                &header(&["model", "task", "temperature", "e_score_mean", "e_score_std"]),
                &rows,
            ),
        )?;
    }

    for l in &report.layers {
        let (h, rows) = convergence_series(&l.convergence);
        put(
            format!("layers/{}.tsv", file_safe(l.dump.trim_end_matches(".jsonl"))),
            tsv(&h, &rows),
        )?;
        let up_rows: Vec<Vec<String>> = l
            .up_layer
            .per_step
            .iter()
            .zip(&l.convergence.steps)
            .map(|(u, s)| {
                vec![
                    s.to_string(),
                    match u {
                        UpLayer::At(x) => x.to_string(),
                        UpLayer::NoJump => "NaN".into(),
                    },
                ]
            })
            .collect();
        put(
            format!("layers/{}.up_layer.tsv", file_safe(l.dump.trim_end_matches(".jsonl"))),
            tsv(&header(&["step", "up_layer"]), &up_rows),
        )?;
    }

    if !report.quota.is_empty() {
        let corr = |c: &Correlation| match c {
            Correlation::Defined { r, slope } => (num(*r), num(*slope)),
            Correlation::Degenerate => ("NaN".into(), "NaN".into()),
        };
        let mut rows = Vec::new();
        for q in &report.quota {
            for (i, c) in q.result.per_symbol.iter().enumerate() {
                let (r, s) = corr(c);
                rows.push(vec![q.model.clone(), q.task.clone(), i.to_string(), r, s]);
            }
            let (r, s) = corr(&q.result.pooled);
            rows.push(vec![q.model.clone(), q.task.clone(), "pooled".into(), r, s]);
        }
        put(
            "quota.tsv".into(),
            tsv(&header(&["model", "task", "symbol", "r", "slope"]), &rows),
        )?;
    }

    if written.is_empty() {
        return Err(ReportError::EmptyInput("no study produced plottable data"));
    }
    Ok(written)
}

fn prior_keys(report: &StudyReport) -> BTreeSet<(String, String)> {
    report.priors.iter().map(|p| (p.model.clone(), p.task.clone())).collect()
}

/// Writes tables, plot series, `report.json` and `manifest.json` under
/// `out`. `report.json` is written last and lists every other output.
pub fn write_report(
    report: &StudyReport,
    config_digest: &str,
    out: &Path,
    timing: Option<(u64, f64)>,
) -> Result<Report, ReportError> {
    let mut paths: Vec<PathBuf> = Vec::new();
    let tables_dir = out.join("tables");
    let priors = prior_keys(report);
    let (prior_cells, sampling_cells): (Vec<CellResult>, Vec<CellResult>) = report
        .cells
        .iter()
        .cloned()
        .partition(|c| priors.contains(&(c.model.clone(), c.task.clone())));
    if !sampling_cells.is_empty() {
        paths.extend(emit_table(&sampling_table(&sampling_cells)?, &tables_dir)?);
    }
    if !prior_cells.is_empty() {
        paths.extend(emit_table(&prior_table(&prior_cells)?, &tables_dir)?);
    }
    if !report.cells.is_empty() {
        paths.extend(emit_table(&escore_table(&report.cells)?, &tables_dir)?);
    }
    if !report.first_token.is_empty() {
        paths.extend(emit_table(&first_token_table(&report.first_token)?, &tables_dir)?);
    }
    match emit_plotdata(report, &out.join("plots")) {
        Ok(p) => paths.extend(p),
        Err(ReportError::EmptyInput(_)) => {}
        Err(e) => return Err(e),
    }
    let transcripts = out.join("transcripts");
    if let Ok(entries) = std::fs::read_dir(&transcripts) {
        for e in entries.flatten() {
            if e.path().extension().is_some_and(|x| x == "jsonl") {
                paths.push(e.path());
            }
        }
    }

    let mut outputs: Vec<String> = paths
        .iter()
        .map(|p| {
            p.strip_prefix(out)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        })
        .collect();
    outputs.sort();
    outputs.dedup();

    let full = Report {
        manifest: RunManifest {
            report_version: REPORT_VERSION,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            config_digest: config_digest.to_string(),
            outputs,
            failures: report.failures.clone(),
        },
        studies: report.clone(),
    };
    write_file(&out.join("report.json"), &to_json(&full)?)?;
    if let Some((started, wall)) = timing {
        let t = RunTiming {
            config_digest: config_digest.to_string(),
            started_unix_secs: started,
            wall_clock_secs: wall,
        };
        write_file(&out.join("manifest.json"), &to_json(&t)?)?;
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendConfig, Family, SyntheticSpec};
    use crate::dist::{make_distribution, Alphabet, PromptSpec};
    use crate::harness::{run_cell, RunOptions};

    fn cell(model: &str, family: Family, probs: Vec<f64>, task: &str) -> CellResult {
        let spec = PromptSpec::simulated(make_distribution(Alphabet::numeric(1, 4).unwrap(), probs).unwrap())
            .with_sample_count(20);
        run_cell(&BackendConfig::synthetic(model, SyntheticSpec::new(family)), task, &spec, 3, &RunOptions::default())
            .unwrap()
    }

    fn four_cells() -> Vec<CellResult> {
        vec![
            cell("e", Family::E, vec![0.1, 0.7, 0.1, 0.1], "extreme"),
            cell("e", Family::E, vec![0.2, 0.3, 0.2, 0.3], "flat"),
            cell("d", Family::D, vec![0.1, 0.7, 0.1, 0.1], "extreme"),
            cell("d", Family::D, vec![0.2, 0.3, 0.2, 0.3], "flat"),
        ]
    }

    #[test]
    fn sampling_table_shape() {
        let t = sampling_table(&four_cells()).unwrap();
        assert_eq!(t.columns.len(), 2 + 8);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0][0], "E");
        assert_eq!(t.rows[0][2], "0.000");
        assert!(t.rows[0][3].contains('±'));
        let one = sampling_table(&four_cells()[..1]).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert!(matches!(sampling_table(&[]), Err(ReportError::EmptyInput(_))));
    }

    #[test]
    fn tables_are_byte_identical_on_reemission() {
        let cells = four_cells();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let t = sampling_table(&cells).unwrap();
        let pa = emit_table(&t, a.path()).unwrap();
        let pb = emit_table(&t, b.path()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn plot_series_shapes() {
        let report = StudyReport {
            cells: vec![cell("e", Family::E, vec![0.1, 0.7, 0.1, 0.1], "extreme")],
            ..Default::default()
        };
        let (h, rows) = step_trace_series(&report.cells[0]).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(h.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plotdata(&report, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(matches!(
            emit_plotdata(&StudyReport::default(), dir.path()),
            Err(ReportError::EmptyInput(_))
        ));
    }

    #[test]
    fn convergence_series_rows() {
        let t = crate::layers::step_function_trace(32, 3, ["1", "2"].map(String::from).to_vec(), 10, 0, 20.0);
        let task = make_distribution(Alphabet::numeric(1, 2).unwrap(), vec![0.5, 0.5]).unwrap();
        let c = crate::layers::layer_convergence(&t, &task).unwrap();
        let (h, rows) = convergence_series(&c);
        assert_eq!(rows.len(), 32);
        assert_eq!(h.len(), 5);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
