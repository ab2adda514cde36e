//! On-disk fit bundle: parameters, per-examinee states, trace, codebook and
//! a human-readable summary.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::fit::FitReport;
use crate::ingest::{load_codebook, save_codebook, Codebook};
use crate::model::{EventSequence, ModelParams};
use crate::params_io::{self, fmt_f64};

pub const PARAMS_FILE: &str = "params.toml";
pub const STATES_FILE: &str = "states.tsv";
pub const TRACE_FILE: &str = "trace.tsv";
pub const CODEBOOK_FILE: &str = "codebook.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Rounds to `sig` significant digits for human-facing tables.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..=6).contains(&mag) {
        return format!("{:.*e}", sig.saturating_sub(1), x);
    }
    let decimals = (sig as i32 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn states_tsv(report: &FitReport, seqs: &[EventSequence]) -> String {
    let k = report.params.k();
    let mut out = String::from("examinee_id\tn_events\tkappa\ta_tilde\td_tilde\tloglik_q");
    for i in 1..=k {
        for j in 1..=k {
            let _ = write!(out, "\tgamma_{i}_{j}");
        }
    }
    out.push('\n');
    for (s, q) in seqs.iter().zip(&report.states) {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.id(),
            s.len(),
            fmt_f64(q.kappa),
            fmt_f64(q.a_tilde),
            fmt_f64(q.d_tilde),
            fmt_f64(q.loglik_q)
        );
        for &g in &q.gamma {
            let _ = write!(out, "\t{}", fmt_f64(g));
        }
        out.push('\n');
    }
    out
}

pub fn trace_tsv(report: &FitReport) -> String {
    let mut out = String::from("iteration\tq\telbo\n");
    for t in &report.trace {
        let _ = writeln!(out, "{}\t{}\t{}", t.iteration, fmt_f64(t.q), fmt_f64(t.elbo));
    }
    out
}

fn matrix_table(out: &mut String, title: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "{title}");
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{j:>9}")).collect();
    let _ = writeln!(out, "     {}", header.join(""));
    for (i, row) in m.outer_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|&x| format!("{:>9}", fmt_sig(x, 3))).collect();
        let _ = writeln!(out, "{:>4} {}", i + 1, cells.join(""));
    }
    out.push('\n');
}

/// Top events per topic, Ĝ, p̂⁰, norm(R̂) and the frailty prior.
pub fn summary_text(params: &ModelParams, codebook: &Codebook, top: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Top events per topic");
    for (k, row) in params.b.outer_iter().enumerate() {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let items: Vec<String> = idx
            .iter()
            .take(top)
            .map(|&v| {
                let label = codebook.decode(v).map_or_else(|| (v + 1).to_string(), str::to_string);
                format!("{label} {}", fmt_sig(row[v], 3))
            })
            .collect();
        let _ = writeln!(out, "{:>4}  {}", k + 1, items.join(", "));
    }
    out.push('\n');
    matrix_table(&mut out, "G", &params.g);
    let p0: Vec<String> = params.p0.iter().map(|&x| fmt_sig(x, 3)).collect();
    let _ = writeln!(out, "p0\n     {}\n", p0.join("  "));
    matrix_table(&mut out, "norm(R)", &params.norm_r());
    let _ = writeln!(out, "a = {}  d = {}", fmt_sig(params.a, 4), fmt_sig(params.d, 4));
    out
}

fn report_header(report: &FitReport) -> String {
    let failed = report.restart_elbos.iter().filter(|e| e.is_none()).count();
    format!(
        "iterations {}  converged {}  best restart {} of {} ({} failed)\nELBO {}\n\n",
        report.iterations,
        report.converged,
        report.best_restart + 1,
        report.restart_elbos.len(),
        failed,
        fmt_sig(report.elbo, 8)
    )
}

/// Writes the full bundle into `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, report: &FitReport, seqs: &[EventSequence], codebook: &Codebook) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params_io::save(&report.params, &dir.join(PARAMS_FILE))?;
    write_file(&dir.join(STATES_FILE), &states_tsv(report, seqs))?;
    write_file(&dir.join(TRACE_FILE), &trace_tsv(report))?;
    save_codebook(&dir.join(CODEBOOK_FILE), codebook)?;
    let summary = report_header(report) + &summary_text(&report.params, codebook, 7);
    write_file(&dir.join(SUMMARY_FILE), &summary)
}

/// Per-examinee rows of a bundle's state file.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    pub id: String,
    pub n_events: usize,
    pub kappa: f64,
    pub gamma: Array2<f64>,
}

pub fn read_states(path: &Path, k: usize) -> Result<Vec<StateRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: &str| Error::MalformedRow {
            line: i + 1,
            detail: detail.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 + k * k {
            return Err(bad("wrong number of fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("not a number"));
        let gamma: Vec<f64> = f[6..].iter().map(|s| num(s)).collect::<Result<_>>()?;
        rows.push(StateRow {
            id: f[0].to_string(),
            n_events: f[1].parse().map_err(|_| bad("n_events is not an integer"))?,
            kappa: num(f[2])?,
            gamma: Array2::from_shape_vec((k, k), gamma).expect("length checked"),
        });
    }
    Ok(rows)
}

/// Loaded bundle: parameters, codebook and state rows.
pub struct Bundle {
    pub params: ModelParams,
    pub codebook: Codebook,
    pub states: Vec<StateRow>,
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let params = params_io::load(&dir.join(PARAMS_FILE))?;
    let codebook = load_codebook(&dir.join(CODEBOOK_FILE))?;
    let states = read_states(&dir.join(STATES_FILE), params.k())?;
    Ok(Bundle {
        params,
        codebook,
        states,
    })
}

pub fn vector_line(xs: &Array1<f64>) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join("\t")
}
