//! CSV and SVG report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{mean_std, RunKey, RunRecord};
use crate::error::{Error, Result};

/// Formats `x` with 6 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}").to_lowercase();
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..15).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

fn tag_string(tags: &BTreeMap<String, String>) -> String {
    tags.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn chunk_string(chunk: Option<usize>) -> String {
    chunk.map_or(String::new(), |c| c.to_string())
}

fn key_cols(key: &RunKey) -> String {
    format!(
        "{},{},{},{},{}",
        key.benchmark,
        key.strategy,
        key.model,
        chunk_string(key.chunk),
        key.head_mode
    )
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub key: RunKey,
    pub tags: String,
    pub n_runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
}

const SUMMARY_HEADER: &str = "benchmark,strategy,model,chunk,head_mode,tags,n_runs,acc_mean,acc_std";

fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(RunKey, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.key.clone(), tag_string(&r.tags)))
            .or_default()
            .push(r.acc()?);
    }
    Ok(groups
        .into_iter()
        .map(|((key, tags), accs)| {
            let (acc_mean, acc_std) = mean_std(&accs);
            SummaryRow {
                key,
                tags,
                n_runs: accs.len(),
                acc_mean,
                acc_std,
            }
        })
        .collect())
}

/// Parses a summary CSV written by [`emit_report`].
pub fn parse_summary(text: &str, path: &Path) -> Result<Vec<SummaryRow>> {
    let mut offset = 0u64;
    let mut rows = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let fmt_err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        let body = line.trim_end_matches(['\n', '\r']);
        if i == 0 {
            if body != SUMMARY_HEADER {
                return Err(fmt_err(format!("unexpected header {body:?}")));
            }
        } else if !body.is_empty() {
            let f: Vec<&str> = body.split(',').collect();
            if f.len() != 9 {
                return Err(fmt_err(format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| fmt_err(format!("{s:?}: {e}")));
            rows.push(SummaryRow {
                key: RunKey {
                    benchmark: f[0].into(),
                    strategy: f[1].into(),
                    model: f[2].into(),
                    chunk: if f[3].is_empty() {
                        None
                    } else {
                        Some(f[3].parse().map_err(|e| fmt_err(format!("chunk {:?}: {e}", f[3])))?)
                    },
                    head_mode: f[4].into(),
                },
                tags: f[5].into(),
                n_runs: f[6].parse().map_err(|e| fmt_err(format!("n_runs {:?}: {e}", f[6])))?,
                acc_mean: num(f[7])?,
                acc_std: num(f[8])?,
            });
        }
        offset += line.len() as u64;
    }
    Ok(rows)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes summary, paired, sequence-length and timing CSVs plus SVG charts
/// into `out_dir`. Returns the written paths.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Protocol("report needs at least one run record".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let summary = summarize(records)?;
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for row in &summary {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            key_cols(&row.key),
            row.tags,
            row.n_runs,
            fmt_sig(row.acc_mean),
            fmt_sig(row.acc_std)
        );
    }
    written.push(write(out_dir, "summary.csv", &csv)?);

    let mut paired = String::from("benchmark,strategy,model,chunk,head_mode,tags,seed,step,acc_at_step_end,acc_final\n");
    for r in records {
        let m = &r.matrix;
        if m.trained() != m.evaluated() || m.trained() == 0 {
            continue;
        }
        let last = m.trained() - 1;
        for t in 0..m.evaluated() {
            let (Some(end), Some(fin)) = (m.get(t, t), m.get(last, t)) else {
                continue;
            };
            let _ = writeln!(
                paired,
                "{},{},{},{},{},{}",
                key_cols(&r.key),
                tag_string(&r.tags),
                r.seed,
                t,
                fmt_sig(end),
                fmt_sig(fin)
            );
        }
    }
    written.push(write(out_dir, "paired.csv", &paired)?);

    let chunked: Vec<&SummaryRow> = summary.iter().filter(|s| s.key.chunk.is_some()).collect();
    let mut seqlen = String::from("benchmark,strategy,model,head_mode,tags,chunk,n_runs,acc_mean,acc_std\n");
    for s in &chunked {
        let _ = writeln!(
            seqlen,
            "{},{},{},{},{},{},{},{},{}",
            s.key.benchmark,
            s.key.strategy,
            s.key.model,
            s.key.head_mode,
            s.tags,
            chunk_string(s.key.chunk),
            s.n_runs,
            fmt_sig(s.acc_mean),
            fmt_sig(s.acc_std)
        );
    }
    written.push(write(out_dir, "seqlen.csv", &seqlen)?);

    let mut timing = String::from("benchmark,strategy,model,chunk,head_mode,tags,seed,step,seconds\n");
    for r in records {
        for (t, s) in r.step_seconds.iter().enumerate() {
            let _ = writeln!(
                timing,
                "{},{},{},{},{}",
                key_cols(&r.key),
                tag_string(&r.tags),
                r.seed,
                t,
                fmt_sig(*s)
            );
        }
    }
    written.push(write(out_dir, "timing.csv", &timing)?);

    written.push(write(out_dir, "summary.svg", &bar_chart(&summary))?);
    if !chunked.is_empty() {
        written.push(write(out_dir, "seqlen.svg", &line_chart(&chunked))?);
    }
    Ok(written)
}

fn label(s: &SummaryRow) -> String {
    let mut l = format!("{} {}", s.key.strategy, s.key.model);
    if let Some(c) = s.key.chunk {
        let _ = write!(l, " c{c}");
    }
    if !s.tags.is_empty() {
        let _ = write!(l, " {}", s.tags);
    }
    l
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn bar_chart(rows: &[SummaryRow]) -> String {
    let bar = 22.0;
    let left = 260.0;
    let width = 400.0;
    let height = 40.0 + bar * rows.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        left + width + 80.0
    );
    let _ = writeln!(svg, "<text x=\"{left}\" y=\"14\">mean ACC (bars) with std</text>");
    for (i, s) in rows.iter().enumerate() {
        let y = 24.0 + bar * i as f64;
        let w = (s.acc_mean.clamp(0.0, 1.0)) * width;
        let e = s.acc_std * width;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + bar * 0.6,
            escape(&label(s))
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{left}\" y=\"{y}\" width=\"{w:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            bar * 0.8,
            COLORS[i % COLORS.len()]
        );
        let cy = y + bar * 0.4;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{cy:.2}\" x2=\"{:.2}\" y2=\"{cy:.2}\" stroke=\"black\"/>",
            left + (w - e).max(0.0),
            left + (w + e).min(width)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            left + width + 6.0,
            y + bar * 0.6,
            fmt_sig(s.acc_mean)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn line_chart(rows: &[&SummaryRow]) -> String {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for s in rows {
        let name = format!("{} {} {} {}", s.key.benchmark, s.key.strategy, s.key.model, s.tags);
        series.entry(name.trim().to_string()).or_default().push((s.key.chunk.unwrap_or(0), s.acc_mean));
    }
    let chunks: Vec<usize> = {
        let mut c: Vec<usize> = rows.iter().filter_map(|s| s.key.chunk).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let (x0, y0, w, h) = (50.0, 20.0, 420.0, 260.0);
    let xpos = |c: usize| {
        let i = chunks.iter().position(|&v| v == c).unwrap_or(0);
        if chunks.len() == 1 {
            x0 + w / 2.0
        } else {
            x0 + w * i as f64 / (chunks.len() - 1) as f64
        }
    };
    let ypos = |a: f64| y0 + h * (1.0 - a.clamp(0.0, 1.0));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        x0 + w + 260.0,
        y0 + h + 40.0
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>"
    );
    for c in &chunks {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{c}</text>",
            xpos(*c),
            y0 + h + 14.0
        );
    }
    for a in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{a}</text>",
            x0 - 4.0,
            ypos(a) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">pixels per step</text>",
        x0 + w / 2.0,
        y0 + h + 32.0
    );
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|p| p.0);
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(c, a)| format!("{:.2},{:.2}", xpos(c), ypos(a))).collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            x0 + w + 10.0,
            y0 + 12.0 + 14.0 * i as f64,
            escape(&name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::AccuracyMatrix;
    use crate::strategies::Diagnostics;
    use proptest::prelude::*;

    fn record(strategy: &str, chunk: Option<usize>, seed: u64, rows: Vec<Vec<Option<f64>>>) -> RunRecord {
        RunRecord {
            key: RunKey {
                benchmark: "smnist".into(),
                strategy: strategy.into(),
                model: "lstm".into(),
                chunk,
                head_mode: "single".into(),
            },
            tags: BTreeMap::new(),
            config: serde_json::Value::Null,
            seed,
            step_seconds: vec![1.5; rows.len()],
            matrix: AccuracyMatrix::from_rows(rows).unwrap(),
            diagnostics: Diagnostics::default(),
        }
    }

    fn round6(x: f64) -> f64 {
        format!("{x:.5e}").parse().unwrap()
    }

    #[test]
    fn sig_digits() {
        assert_eq!(fmt_sig(0.2), "0.200000");
        assert_eq!(fmt_sig(1.0), "1.00000");
        assert_eq!(fmt_sig(123.4567891), "123.457");
        assert_eq!(fmt_sig(0.0), "0.00000");
        assert_eq!(fmt_sig(1.5e-7), "1.50000e-7");
        assert_eq!(fmt_sig(-0.0123456789), "-0.0123457");
    }

    #[test]
    fn five_equal_runs() {
        let dir = tempfile::tempdir().unwrap();
        let rows = |v: f64| vec![vec![Some(v), None], vec![Some(v), Some(v)]];
        let recs: Vec<RunRecord> = (0..5).map(|s| record("naive", None, s, rows(0.2))).collect();
        emit_report(&recs, dir.path()).unwrap();
        let path = dir.path().join("summary.csv");
        let parsed = parse_summary(&fs::read_to_string(&path).unwrap(), &path).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].n_runs, 5);
        assert_eq!(parsed[0].acc_mean, 0.2);
        assert_eq!(parsed[0].acc_std, 0.0);
        assert!(!dir.path().join("seqlen.svg").exists());
        assert!(fs::read_to_string(dir.path().join("summary.svg")).unwrap().starts_with("<svg"));
    }

    #[test]
    fn paired_lines_from_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let t = 4;
        let rows: Vec<Vec<Option<f64>>> = (0..t)
            .map(|i| {
                (0..t)
                    .map(|j| {
                        if i == t - 1 {
                            Some(if j == t - 1 { 1.0 } else { 0.0 })
                        } else if j == i {
                            Some(1.0)
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        emit_report(&[record("naive", Some(28), 0, rows)], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("paired.csv")).unwrap();
        let lines: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(lines.len(), t);
        for (step, line) in lines.iter().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[7], step.to_string());
            assert_eq!(f[8], "1.00000");
            assert_eq!(f[9], if step == t - 1 { "1.00000" } else { "0.00000" });
        }
        assert!(dir.path().join("seqlen.svg").exists());
        let timing = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
        assert_eq!(timing.lines().count(), 1 + t);
    }

    #[test]
    fn rectangular_joint_matrix_skips_paired() {
        let dir = tempfile::tempdir().unwrap();
        let joint = record("joint", None, 0, vec![vec![Some(0.9), Some(0.8), Some(0.7)]]);
        emit_report(&[joint], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("paired.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], dir.path()), Err(Error::Protocol(_))));
        let file = dir.path().join("blocker");
        fs::write(&file, "x").unwrap();
        let rec = record("naive", None, 0, vec![vec![Some(1.0)]]);
        assert!(matches!(emit_report(&[rec], &file.join("out")), Err(Error::Io { .. })));
        assert!(parse_summary("bad,header\n", Path::new("s.csv")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn summary_round_trips(groups in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 1..6), 1..5)) {
            let dir = tempfile::tempdir().unwrap();
            let mut recs = Vec::new();
            for (g, accs) in groups.iter().enumerate() {
                for (s, &a) in accs.iter().enumerate() {
                    recs.push(record(&format!("s{g}"), Some(g + 1), s as u64, vec![vec![Some(a)]]));
                }
            }
            emit_report(&recs, dir.path()).unwrap();
            let path = dir.path().join("summary.csv");
            let parsed = parse_summary(&fs::read_to_string(&path).unwrap(), &path).unwrap();
            prop_assert_eq!(parsed.len(), groups.len());
            for (row, accs) in parsed.iter().zip(&groups) {
                let (m, s) = mean_std(accs);
                prop_assert_eq!(row.n_runs, accs.len());
                prop_assert_eq!(row.acc_mean, round6(m));
                prop_assert_eq!(row.acc_std, round6(s));
            }
        }
    }
}
