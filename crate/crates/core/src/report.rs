//! Text summaries and plot-data tables built from metrics records.

use std::fmt::Write as _;

use crate::train::MetricsRecord;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub text: String,
    /// `(file name, tab-separated contents)` pairs.
    pub plots: Vec<(String, String)>,
}

fn of_kind<'a>(records: &'a [MetricsRecord], kind: &'a str) -> impl Iterator<Item = &'a MetricsRecord> + 'a {
    records.iter().filter(move |r| r.get("kind") == Some(kind))
}

fn num(r: &MetricsRecord, key: &str) -> f64 {
    r.get_f(key).unwrap_or(f64::NAN)
}

/// Fixed-width table with a label column.
fn table(out: &mut String, header: (&str, Vec<String>), rows: Vec<(&str, Vec<String>)>) {
    let width = rows.iter().map(|(l, _)| l.len()).chain([header.0.len()]).max().unwrap_or(0);
    let mut line = |label: &str, cells: &[String]| {
        let _ = write!(out, "{label:<width$}");
        for c in cells {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
    };
    line(header.0, &header.1);
    for (l, cells) in &rows {
        line(l, cells);
    }
    out.push('\n');
}

fn tsv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    s
}

/// Summarises the records. Output depends only on the input.
pub fn report(records: &[MetricsRecord]) -> Report {
    let mut rep = Report::default();
    let out = &mut rep.text;

    let train: Vec<_> = of_kind(records, "train").collect();
    if let (Some(first), Some(last)) = (train.first(), train.last()) {
        let _ = writeln!(out, "Training");
        let _ = writeln!(
            out,
            "  steps {}..{}  loss {:.4} -> {:.4}  (und {:.4}, gen {:.4}, inter {:.4})\n",
            first.get("step").unwrap_or("?"),
            last.get("step").unwrap_or("?"),
            num(first, "loss"),
            num(last, "loss"),
            num(last, "und"),
            num(last, "gen"),
            num(last, "inter"),
        );
        let cols = ["step", "loss", "und", "gen", "inter"];
        rep.plots.push((
            "loss.tsv".into(),
            tsv(&cols, train.iter().map(|r| cols.iter().map(|c| r.get(c).unwrap_or("").to_string()).collect())),
        ));
    }

    for r in of_kind(records, "eval_und") {
        let _ = writeln!(
            out,
            "Understanding: token accuracy {:.2}%  exact match {:.2}%  mean length {:.2}  ({} samples)\n",
            100.0 * num(r, "token_accuracy"),
            100.0 * num(r, "exact_match"),
            num(r, "mean_len"),
            r.get("samples").unwrap_or("?"),
        );
    }

    let lens: Vec<_> = of_kind(records, "eval_len").collect();
    if !lens.is_empty() {
        let _ = writeln!(out, "Block length sweep");
        let cell = |r: &&MetricsRecord, k: &str, scale: f64| format!("{:.1}", scale * num(r, k));
        table(
            out,
            ("Block length", lens.iter().map(|r| r.get("block_len").unwrap_or("?").to_string()).collect()),
            vec![
                ("Average tokens", lens.iter().map(|r| cell(r, "mean_len", 1.0)).collect()),
                ("Accuracy (%)", lens.iter().map(|r| cell(r, "exact_match", 100.0)).collect()),
                ("Terminated (%)", lens.iter().map(|r| cell(r, "terminated", 100.0)).collect()),
            ],
        );
    }

    let th: Vec<_> = of_kind(records, "threshold").collect();
    if !th.is_empty() {
        let _ = writeln!(out, "Confidence threshold sweep");
        table(
            out,
            ("Threshold", th.iter().map(|r| r.get("threshold").unwrap_or("?").to_string()).collect()),
            vec![
                ("Accuracy (%)", th.iter().map(|r| format!("{:.1}", 100.0 * num(r, "exact_match"))).collect()),
                ("Throughput (tokens/s)", th.iter().map(|r| format!("{:.1}", num(r, "tokens_per_sec"))).collect()),
                ("Passes per token", th.iter().map(|r| format!("{:.3}", num(r, "passes_per_token"))).collect()),
            ],
        );
        let cols = ["threshold", "exact_match", "tokens_per_sec", "passes_per_token"];
        rep.plots.push((
            "threshold.tsv".into(),
            tsv(&cols, th.iter().map(|r| cols.iter().map(|c| r.get(c).unwrap_or("").to_string()).collect())),
        ));
    }

    let bench: Vec<_> = of_kind(records, "bench_cache").collect();
    if !bench.is_empty() {
        let _ = writeln!(out, "Prefix cache");
        table(
            out,
            ("Prefix length", bench.iter().map(|r| r.get("prefix").unwrap_or("?").to_string()).collect()),
            vec![
                ("Wall-time speedup", bench.iter().map(|r| format!("{:.2}", num(r, "speedup"))).collect()),
                ("Positions ratio", bench.iter().map(|r| format!("{:.2}", num(r, "rows_ratio"))).collect()),
                ("Cost model ratio", bench.iter().map(|r| format!("{:.2}", num(r, "analytic_ratio"))).collect()),
            ],
        );
        let cols = ["prefix", "speedup", "rows_ratio", "analytic_ratio"];
        rep.plots.push((
            "cache.tsv".into(),
            tsv(&cols, bench.iter().map(|r| cols.iter().map(|c| r.get(c).unwrap_or("").to_string()).collect())),
        ));
    }

    for r in of_kind(records, "eval_gen") {
        let _ = writeln!(
            out,
            "Latent generation: max class-mean error {:.3} sigma  within 3 sigma {:.1}%  ({} per class)\n",
            num(r, "max_err_sigma"),
            100.0 * num(r, "within_3sigma"),
            r.get("per_class").unwrap_or("?"),
        );
    }
    rep
}
