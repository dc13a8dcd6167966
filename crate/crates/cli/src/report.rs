//! Report emission: comma-separated tables, standalone SVG histograms with
//! numeric sidecars, and run manifests. Everything except manifests is a
//! pure function of its inputs; manifests alone carry timestamps.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dsaa_core::analysis::{SeparationStats, SuppressionReport};
use dsaa_core::eval::EvalReport;

#[derive(Debug)]
pub struct ReportError {
    pub path: PathBuf,
    pub detail: String,
}

impl std::fmt::Display for ReportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cannot write {}: {}", self.path.display(), self.detail)
    }
}

impl std::error::Error for ReportError {}

pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| ReportError {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        }
    }
    std::fs::write(path, text).map_err(|e| ReportError {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn fmt_map(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// One header line, one value line, mirroring the eval table layout.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut header: Vec<&str> = report.columns.iter().map(|c| c.label()).collect();
    header.push("Average");
    let mut values: Vec<String> = report.columns.iter().map(|c| fmt_map(c.map)).collect();
    values.push(fmt_map(report.average));
    format!("{}\n{}\n", header.join(","), values.join(","))
}

/// Fixed-width rendering of the same table for terminal output.
pub fn eval_table_text(report: &EvalReport) -> String {
    let mut head = String::new();
    let mut vals = String::new();
    for c in &report.columns {
        head.push_str(&format!("{:>14}", c.label()));
        vals.push_str(&format!(
            "{:>14}",
            c.map.map_or(String::from("-"), |v| format!("{:.1}", 100.0 * v))
        ));
    }
    head.push_str(&format!("{:>14}", "Average"));
    vals.push_str(&format!(
        "{:>14}",
        report
            .average
            .map_or(String::from("-"), |v| format!("{:.1}", 100.0 * v))
    ));
    format!("{head}\n{vals}\n")
}

/// Suppression distances as rows of (pair, noun, group) with one value
/// column per checkpoint. Rows follow the first report's order; a report
/// missing a row leaves its cell empty.
pub fn suppression_csv(names: &[String], reports: &[SuppressionReport]) -> String {
    assert_eq!(names.len(), reports.len());
    let mut out = String::from("attr_a,attr_b,noun,group");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let mut keys: Vec<(String, String, String, bool)> = Vec::new();
    for r in reports {
        for row in &r.rows {
            let key = (
                row.attr_a.clone(),
                row.attr_b.clone(),
                row.noun.clone(),
                row.neutral,
            );
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    for (a, b, noun, neutral) in &keys {
        let group = if *neutral { "neutral" } else { "explicit" };
        out.push_str(&format!("{a},{b},{noun},{group}"));
        for r in reports {
            let cell = r
                .rows
                .iter()
                .find(|row| {
                    row.attr_a == *a
                        && row.attr_b == *b
                        && row.noun == *noun
                        && row.neutral == *neutral
                })
                .map(|row| format!("{:.6}", row.distance))
                .unwrap_or_default();
            out.push(',');
            out.push_str(&cell);
        }
        out.push('\n');
    }
    for (label, pick) in [
        ("neutral_mean", true),
        ("explicit_mean", false),
    ] {
        out.push_str(&format!("{label},,,"));
        for r in reports {
            let mean = if pick { r.neutral_mean } else { r.explicit_mean };
            out.push(',');
            out.push_str(&fmt_map(mean));
        }
        out.push('\n');
    }
    out
}

/// Bin edges and both count series; the adjacent data file for a histogram.
pub fn separation_sidecar_csv(stats: &SeparationStats) -> String {
    let mut out = String::from("bin_lo,bin_hi,positive_count,negative_count\n");
    let bins = stats.pos_hist.counts.len();
    let width = (stats.pos_hist.hi - stats.pos_hist.lo) / bins as f64;
    for i in 0..bins {
        let lo = stats.pos_hist.lo + i as f64 * width;
        let hi = if i + 1 == bins { stats.pos_hist.hi } else { lo + width };
        out.push_str(&format!(
            "{lo:.6},{hi:.6},{},{}\n",
            stats.pos_hist.counts[i], stats.neg_hist.counts[i]
        ));
    }
    out.push_str(&format!(
        "# pos_mean={:.6} neg_mean={:.6} gap={:.6}\n",
        stats.pos_mean, stats.neg_mean, stats.gap
    ));
    out
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 56.0;

/// Overlaid positive/negative distance histograms with labeled axes.
pub fn separation_svg(title: &str, stats: &SeparationStats) -> String {
    let bins = stats.pos_hist.counts.len();
    let peak = stats
        .pos_hist
        .counts
        .iter()
        .chain(&stats.neg_hist.counts)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let bar_w = plot_w / bins as f64;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" \
         text-anchor=\"middle\">{title}</text>\n",
        SVG_W / 2.0
    ));
    for (counts, color) in [
        (&stats.pos_hist.counts, "#2a6fb0"),
        (&stats.neg_hist.counts, "#c0392b"),
    ] {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = plot_h * c as f64 / peak;
            let x = MARGIN_L + i as f64 * bar_w;
            let y = MARGIN_T + plot_h - h;
            s.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.55\"/>\n",
                bar_w.max(1.0)
            ));
        }
    }
    let axis_y = MARGIN_T + plot_h;
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{axis_y}\" x2=\"{:.1}\" y2=\"{axis_y}\" \
         stroke=\"black\"/>\n",
        MARGIN_L + plot_w
    ));
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{axis_y}\" \
         stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{MARGIN_L}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">{:.3}</text>\n",
        axis_y + 20.0,
        stats.pos_hist.lo
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">{:.3}</text>\n",
        MARGIN_L + plot_w,
        axis_y + 20.0,
        stats.pos_hist.hi
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"13\" \
         text-anchor=\"middle\">cosine distance</text>\n",
        MARGIN_L + plot_w / 2.0,
        axis_y + 40.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"end\">{}</text>\n",
        MARGIN_L - 8.0,
        MARGIN_T + 12.0,
        peak as usize
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"end\">0</text>\n",
        MARGIN_L - 8.0,
        axis_y
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">count</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));
    s.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"{MARGIN_T}\" width=\"12\" height=\"12\" fill=\"#2a6fb0\" \
         fill-opacity=\"0.55\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" \
         font-size=\"12\">positive</text>\n",
        MARGIN_L + plot_w - 120.0,
        MARGIN_L + plot_w - 104.0,
        MARGIN_T + 10.0
    ));
    s.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"#c0392b\" \
         fill-opacity=\"0.55\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" \
         font-size=\"12\">negative</text>\n",
        MARGIN_L + plot_w - 120.0,
        MARGIN_T + 18.0,
        MARGIN_L + plot_w - 104.0,
        MARGIN_T + 28.0
    ));
    s.push_str("</svg>\n");
    s
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Run manifest; the single artifact allowed to carry wall-clock time.
pub fn manifest_json(
    command: &str,
    seed: u64,
    config_digest: &str,
    checkpoint_hashes: &[(String, String)],
    outputs: &[String],
) -> String {
    let doc = serde_json::json!({
        "created_unix": unix_now(),
        "command": command,
        "seed": seed,
        "config_digest": config_digest,
        "checkpoint_hashes": checkpoint_hashes
            .iter()
            .map(|(n, h)| serde_json::json!({ "name": n, "sha256": h }))
            .collect::<Vec<_>>(),
        "outputs": outputs,
    });
    format!("{doc:#}\n")
}
