//! Multi-run comparison reports.
//!
//! Runs are grouped by their config label and aggregated over seeds from
//! the last eval point of each `metrics.jsonl`. The report is a pure
//! function of the run directories' `run.json` and `metrics.jsonl`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schedule::{LrKind, PolicyKind};
use crate::trainer::{read_metrics, MetricPoint, RunMetadata, METRICS_FILE, RUN_FILE};
use crate::util::{mean, median, read_json};

pub const REPORT_MD: &str = "report.md";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_SVG: &str = "curves.svg";
pub const TRENDS_JSON: &str = "trends.json";

const EQUAL_TOLERANCE: f64 = 0.005;
const PSEUDO_RPN_MAP_BAND: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub meta: RunMetadata,
    pub points: Vec<MetricPoint>,
}

impl LoadedRun {
    pub fn final_point(&self) -> &MetricPoint {
        self.points.last().expect("loaded runs have points")
    }

    pub fn seed(&self) -> u64 {
        self.meta.config.seed
    }

    /// Phase whose model is the run's result.
    pub fn final_phase(&self) -> u32 {
        self.final_point().phase
    }
}

/// Load one run directory; the inner `Err` gives the reason it has no metrics.
pub fn load_run(dir: &Path) -> Result<std::result::Result<LoadedRun, String>> {
    let metrics = dir.join(METRICS_FILE);
    let run = dir.join(RUN_FILE);
    if !metrics.is_file() {
        return Ok(Err(format!("no {METRICS_FILE}")));
    }
    if !run.is_file() {
        return Ok(Err(format!("no {RUN_FILE}")));
    }
    let points = read_metrics(&metrics)?;
    if points.is_empty() {
        return Ok(Err(format!("{METRICS_FILE} has no eval points")));
    }
    let meta: RunMetadata = read_json(&run)?;
    Ok(Ok(LoadedRun {
        dir: dir.to_path_buf(),
        meta,
        points,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub incomplete: usize,
    pub map_values: Vec<f64>,
    pub map_mean: f64,
    pub map_median: f64,
    pub ap50_median: f64,
    pub rpn_recall_median: f64,
    pub pmcr_threshold: f64,
    /// Median over runs where any proposal fired.
    pub pmcr_median: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendStatus {
    Pass,
    Fail,
    NotApplicable,
}

impl TrendStatus {
    fn of(ok: bool) -> Self {
        if ok {
            TrendStatus::Pass
        } else {
            TrendStatus::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrendStatus::Pass => "pass",
            TrendStatus::Fail => "FAIL",
            TrendStatus::NotApplicable => "n/a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub name: String,
    pub rule: String,
    pub status: TrendStatus,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub dataset_hash: String,
    pub runs: Vec<LoadedRun>,
    pub skipped: Vec<(PathBuf, String)>,
    /// Sorted by median mAP, best first.
    pub rows: Vec<SummaryRow>,
    pub trends: Vec<TrendCheck>,
}

pub fn compare_runs(dirs: &[PathBuf]) -> Result<CompareReport> {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for d in dirs {
        match load_run(d)? {
            Ok(r) => runs.push(r),
            Err(why) => skipped.push((d.clone(), why)),
        }
    }
    if runs.is_empty() {
        return Err(Error::Invalid("no run directory with metrics".into()));
    }
    let hash = runs[0].meta.dataset_hash.clone();
    if let Some(other) = runs.iter().find(|r| r.meta.dataset_hash != hash) {
        return Err(Error::Invalid(format!(
            "{} and {} were trained on different datasets; refusing to compare",
            runs[0].dir.display(),
            other.dir.display()
        )));
    }
    runs.sort_by(|a, b| {
        (a.meta.label.as_str(), a.seed(), &a.dir).cmp(&(b.meta.label.as_str(), b.seed(), &b.dir))
    });
    let rows = summarize(&runs);
    let trends = trend_checks(&runs, &rows);
    Ok(CompareReport {
        dataset_hash: hash,
        runs,
        skipped,
        rows,
        trends,
    })
}

fn groups(runs: &[LoadedRun]) -> BTreeMap<&str, Vec<&LoadedRun>> {
    let mut g: BTreeMap<&str, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        g.entry(r.meta.label.as_str()).or_default().push(r);
    }
    g
}

fn summarize(runs: &[LoadedRun]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = groups(runs)
        .into_iter()
        .map(|(label, rs)| {
            let finals: Vec<&MetricPoint> = rs.iter().map(|r| r.final_point()).collect();
            let maps: Vec<f64> = finals.iter().map(|p| p.val.map).collect();
            let pmcrs: Vec<f64> = finals.iter().filter_map(|p| p.val.pmcr).collect();
            SummaryRow {
                label: label.to_string(),
                runs: rs.len(),
                seeds: rs.iter().map(|r| r.seed()).collect(),
                incomplete: rs.iter().filter(|r| !r.meta.completed).count(),
                map_mean: mean(&maps),
                map_median: median(&maps),
                map_values: maps,
                ap50_median: median(&finals.iter().map(|p| p.val.ap50).collect::<Vec<_>>()),
                rpn_recall_median: median(&finals.iter().map(|p| p.val.rpn_recall).collect::<Vec<_>>()),
                pmcr_threshold: finals[0].val.pmcr_threshold,
                pmcr_median: (!pmcrs.is_empty()).then(|| median(&pmcrs)),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.map_median.total_cmp(&a.map_median).then_with(|| a.label.cmp(&b.label)));
    rows
}

fn row<'a>(rows: &'a [SummaryRow], label: &str) -> Option<&'a SummaryRow> {
    rows.iter().find(|r| r.label == label)
}

fn not_applicable(name: &str, rule: &str, why: &str) -> TrendCheck {
    TrendCheck {
        name: name.into(),
        rule: rule.into(),
        status: TrendStatus::NotApplicable,
        detail: why.into(),
    }
}

fn map_order(name: &str, hi: &str, lo: &str, slack: f64, strict: bool, rows: &[SummaryRow]) -> TrendCheck {
    let rule = if strict {
        format!("median mAP {hi} > {lo}")
    } else {
        format!("median mAP {hi} >= {lo} - {slack}")
    };
    match (row(rows, hi), row(rows, lo)) {
        (Some(a), Some(b)) => {
            let gap = a.map_median - b.map_median;
            TrendCheck {
                name: name.into(),
                rule,
                status: TrendStatus::of(if strict { gap > 0.0 } else { gap >= -slack }),
                detail: format!("{:.4} vs {:.4} (gap {gap:+.4})", a.map_median, b.map_median),
            }
        }
        _ => not_applicable(name, &rule, &format!("needs runs labelled {hi} and {lo}")),
    }
}

/// Labels that differ from another present label only by `suffix`.
fn suffix_pairs<'a>(rows: &'a [SummaryRow], suffix: &str) -> Vec<(&'a SummaryRow, &'a SummaryRow)> {
    let mut out: Vec<_> = rows
        .iter()
        .filter(|r| r.label.contains(suffix))
        .filter_map(|r| row(rows, &r.label.replacen(suffix, "", 1)).map(|base| (r, base)))
        .collect();
    out.sort_by(|a, b| a.0.label.cmp(&b.0.label));
    out
}

/// Per-cycle mAP differences (cycle end minus cycle midpoint) after burn-in.
pub fn cycle_end_gains(run: &LoadedRun) -> Vec<f64> {
    let cfg = &run.meta.config;
    let lr = cfg.lr_config();
    if run.meta.policy.kind != PolicyKind::Periodic || lr.kind != LrKind::CosineCyclic {
        return Vec::new();
    }
    let phase = run.final_phase();
    let at = |i: u64| {
        run.points
            .iter()
            .find(|p| p.phase == phase && p.iteration == i)
            .map(|p| p.val.map)
    };
    let c = lr.cycle_length;
    (run.meta.policy.burn_in_cycles..lr.cycles)
        .filter_map(|k| Some(at((k + 1) * c)? - at(k * c + c / 2)?))
        .collect()
}

fn trend_checks(runs: &[LoadedRun], rows: &[SummaryRow]) -> Vec<TrendCheck> {
    let mut t = vec![
        map_order("pseudo_labels_opl", "opl_periodic", "baseline", 0.0, true, rows),
        map_order("pseudo_labels_offline", "offline_pseudo", "baseline", 0.0, true, rows),
        map_order("periodic_vs_ema", "opl_periodic", "online_ema", EQUAL_TOLERANCE, false, rows),
    ];

    let gains: Vec<f64> = runs.iter().flat_map(cycle_end_gains).collect();
    let rule = "median over cycles after burn-in of mAP(cycle end) - mAP(cycle midpoint) >= 0";
    t.push(if gains.is_empty() {
        not_applicable(
            "cycle_end_vs_midpoint",
            rule,
            "needs periodic-teacher runs with eval points at cycle midpoints and ends",
        )
    } else {
        let m = median(&gains);
        TrendCheck {
            name: "cycle_end_vs_midpoint".into(),
            rule: rule.into(),
            status: TrendStatus::of(m >= 0.0),
            detail: format!("median gain {m:+.4} over {} cycles", gains.len()),
        }
    });

    let pairs = suffix_pairs(rows, "+mbox");
    if pairs.is_empty() {
        t.push(not_applicable(
            "category_specific_box",
            "median mAP X+mbox >= X - 0.005",
            "needs a label X and X+mbox",
        ));
    }
    for (m, base) in pairs {
        t.push(map_order(
            "category_specific_box",
            &m.label,
            &base.label,
            EQUAL_TOLERANCE,
            false,
            rows,
        ));
    }

    let pairs = suffix_pairs(rows, "+prpn");
    let rule = format!("median RPN recall X+prpn >= X and |median mAP gap| <= {PSEUDO_RPN_MAP_BAND}");
    if pairs.is_empty() {
        t.push(not_applicable("pseudo_rpn", &rule, "needs a label X and X+prpn"));
    }
    for (p, base) in pairs {
        let dr = p.rpn_recall_median - base.rpn_recall_median;
        let dm = p.map_median - base.map_median;
        t.push(TrendCheck {
            name: "pseudo_rpn".into(),
            rule: rule.clone(),
            status: TrendStatus::of(dr >= 0.0 && dm.abs() <= PSEUDO_RPN_MAP_BAND),
            detail: format!("{} vs {}: recall {dr:+.4}, mAP {dm:+.4}", p.label, base.label),
        });
    }
    t
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CompareReport {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "rank,label,runs,seeds,map_mean,map_median,ap50_median,rpn_recall_median,pmcr_threshold,pmcr_median\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                i + 1,
                r.label,
                r.runs,
                seeds.join(" "),
                r.map_mean,
                r.map_median,
                r.ap50_median,
                r.rpn_recall_median,
                r.pmcr_threshold,
                opt(r.pmcr_median)
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("label,seed,run,phase,iteration,lr,loss,map,ap50,rpn_recall,pmcr\n");
        for r in &self.runs {
            for p in &r.points {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.meta.label,
                    r.seed(),
                    r.dir.display(),
                    p.phase,
                    p.iteration,
                    p.lr,
                    p.loss.total,
                    p.val.map,
                    p.val.ap50,
                    p.val.rpn_recall,
                    opt(p.val.pmcr)
                );
            }
        }
        s
    }

    /// Median mAP over a label's runs at each eval iteration of the final
    /// phase.
    pub fn median_curves(&self) -> Vec<(String, Vec<(u64, f64)>)> {
        groups(&self.runs)
            .into_iter()
            .map(|(label, rs)| {
                let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                for r in rs {
                    let phase = r.final_phase();
                    for p in r.points.iter().filter(|p| p.phase == phase) {
                        at.entry(p.iteration).or_default().push(p.val.map);
                    }
                }
                (label.to_string(), at.into_iter().map(|(i, v)| (i, median(&v))).collect())
            })
            .collect()
    }

    pub fn curves_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 420.0;
        const L: f64 = 60.0;
        const R: f64 = 200.0;
        const T: f64 = 20.0;
        const B: f64 = 50.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
        ];
        let curves = self.median_curves();
        let x_max = curves
            .iter()
            .flat_map(|(_, c)| c.iter().map(|p| p.0))
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let y_max = curves
            .iter()
            .flat_map(|(_, c)| c.iter().map(|p| p.1))
            .fold(0.0f64, f64::max)
            .max(0.05)
            * 1.1;
        let px = |x: f64| L + (W - L - R) * x / x_max;
        let py = |y: f64| H - B - (H - T - B) * y / y_max;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<line x1=\"{L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            H - B,
            W - R,
            H - B
        );
        let _ = writeln!(s, "<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{}\" stroke=\"black\"/>", H - B);
        for k in 0..=4 {
            let y = y_max * k as f64 / 4.0;
            let x = x_max * k as f64 / 4.0;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{y:.3}</text>",
                L - 6.0,
                py(y) + 4.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x:.0}</text>",
                px(x),
                H - B + 16.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">iteration</text>",
            px(x_max / 2.0),
            H - 10.0
        );
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">median val mAP</text>",
            py(y_max / 2.0),
            py(y_max / 2.0)
        );
        for (i, (label, c)) in curves.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = c.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x as f64), py(y))).collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
            let ly = T + 16.0 * i as f64 + 8.0;
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                W - R + 12.0,
                W - R + 32.0
            );
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", W - R + 38.0, ly + 4.0, xml_escape(label));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Run comparison\n\n");
        let _ = writeln!(s, "Dataset hash: `{}`\n", self.dataset_hash);
        let _ = writeln!(s, "Runs: {} included, {} skipped.\n", self.runs.len(), self.skipped.len());
        s.push_str("## Final val metrics\n\n");
        s.push_str("| rank | label | runs | seeds | mean mAP | median mAP | median AP50 | median RPN recall | median PMCR |\n");
        s.push_str("|---:|---|---:|---|---:|---:|---:|---:|---:|\n");
        for (i, r) in self.rows.iter().enumerate() {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let pm = r
                .pmcr_median
                .map(|v| format!("{v:.4} @ {}", r.pmcr_threshold))
                .unwrap_or_else(|| "n/a".into());
            let inc = if r.incomplete > 0 {
                format!(" ({} incomplete)", r.incomplete)
            } else {
                String::new()
            };
            let _ = writeln!(
                s,
                "| {} | {}{inc} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {pm} |",
                i + 1,
                r.label,
                r.runs,
                seeds.join(", "),
                r.map_mean,
                r.map_median,
                r.ap50_median,
                r.rpn_recall_median
            );
        }
        s.push_str("\n## Trend checks\n\n| check | rule | status | detail |\n|---|---|---|---|\n");
        for t in &self.trends {
            let _ = writeln!(s, "| {} | {} | {} | {} |", t.name, t.rule, t.status.as_str(), t.detail);
        }
        let _ = writeln!(
            s,
            "\n## Curves\n\nPer-point values are in `{CURVES_CSV}`; median curves are plotted in `{CURVES_SVG}`.\n"
        );
        if !self.skipped.is_empty() {
            s.push_str("## Skipped\n\n");
            for (p, why) in &self.skipped {
                let _ = writeln!(s, "- `{}`: {why}", p.display());
            }
        }
        s
    }

    /// File name and contents of every report artifact.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut trends = serde_json::to_vec_pretty(&self.trends).expect("trends serialize");
        trends.push(b'\n');
        vec![
            (REPORT_MD.into(), self.markdown().into_bytes()),
            (SUMMARY_CSV.into(), self.summary_csv().into_bytes()),
            (CURVES_CSV.into(), self.curves_csv().into_bytes()),
            (CURVES_SVG.into(), self.curves_svg().into_bytes()),
            (TRENDS_JSON.into(), trends),
        ]
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
