//! CSV tables and SVG charts of search logs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiments::CorrelationReport;
use super::proxy::StageKind;
use super::search::{moving_average, read_records, reward_trend, sharing_trend, SearchRecord, TrendSummary};
use crate::error::Result;
use crate::search_space::decode_head;

pub const TREND_WINDOW: usize = 50;

pub fn records_csv(records: &[SearchRecord]) -> String {
    let mut out = String::from("seq,stage,batch,reward,cls,reg,ctr,ap,fpn_macs,head_macs,params,share_from,tokens\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        let stage = match r.stage {
            StageKind::Fpn => "FPN",
            StageKind::Head => "HEAD",
        };
        let share = match r.stage {
            StageKind::Head => decode_head(&r.tokens).map(|h| h.share_from.to_string()).unwrap_or_default(),
            StageKind::Fpn => String::new(),
        };
        let tokens: Vec<String> = r.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{stage},{},{},{},{},{},{},{},{},{},{share},{}",
            r.seq,
            r.batch,
            opt(r.reward),
            opt(r.terms.map(|t| t.cls)),
            opt(r.terms.map(|t| t.reg)),
            opt(r.terms.map(|t| t.ctr)),
            opt(r.ap),
            r.cost.fpn_macs,
            r.cost.head_macs,
            r.cost.params,
            tokens.join(" ")
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesStyle {
    Dots,
    Line,
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: SeriesStyle,
    pub color: &'static str,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let all = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (x0, x1) = nice_range(x0, x1);
        let (y0, y1) = nice_range(y0, y1);
        let px = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
        let py = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(&self.title));
        let _ = writeln!(
            s,
            r##"<rect x="{PAD_L}" y="{PAD_T}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            W - PAD_L - PAD_R,
            H - PAD_T - PAD_B
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(xv),
                H - PAD_B + 16.0,
                tick(xv)
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, PAD_L - 6.0, py(yv) + 4.0, tick(yv));
            let _ = writeln!(
                s,
                r##"<line x1="{PAD_L}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
                py(yv),
                W - PAD_R,
                py(yv)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            match series.style {
                SeriesStyle::Dots => {
                    for &(x, y) in &series.points {
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}" fill-opacity="0.5"/>"#,
                            px(x),
                            py(y),
                            series.color
                        );
                    }
                }
                SeriesStyle::Line => {
                    let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                        pts.join(" "),
                        series.color
                    );
                }
            }
            let ly = PAD_T + 16.0 + 16.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                PAD_L + 10.0,
                ly - 9.0,
                series.color,
                PAD_L + 26.0,
                ly,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

pub fn reward_trend_chart(records: &[SearchRecord], window: usize) -> Chart {
    let finite: Vec<(f64, f64)> = records.iter().filter_map(|r| r.reward.map(|v| (r.seq as f64, v))).collect();
    let ys: Vec<f64> = finite.iter().map(|p| p.1).collect();
    let ma: Vec<(f64, f64)> = finite.iter().map(|p| p.0).zip(moving_average(&ys, window)).collect();
    Chart {
        title: "Reward during search".into(),
        x_label: "architecture".into(),
        y_label: "reward".into(),
        series: vec![
            Series {
                name: "reward".into(),
                points: finite,
                style: SeriesStyle::Dots,
                color: "#7a9cc6",
            },
            Series {
                name: format!("moving average ({window})"),
                points: ma,
                style: SeriesStyle::Line,
                color: "#c0392b",
            },
        ],
    }
}

pub fn sharing_chart(fractions: &[f64], window: usize) -> Chart {
    Chart {
        title: "Fully shared heads per period".into(),
        x_label: format!("period ({window} head structures)"),
        y_label: "fraction with shared weights".into(),
        series: vec![Series {
            name: "share index 0".into(),
            points: fractions.iter().enumerate().map(|(i, &f)| ((i + 1) as f64, f)).collect(),
            style: SeriesStyle::Line,
            color: "#27ae60",
        }],
    }
}

pub fn correlation_chart(report: &CorrelationReport) -> Chart {
    Chart {
        title: format!("Proxy reward against holdout AP (rho = {:.3})", report.rho),
        x_label: "proxy reward".into(),
        y_label: "toy AP".into(),
        series: vec![Series {
            name: "architecture".into(),
            points: report.points.iter().map(|p| (p.reward, p.ap)).collect(),
            style: SeriesStyle::Dots,
            color: "#8e44ad",
        }],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub records: usize,
    pub diverged: usize,
    pub trend: Option<TrendSummary>,
    /// Moving average at the first and last full window.
    pub initial_moving_average: Option<f64>,
    pub final_moving_average: Option<f64>,
    pub sharing: Vec<f64>,
}

/// Writes `records.csv`, `reward_trend.svg` and, with head records,
/// `sharing.csv` and `sharing_trend.svg` into `out_dir`.
pub fn write_report(log: &Path, out_dir: &Path) -> Result<ReportSummary> {
    let records = read_records(log)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("records.csv"), records_csv(&records))?;
    std::fs::write(out_dir.join("reward_trend.svg"), reward_trend_chart(&records, TREND_WINDOW).to_svg())?;
    let sharing = sharing_trend(&records, TREND_WINDOW)?;
    if records.iter().any(|r| r.stage == StageKind::Head) {
        let mut csv = String::from("period,fraction_shared\n");
        for (i, f) in sharing.iter().enumerate() {
            let _ = writeln!(csv, "{},{f}", i + 1);
        }
        std::fs::write(out_dir.join("sharing.csv"), csv)?;
        std::fs::write(out_dir.join("sharing_trend.svg"), sharing_chart(&sharing, TREND_WINDOW).to_svg())?;
    }
    let ys: Vec<f64> = records.iter().filter_map(|r| r.reward).collect();
    let ma = moving_average(&ys, TREND_WINDOW);
    let full = ys.len() >= TREND_WINDOW;
    Ok(ReportSummary {
        records: records.len(),
        diverged: records.iter().filter(|r| r.reward.is_none()).count(),
        trend: reward_trend(&records, TREND_WINDOW),
        initial_moving_average: full.then(|| ma[TREND_WINDOW - 1]),
        final_moving_average: full.then(|| ma[ma.len() - 1]),
        sharing,
    })
}

pub fn write_correlation(report: &CorrelationReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("seq,reward,ap\n");
    for p in &report.points {
        let _ = writeln!(csv, "{},{},{}", p.seq, p.reward, p.ap);
    }
    std::fs::write(out_dir.join("correlation.csv"), csv)?;
    std::fs::write(out_dir.join("correlation.svg"), correlation_chart(report).to_svg())?;
    std::fs::write(out_dir.join("correlation.json"), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}
