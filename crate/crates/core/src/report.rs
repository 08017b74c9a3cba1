//! Deterministic text renderings of results: an SVG bar chart of g-mean per
//! ROI and model, an SVG heat table of abnormal-voxel percentages, and a
//! markdown summary.

use std::fmt::Write;

use crate::anomaly::ModelKind;
use crate::evaluation::{BootstrapSummary, RoiScoreTable, WHOLE_BRAIN};
use crate::pipeline::{Detectability, RoiLayout};
use crate::volume::Cohort;

/// Published whole-brain g-mean (percent, mean and std over ten bootstrap
/// samples) on the restricted clinical cohort. Context only.
pub const REFERENCE_WHOLE_BRAIN: [(ModelKind, f64, f64); 2] =
    [(ModelKind::Sae, 66.9, 5.8), (ModelKind::Ae, 65.3, 7.5)];

pub const REFERENCE_NOTE: &str =
    "Reference (published clinical cohort, access-restricted, not reproducible here): whole-brain g-mean SAE 66.9 ± 5.8%, AE 65.3 ± 7.5%";

fn color(model: ModelKind) -> &'static str {
    match model {
        ModelKind::Ae => "#4c72b0",
        ModelKind::Sae => "#dd8452",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bars of mean g-mean per ROI with ±1 std whiskers. Dashed lines
/// separate the whole brain, macro regions and subcortical structures.
pub fn gmean_bar_chart(
    summary: &BootstrapSummary,
    layout: &RoiLayout,
    models: &[ModelKind],
) -> String {
    let bar = 14.0;
    let group = bar * models.len() as f64 + 12.0;
    let (left, top, plot_h) = (60.0, 40.0, 260.0);
    let plot_w = group * layout.rois.len() as f64;
    let (width, height) = (left + plot_w + 20.0, top + plot_h + 150.0);
    let y = |g: f64| top + plot_h * (1.0 - g.clamp(0.0, 1.0));
    let single = summary.rows.iter().any(|r| r.single_sample);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="14">g-mean per region (mean ± std over bootstrap samples)</text>"#
    );
    for i in 0..=5 {
        let g = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#dddddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{g:.1}</text>"##,
            y(g),
            left + plot_w,
            left - 6.0,
            y(g) + 4.0
        );
    }
    for (i, roi) in layout.rois.iter().enumerate() {
        let x0 = left + group * i as f64 + 6.0;
        for (j, &m) in models.iter().enumerate() {
            let Some(r) = summary.row(m, roi) else {
                continue;
            };
            let x = x0 + bar * j as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                y(r.mean),
                y(0.0) - y(r.mean),
                color(m)
            );
            if !r.single_sample {
                let cx = x + bar / 2.0;
                let (lo, hi) = (y(r.mean - r.std), y(r.mean + r.std));
                let _ = writeln!(
                    s,
                    r#"<path d="M{cx:.1} {lo:.1}V{hi:.1}M{:.1} {lo:.1}H{:.1}M{:.1} {hi:.1}H{:.1}" stroke="black" fill="none"/>"#,
                    cx - 3.0,
                    cx + 3.0,
                    cx - 3.0,
                    cx + 3.0
                );
            }
        }
        let lx = x0 + bar * models.len() as f64 / 2.0;
        let ly = y(0.0) + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-45 {lx:.1} {ly:.1})">{}</text>"#,
            escape(roi)
        );
    }
    let mut seps: Vec<usize> = layout.separators.clone();
    if layout.rois.first().map(String::as_str) == Some(WHOLE_BRAIN) && layout.rois.len() > 1 {
        seps.insert(0, 1);
    }
    for k in seps {
        let x = left + group * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            y(0.0)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="black"/>"#,
        y(0.0),
        left + plot_w
    );
    let ly = height - 40.0;
    for (j, &m) in models.iter().enumerate() {
        let x = left + 90.0 * j as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            color(m),
            x + 14.0,
            m.label()
        );
    }
    if single {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}">single bootstrap sample: no error bars</text>"#,
            left + 90.0 * models.len() as f64
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{:.1}" font-size="10">{}</text>"#,
        height - 18.0,
        escape(REFERENCE_NOTE)
    );
    s.push_str("</svg>\n");
    s
}

/// Subjects by ROI, shaded white to red by abnormal-voxel percentage
/// relative to the table maximum.
pub fn heat_table(table: &RoiScoreTable, title: &str) -> String {
    let (cell_w, cell_h) = (46.0, 16.0);
    let (left, top) = (150.0, 110.0);
    let width = left + cell_w * table.rois.len() as f64 + 20.0;
    let height = top + cell_h * table.rows.len() as f64 + 20.0;
    let max = table
        .rows
        .iter()
        .flat_map(|r| r.percentages.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="10" y="18" font-size="13">{}</text>"#,
        escape(title)
    );
    for (j, roi) in table.rois.iter().enumerate() {
        let x = left + cell_w * (j as f64 + 0.5);
        let yy = top - 6.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{yy:.1}" transform="rotate(-45 {x:.1} {yy:.1})">{}</text>"#,
            escape(roi)
        );
    }
    for (i, row) in table.rows.iter().enumerate() {
        let yy = top + cell_h * i as f64;
        let cohort = match row.cohort {
            Cohort::Control => "C",
            Cohort::Patient => "P",
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{} ({cohort})</text>"#,
            left - 6.0,
            yy + 12.0,
            escape(&row.subject_id)
        );
        for (j, &p) in row.percentages.iter().enumerate() {
            let v = (p / max).clamp(0.0, 1.0);
            let gb = (255.0 * (1.0 - v)).round() as u8;
            let x = left + cell_w * j as f64;
            let _ = writeln!(
                s,
                r##"<rect x="{x:.1}" y="{yy:.1}" width="{cell_w}" height="{cell_h}" fill="#ff{gb:02x}{gb:02x}" stroke="#eeeeee"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{p:.1}</text>"##,
                x + cell_w / 2.0,
                yy + 12.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn markdown(
    summary: &BootstrapSummary,
    models: &[ModelKind],
    detect: &[Detectability],
) -> String {
    let mut s = String::from("# Anomaly detection results\n\n## Whole-brain g-mean\n\n");
    s.push_str(
        "| model | mean ± std (%) | samples | best sample (g-mean %) |\n|---|---|---|---|\n",
    );
    for &m in models {
        if let Some(r) = summary.row(m, WHOLE_BRAIN) {
            let flag = if r.single_sample {
                " (single sample)"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "| {} | {:.1} ± {:.1}{flag} | {} | {} ({:.1}) |",
                m.label(),
                100.0 * r.mean,
                100.0 * r.std,
                r.samples,
                r.best_sample,
                100.0 * r.best_gmean
            );
        }
    }
    s.push_str("\n## Reference values\n\n");
    s.push_str(
        "Published whole-brain g-mean on a restricted clinical cohort. These values are context only and are not \
         expected to be reproduced by the synthetic phantom results above.\n\n",
    );
    s.push_str("| model | mean ± std (%) |\n|---|---|\n");
    for (m, mean, std) in REFERENCE_WHOLE_BRAIN {
        let _ = writeln!(s, "| {} | {mean:.1} ± {std:.1} |", m.label());
    }
    s.push_str("\n## g-mean per region\n\n| region |");
    for &m in models {
        let _ = write!(s, " {} |", m.label());
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(models.len()));
    s.push('\n');
    let rois: Vec<&str> = summary
        .rows
        .iter()
        .filter(|r| Some(r.model) == models.first().copied())
        .map(|r| r.roi.as_str())
        .collect();
    for roi in rois {
        let _ = write!(s, "| {roi} |");
        for &m in models {
            match summary.row(m, roi) {
                Some(r) => {
                    let _ = write!(s, " {:.1} ± {:.1} |", 100.0 * r.mean, 100.0 * r.std);
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    if !detect.is_empty() {
        s.push_str("\n## Error inside vs outside true anomalies\n\n");
        s.push_str(
            "| sample | model | inside mean | outside mean | ratio |\n|---|---|---|---|---|\n",
        );
        for d in detect {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4e} | {:.4e} | {:.2} |",
                d.sample_index,
                d.model.label(),
                d.inside_mean,
                d.outside_mean,
                d.ratio
            );
        }
    }
    s
}
