//! Standalone SVG renderings: before/after change heatmaps and a policy
//! comparison bar chart. Output is a pure function of the inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::report::Report;
use crate::schema::ChangeMask;

const CELL: f64 = 14.0;
const GAP: f64 = 40.0;
const MARGIN: f64 = 20.0;
const LABEL_BAND: f64 = 90.0;
const FOOTER: f64 = 30.0;
const CHANGED_FILL: &str = "#d62728";
const UNCHANGED_FILL: &str = "#f2f2f2";

const BAR_AREA: f64 = 200.0;
const BAR_WIDTH: f64 = 24.0;
const GROUP_GAP: f64 = 36.0;
const REDUCTION_FILL: &str = "#1f77b4";
const VALIDITY_FILL: &str = "#2ca02c";

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn write_file(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn grid(out: &mut String, id: &str, title: &str, mask: &ChangeMask, x0: f64, names: &[String]) {
    let _ = writeln!(out, r#"<g id="{id}">"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" font-weight="bold">{}</text>"#,
        x0,
        MARGIN + 12.0,
        escape(title)
    );
    for (j, name) in names.iter().enumerate() {
        let x = x0 + (j as f64 + 0.5) * CELL;
        let y = MARGIN + LABEL_BAND - 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="10" transform="rotate(-60 {x:.1} {y:.1})">{}</text>"#,
            escape(name)
        );
    }
    for (i, row) in mask.mask().iter().enumerate() {
        for (j, &changed) in row.iter().enumerate() {
            let (class, fill) = if changed {
                ("changed", CHANGED_FILL)
            } else {
                ("unchanged", UNCHANGED_FILL)
            };
            let _ = writeln!(
                out,
                r##"<rect class="{class}" x="{:.1}" y="{:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{fill}" stroke="#ffffff"/>"##,
                x0 + j as f64 * CELL,
                MARGIN + LABEL_BAND + i as f64 * CELL,
            );
        }
    }
    out.push_str("</g>\n");
}

/// Two aligned grids (before, after) with changed cells filled.
pub fn heatmap_svg(
    before: &ChangeMask,
    after: &ChangeMask,
    feature_names: &[String],
    reduction_pct: f64,
) -> Result<String> {
    if before.nrows() != after.nrows() || before.ncols() != after.ncols() {
        return Err(Error::Shape(format!(
            "heatmap masks differ: {}x{} vs {}x{}",
            before.nrows(),
            before.ncols(),
            after.nrows(),
            after.ncols()
        )));
    }
    let p = feature_names.len();
    if before.nrows() > 0 && before.ncols() != p {
        return Err(Error::Shape(format!(
            "mask has {} columns for {p} feature names",
            before.ncols()
        )));
    }
    let grid_w = p as f64 * CELL;
    let width = 2.0 * MARGIN + 2.0 * grid_w.max(120.0) + GAP;
    let height = MARGIN + LABEL_BAND + before.nrows() as f64 * CELL + FOOTER + MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    grid(&mut out, "before", "before", before, MARGIN, feature_names);
    grid(
        &mut out,
        "after",
        "after",
        after,
        MARGIN + grid_w.max(120.0) + GAP,
        feature_names,
    );
    let _ = writeln!(
        out,
        r#"<text id="footer" x="{MARGIN:.1}" y="{:.1}" font-size="12">changed cells: {} before, {} after; reduction {reduction_pct:.2}%</text>"#,
        height - MARGIN,
        before.total(),
        after.total(),
    );
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_heatmap_svg(
    before: &ChangeMask,
    after: &ChangeMask,
    feature_names: &[String],
    reduction_pct: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_file(path.as_ref(), &heatmap_svg(before, after, feature_names, reduction_pct)?)
}

/// Grouped bars per report: reduction % and validity after refinement (as
/// %), on one linear 0–100 axis, in input order.
pub fn comparison_svg(reports: &[Report]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Param("no reports to compare".into()));
    }
    let features = &reports[0].features;
    if let Some(r) = reports.iter().find(|r| &r.features != features) {
        return Err(Error::IncompatibleReports(format!(
            "feature sets differ ({} vs {} features)",
            features.len(),
            r.features.len()
        )));
    }
    let group_w = 2.0 * BAR_WIDTH + GROUP_GAP;
    let left = MARGIN + 40.0;
    let top = MARGIN + 30.0;
    let width = left + reports.len() as f64 * group_w + MARGIN;
    let height = top + BAR_AREA + 110.0;
    let baseline = top + BAR_AREA;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r##"<text x="{left:.1}" y="{:.1}" font-size="12"><tspan fill="{REDUCTION_FILL}">■ reduction %</tspan> <tspan fill="{VALIDITY_FILL}">■ validity after %</tspan></text>"##,
        MARGIN + 10.0
    );
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = baseline - tick / 100.0 * BAR_AREA;
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" y1="{y:.3}" x2="{:.1}" y2="{y:.3}" stroke="#dddddd"/>"##,
            width - MARGIN
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.3}" font-size="10" text-anchor="end">{tick:.0}</text>"#,
            left - 4.0,
            y + 3.0
        );
    }
    for (k, report) in reports.iter().enumerate() {
        let x = left + GROUP_GAP / 2.0 + k as f64 * group_w;
        let label = report.policy.label();
        let _ = writeln!(out, r#"<g class="policy" data-label="{}">"#, escape(&label));
        let bars = [
            ("reduction", REDUCTION_FILL, report.reduction_pct, x),
            ("validity", VALIDITY_FILL, report.validity_after * 100.0, x + BAR_WIDTH),
        ];
        for (class, fill, value, bx) in bars {
            let h = value.clamp(0.0, 100.0) / 100.0 * BAR_AREA;
            let _ = writeln!(
                out,
                r#"<rect class="{class}" data-value="{value}" x="{bx:.1}" y="{:.6}" width="{BAR_WIDTH:.1}" height="{h:.6}" fill="{fill}"/>"#,
                baseline - h
            );
        }
        let lx = x + BAR_WIDTH;
        let ly = baseline + 14.0;
        let _ = writeln!(
            out,
            r#"<text x="{lx:.1}" y="{ly:.1}" font-size="10" text-anchor="end" transform="rotate(-35 {lx:.1} {ly:.1})">{}</text>"#,
            escape(&label)
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn compare_policies(reports: &[Report], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &comparison_svg(reports)?)
}
