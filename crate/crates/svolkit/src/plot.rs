//! Minimal SVG emission: the volatility overlay (returns panel over the
//! estimated volatility panel) and replication boxplots with a dashed line
//! at the truth. Plain string output, checked in tests by structure rather
//! than pixels.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

fn finite_range(values: &[f64]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::InvalidParam(format!("non-finite plot value {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if values.is_empty() {
        return Err(Error::DegenerateSample("empty plot series".into()));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok((lo, hi))
}

struct Panel {
    y0: f64,
    lo: f64,
    hi: f64,
    n: usize,
}

impl Panel {
    fn x(&self, t: usize) -> f64 {
        let span = (self.n.max(2) - 1) as f64;
        MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / span
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + (PANEL_H - 2.0 * MARGIN) * (self.hi - v) / (self.hi - self.lo) + MARGIN
    }

    fn polyline(&self, values: &[f64], stroke: &str, dashed: bool) -> String {
        let mut points = String::new();
        for (t, &v) in values.iter().enumerate() {
            let _ = write!(points, "{:.2},{:.2} ", self.x(t), self.y(v));
        }
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        format!(
            "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1\"{dash} points=\"{}\"/>\n",
            points.trim_end()
        )
    }

    fn frame(&self, title: &str) -> String {
        format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\">{title}</text>\n",
            MARGIN,
            self.y0 + MARGIN,
            WIDTH - 2.0 * MARGIN,
            PANEL_H - 2.0 * MARGIN,
            MARGIN,
            self.y0 + MARGIN - 8.0,
        )
    }
}

fn svg_open(height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {WIDTH:.0} {height:.0}\">\n"
    )
}

/// Two stacked panels: the return series on top, one or more estimated
/// volatility paths below. `series` pairs a label with a path; all paths
/// must match the returns in length.
pub fn volatility_overlay(returns: &[f64], series: &[(String, Vec<f64>)]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::DegenerateSample("no volatility series".into()));
    }
    for (label, path) in series {
        if path.len() != returns.len() {
            return Err(Error::LengthMismatch { left: returns.len(), right: path.len() });
        }
        if label.is_empty() {
            return Err(Error::InvalidParam("empty series label".into()));
        }
    }
    let (rlo, rhi) = finite_range(returns)?;
    let all_h: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (hlo, hhi) = finite_range(&all_h)?;

    let colors = ["black", "firebrick", "steelblue", "darkgreen", "darkorange"];
    let mut svg = svg_open(2.0 * PANEL_H);
    let top = Panel { y0: 0.0, lo: rlo, hi: rhi, n: returns.len() };
    svg += &top.frame("Returns");
    svg += &top.polyline(returns, "gray", false);
    let bottom = Panel { y0: PANEL_H, lo: hlo, hi: hhi, n: returns.len() };
    svg += &bottom.frame("Estimated volatility");
    for (i, (label, path)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        svg += &bottom.polyline(path, color, false);
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            WIDTH - MARGIN - 110.0,
            PANEL_H + MARGIN + 16.0 * (i + 1) as f64,
        );
    }
    svg += "</svg>\n";
    Ok(svg)
}

/// One labelled group of estimates for the boxplot.
#[derive(Debug, Clone)]
pub struct BoxGroup {
    pub label: String,
    pub values: Vec<f64>,
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| crate::density::quantile_sorted(sorted, p);
    (q(0.25), q(0.5), q(0.75))
}

/// Side-by-side boxplots (whiskers at min/max, box at the quartiles) with a
/// dashed horizontal line at `truth`.
pub fn boxplot(title: &str, groups: &[BoxGroup], truth: f64) -> Result<String> {
    if groups.is_empty() {
        return Err(Error::DegenerateSample("no boxplot groups".into()));
    }
    let mut all: Vec<f64> = groups.iter().flat_map(|g| g.values.iter().copied()).collect();
    all.push(truth);
    let (lo, hi) = finite_range(&all)?;
    let panel = Panel { y0: 0.0, lo, hi, n: 2 };

    let mut svg = svg_open(PANEL_H);
    svg += &panel.frame(title);
    let inner = WIDTH - 2.0 * MARGIN;
    let slot = inner / groups.len() as f64;
    for (i, g) in groups.iter().enumerate() {
        if g.values.is_empty() {
            return Err(Error::DegenerateSample(format!("empty boxplot group `{}`", g.label)));
        }
        let mut sorted = g.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, q2, q3) = quartiles(&sorted);
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(40.0);
        let y = |v: f64| panel.y(v);
        let _ = write!(
            svg,
            "<line x1=\"{cx:.1}\" y1=\"{:.2}\" x2=\"{cx:.1}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            y(min),
            y(max)
        );
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.2}\" width=\"{:.1}\" height=\"{:.2}\" fill=\"white\" stroke=\"black\"/>\n",
            cx - half,
            y(q3),
            2.0 * half,
            (y(q1) - y(q3)).max(0.5),
        );
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{:.2}\" x2=\"{:.1}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>\n",
            cx - half,
            y(q2),
            cx + half,
            y(q2)
        );
        let _ = write!(
            svg,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            PANEL_H - MARGIN + 18.0,
            g.label
        );
    }
    let ty = panel.y(truth);
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN:.1}\" y1=\"{ty:.2}\" x2=\"{:.1}\" y2=\"{ty:.2}\" stroke=\"firebrick\" stroke-dasharray=\"6 4\"/>\n",
        WIDTH - MARGIN
    );
    svg += "</svg>\n";
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_structure() {
        let returns: Vec<f64> = (0..50).map(|t| (t as f64 * 0.37).sin() * 0.02).collect();
        let vol: Vec<f64> = (0..50).map(|t| 1.0 + 0.1 * (t as f64 * 0.2).cos()).collect();
        let svg = volatility_overlay(
            &returns,
            &[("gaussian".into(), vol.clone()), ("nsvm2".into(), vol)],
        )
        .unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3); // returns + 2 series
        assert_eq!(svg.matches("<rect").count(), 2); // two panel frames
        assert!(svg.contains("Returns"));
        assert!(svg.contains("Estimated volatility"));
        assert!(svg.contains("gaussian"));
        assert!(svg.contains("nsvm2"));
    }

    #[test]
    fn overlay_rejects_mismatch() {
        assert!(volatility_overlay(&[0.1, 0.2], &[("g".into(), vec![1.0])]).is_err());
        assert!(volatility_overlay(&[0.1, 0.2], &[]).is_err());
        assert!(volatility_overlay(&[0.1, f64::NAN], &[("g".into(), vec![1.0, 1.0])]).is_err());
    }

    #[test]
    fn boxplot_structure() {
        let groups = vec![
            BoxGroup { label: "gaussian".into(), values: vec![0.9, 1.0, 1.1, 1.2] },
            BoxGroup { label: "nsvm1".into(), values: vec![0.95, 1.0, 1.05] },
            BoxGroup { label: "nsvm2".into(), values: vec![0.98, 1.0, 1.02] },
        ];
        let svg = boxplot("delta (mean)", &groups, 1.0).unwrap();
        assert!(svg.starts_with("<svg"));
        // one frame + three boxes
        assert_eq!(svg.matches("<rect").count(), 4);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        assert!(svg.contains("delta (mean)"));
        for g in &groups {
            assert!(svg.contains(&g.label));
        }
    }

    #[test]
    fn boxplot_rejects_empty() {
        assert!(boxplot("x", &[], 0.0).is_err());
        assert!(boxplot("x", &[BoxGroup { label: "a".into(), values: vec![] }], 0.0).is_err());
    }

    #[test]
    fn boxplot_constant_values_ok() {
        let groups = vec![BoxGroup { label: "m".into(), values: vec![2.0; 5] }];
        let svg = boxplot("const", &groups, 2.0).unwrap();
        assert!(svg.contains("</svg>"));
    }
}
