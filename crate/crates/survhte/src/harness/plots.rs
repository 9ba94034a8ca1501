//! Self-contained SVG reports: overlap histograms, per-subclass metric
//! boxplots, and percent-increase-in-PEHE boxplots.
//!
//! Every figure embeds its summary statistics as JSON inside a `<desc>`
//! element so the numbers behind the geometry stay machine-checkable.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{Error, Result};
use crate::harness::config::BenchmarkConfig;
use crate::harness::manifest::{manifest_path, read_json, write_bytes_atomic, RunManifest};
use crate::metrics::MetricsTable;
use crate::numeric::quantile;
use crate::simgen::simulate;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str, desc_json: &serde_json::Value) -> Canvas {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
        ));
        body.push_str(&format!("<desc>{}</desc>\n", esc(&desc_json.to_string())));
        body.push_str(&format!(
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" \
             font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            esc(title)
        ));
        Canvas { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        self.body.push_str(&format!(
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n"
        ));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
             fill=\"{fill}\" stroke=\"{stroke}\"/>\n"
        ));
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        self.body.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"{fill}\"/>\n"
        ));
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"{size}\" \
             text-anchor=\"{anchor}\">{}</text>\n",
            esc(content)
        ));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Maps a data range onto the plot area's y pixels (inverted axis).
struct YScale {
    lo: f64,
    hi: f64,
}

impl YScale {
    fn new(lo: f64, hi: f64) -> YScale {
        if (hi - lo).abs() < 1e-12 {
            let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 1.0 };
            YScale { lo: lo - pad, hi: hi + pad }
        } else {
            let pad = (hi - lo) * 0.08;
            YScale { lo: lo - pad, hi: hi + pad }
        }
    }

    fn y(&self, v: f64) -> f64 {
        let frac = (v - self.lo) / (self.hi - self.lo);
        HEIGHT - MARGIN_BOTTOM - frac * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn draw_y_axis(canvas: &mut Canvas, scale: &YScale) {
    let x = MARGIN_LEFT;
    canvas.line(x, MARGIN_TOP, x, HEIGHT - MARGIN_BOTTOM, "black", 1.0);
    for i in 0..=5 {
        let v = scale.lo + (scale.hi - scale.lo) * i as f64 / 5.0;
        let y = scale.y(v);
        canvas.line(x - 4.0, y, x, y, "black", 1.0);
        canvas.text(x - 8.0, y + 4.0, 11.0, "end", &format!("{v:.3}"));
    }
}

/// Five-number box statistics with 1.5 IQR whiskers.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub n: usize,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::invalid("boxplot needs at least one value"));
    }
    let q1 = quantile(values, 0.25)?;
    let median = quantile(values, 0.5)?;
    let q3 = quantile(values, 0.75)?;
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_lo =
        values.iter().copied().filter(|v| *v >= lo_fence).fold(f64::INFINITY, f64::min);
    let whisker_hi =
        values.iter().copied().filter(|v| *v <= hi_fence).fold(f64::NEG_INFINITY, f64::max);
    Ok(BoxStats {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        q1,
        median,
        q3,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        whisker_lo,
        whisker_hi,
        n: values.len(),
    })
}

/// Grouped boxplot; one box per (label, values) pair.
pub fn svg_boxplot(title: &str, groups: &[(String, Vec<f64>)]) -> Result<String> {
    if groups.is_empty() {
        return Err(Error::invalid("boxplot needs at least one group"));
    }
    let stats: Vec<BoxStats> =
        groups.iter().map(|(_, v)| box_stats(v)).collect::<Result<_>>()?;
    let lo = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let hi = stats.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    let scale = YScale::new(lo, hi);

    let desc = json!({
        "kind": "boxplot",
        "groups": groups.iter().zip(&stats)
            .map(|((name, _), s)| json!({"name": name, "stats": s}))
            .collect::<Vec<_>>(),
    });
    let mut canvas = Canvas::new(title, &desc);
    draw_y_axis(&mut canvas, &scale);

    let span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let slot = span / groups.len() as f64;
    let box_w = (slot * 0.5).min(70.0);
    for (g, ((name, values), s)) in groups.iter().zip(&stats).enumerate() {
        let cx = MARGIN_LEFT + slot * (g as f64 + 0.5);
        canvas.line(cx, scale.y(s.whisker_lo), cx, scale.y(s.q1), "black", 1.0);
        canvas.line(cx, scale.y(s.q3), cx, scale.y(s.whisker_hi), "black", 1.0);
        canvas.line(cx - box_w / 4.0, scale.y(s.whisker_lo), cx + box_w / 4.0, scale.y(s.whisker_lo), "black", 1.0);
        canvas.line(cx - box_w / 4.0, scale.y(s.whisker_hi), cx + box_w / 4.0, scale.y(s.whisker_hi), "black", 1.0);
        // A constant series collapses: q1 == q3 draws a zero-height box.
        canvas.rect(
            cx - box_w / 2.0,
            scale.y(s.q3),
            box_w,
            (scale.y(s.q1) - scale.y(s.q3)).max(0.0),
            "#9ecae1",
            "black",
        );
        canvas.line(cx - box_w / 2.0, scale.y(s.median), cx + box_w / 2.0, scale.y(s.median), "black", 2.0);
        for &v in values {
            if v < s.whisker_lo || v > s.whisker_hi {
                canvas.circle(cx, scale.y(v), 2.5, "black");
            }
        }
        canvas.text(cx, HEIGHT - MARGIN_BOTTOM + 18.0, 11.0, "middle", name);
    }
    Ok(canvas.finish())
}

/// Two-arm histogram over [0, 1] for propensity overlap checks.
pub fn svg_overlap_histogram(title: &str, arm0: &[f64], arm1: &[f64]) -> Result<String> {
    if arm0.is_empty() && arm1.is_empty() {
        return Err(Error::invalid("histogram needs data"));
    }
    const BINS: usize = 30;
    let bin_of = |v: f64| -> usize { ((v * BINS as f64) as usize).min(BINS - 1) };
    let mut c0 = vec![0usize; BINS];
    let mut c1 = vec![0usize; BINS];
    for &v in arm0 {
        c0[bin_of(v.clamp(0.0, 1.0))] += 1;
    }
    for &v in arm1 {
        c1[bin_of(v.clamp(0.0, 1.0))] += 1;
    }
    let peak = c0.iter().chain(&c1).copied().max().unwrap_or(1).max(1) as f64;

    let desc = json!({
        "kind": "overlap_histogram",
        "bins": BINS,
        "arm0": c0,
        "arm1": c1,
        "n0": arm0.len(),
        "n1": arm1.len(),
    });
    let mut canvas = Canvas::new(title, &desc);
    let scale = YScale::new(0.0, peak);
    draw_y_axis(&mut canvas, &scale);

    let span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let bw = span / BINS as f64;
    for b in 0..BINS {
        let x = MARGIN_LEFT + b as f64 * bw;
        let y0 = scale.y(c0[b] as f64);
        let y1 = scale.y(c1[b] as f64);
        let base = scale.y(0.0);
        canvas.rect(x, y0, bw * 0.45, base - y0, "#3182bd", "none");
        canvas.rect(x + bw * 0.45, y1, bw * 0.45, base - y1, "#de2d26", "none");
    }
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let x = MARGIN_LEFT + span * v;
        canvas.text(x, HEIGHT - MARGIN_BOTTOM + 16.0, 11.0, "middle", &format!("{v:.1}"));
    }
    canvas.text(MARGIN_LEFT + 20.0, MARGIN_TOP, 12.0, "start", "control");
    canvas.text(MARGIN_LEFT + 110.0, MARGIN_TOP, 12.0, "start", "treated");
    canvas.circle(MARGIN_LEFT + 10.0, MARGIN_TOP - 4.0, 5.0, "#3182bd");
    canvas.circle(MARGIN_LEFT + 100.0, MARGIN_TOP - 4.0, 5.0, "#de2d26");
    Ok(canvas.finish())
}

/// Renders every figure for a completed benchmark results directory.
pub fn emit_plots(out: &Path) -> Result<Vec<PathBuf>> {
    let manifest: RunManifest = read_json(&manifest_path(out))?;
    let plots_dir = out.join("plots");
    std::fs::create_dir_all(&plots_dir)
        .map_err(|e| Error::config(format!("mkdir {}: {e}", plots_dir.display())))?;
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        let path = plots_dir.join(name);
        write_bytes_atomic(&path, svg.as_bytes())?;
        written.push(path);
        Ok(())
    };

    for scenario in &manifest.scenarios {
        let label = &scenario.label;
        let tables: Vec<MetricsTable> =
            read_json(&out.join("metrics").join(format!("{label}.json")))?;

        // Shards keep scores but not arm labels, so regenerate the first
        // replication to split true propensities by assigned arm.
        let effective = BenchmarkConfig::from_toml_str(&manifest.effective_config)?;
        let spec = effective
            .scenarios
            .iter()
            .find(|s| s.label() == *label)
            .ok_or_else(|| Error::config(format!("manifest lacks scenario {label}")))?;
        let seed = *scenario
            .rep_seeds
            .first()
            .ok_or_else(|| Error::config(format!("scenario {label} has no replications")))?;
        let sim = simulate(&spec.to_scenario_config(seed))?;
        let (mut e0, mut e1) = (Vec::new(), Vec::new());
        for r in &sim.truth {
            if r.z == 1 {
                e1.push(r.e_true);
            } else {
                e0.push(r.e_true);
            }
        }
        emit(
            format!("overlap_{label}.svg"),
            svg_overlap_histogram(&format!("True propensity overlap: {label}"), &e0, &e1)?,
        )?;

        for (metric, pick) in [
            ("relbias", 0usize),
            ("rmse", 1),
            ("regret", 2),
            ("coverage", 3),
        ] {
            let groups: Vec<(String, Vec<f64>)> = tables
                .iter()
                .filter_map(|t| {
                    let values: Vec<f64> = match pick {
                        0 => t.relbias.iter().filter_map(|v| *v).collect(),
                        1 => t.rmse.iter().copied().filter(|v| v.is_finite()).collect(),
                        2 => t.regret.iter().copied().filter(|v| v.is_finite()).collect(),
                        _ => t
                            .coverage
                            .as_ref()
                            .map(|c| c.iter().copied().filter(|v| v.is_finite()).collect())
                            .unwrap_or_default(),
                    };
                    (!values.is_empty()).then(|| (t.method.clone(), values))
                })
                .collect();
            if !groups.is_empty() {
                emit(
                    format!("{metric}_{label}.svg"),
                    svg_boxplot(&format!("{metric} by subclass: {label}"), &groups)?,
                )?;
            }
        }

        let pct_groups: Vec<(String, Vec<f64>)> = tables
            .iter()
            .filter_map(|t| {
                let values: Vec<f64> =
                    t.pct_increase.iter().copied().filter(|v| v.is_finite()).collect();
                (!values.is_empty()).then(|| (t.method.clone(), values))
            })
            .collect();
        if !pct_groups.is_empty() {
            emit(
                format!("pct_increase_{label}.svg"),
                svg_boxplot(&format!("Percent increase in PEHE: {label}"), &pct_groups)?,
            )?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc_json(svg: &str) -> serde_json::Value {
        let start = svg.find("<desc>").unwrap() + 6;
        let end = svg.find("</desc>").unwrap();
        let raw = svg[start..end].replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
        serde_json::from_str(&raw).unwrap()
    }

    #[test]
    fn constant_series_collapses_to_a_line() {
        let svg = svg_boxplot("flat", &[("m".to_string(), vec![2.5; 12])]).unwrap();
        let desc = desc_json(&svg);
        let stats = &desc["groups"][0]["stats"];
        assert_eq!(stats["q1"], stats["q3"]);
        assert_eq!(stats["median"], 2.5);
        assert_eq!(stats["whisker_lo"], stats["whisker_hi"]);
    }

    #[test]
    fn histogram_bin_counts_sum_to_arm_sizes() {
        let e0: Vec<f64> = (0..137).map(|i| (i as f64 + 0.5) / 137.0).collect();
        let e1: Vec<f64> = (0..89).map(|i| 1.0 - (i as f64 + 0.5) / 120.0).collect();
        let svg = svg_overlap_histogram("overlap", &e0, &e1).unwrap();
        let desc = desc_json(&svg);
        let sum0: u64 = desc["arm0"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        let sum1: u64 = desc["arm1"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(sum0, 137);
        assert_eq!(sum1, 89);
        assert_eq!(desc["bins"], 30);
    }

    #[test]
    fn box_statistics_match_an_independent_quantile_computation() {
        let values: Vec<f64> = (0..101).map(|i| (i as f64 * 7919.0) % 101.0).collect();
        let svg = svg_boxplot("spread", &[("g".to_string(), values.clone())]).unwrap();
        let desc = desc_json(&svg);
        let stats = &desc["groups"][0]["stats"];
        for (key, p) in [("q1", 0.25), ("median", 0.5), ("q3", 0.75)] {
            let expect = quantile(&values, p).unwrap();
            let got = stats[key].as_f64().unwrap();
            assert!((got - expect).abs() < 1e-12, "{key}: {got} vs {expect}");
        }
        let q1 = stats["q1"].as_f64().unwrap();
        let q3 = stats["q3"].as_f64().unwrap();
        let iqr = q3 - q1;
        let lo = values.iter().copied().filter(|v| *v >= q1 - 1.5 * iqr).fold(f64::INFINITY, f64::min);
        assert_eq!(stats["whisker_lo"].as_f64().unwrap(), lo);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(svg_boxplot("x", &[]).is_err());
        assert!(box_stats(&[]).is_err());
        assert!(svg_overlap_histogram("x", &[], &[]).is_err());
    }
}
