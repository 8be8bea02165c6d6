//! Self-rendered SVG figures: learning curves with a ±1 std band across seeds,
//! and per-layer similarity-delta bars.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Evaluation return against training episode.
    Eval,
    /// Training-episode return against training episode.
    Train,
    /// Per-layer mean similarity delta.
    Similarity,
}

impl FigureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FigureKind::Eval => "eval",
            FigureKind::Train => "train",
            FigureKind::Similarity => "similarity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FigureKind::Eval, FigureKind::Train, FigureKind::Similarity]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 760.0;
const H: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 230.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let err = |e| CliError::Csv("<summary>".into(), e);
        let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Schema("summary".into(), name.into()))
    }
}

/// One plotted line: mean and std across seeds at each episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64, f64, usize)>,
}

/// Aggregates a summary into per-variant curves. A seed that stopped early
/// (solved) holds its last value for the rest of its variant's episodes.
pub fn curves(text: &str, column: &str) -> Result<Vec<Curve>> {
    let t = Table::parse(text)?;
    let (cv, cs, ce, cm) = (t.col("variant")?, t.col("seed")?, t.col("episode")?, t.col(column)?);
    let mut order: Vec<String> = Vec::new();
    let mut data: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for row in &t.rows {
        let Ok(v) = row[cm].parse::<f64>() else { continue };
        let Ok(e) = row[ce].parse::<f64>() else { continue };
        if !order.contains(&row[cv]) {
            order.push(row[cv].clone());
        }
        data.entry(row[cv].clone()).or_default().entry(row[cs].clone()).or_default().push((e, v));
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let seeds = &data[&label];
            let mut episodes: Vec<f64> = seeds.values().flatten().map(|p| p.0).collect();
            episodes.sort_by(f64::total_cmp);
            episodes.dedup();
            let points = episodes
                .iter()
                .map(|&e| {
                    let vals: Vec<f64> = seeds
                        .values()
                        .filter_map(|s| s.iter().take_while(|p| p.0 <= e).last().map(|p| p.1))
                        .collect();
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    (e, mean, std, vals.len())
                })
                .collect();
            Curve { label, points }
        })
        .collect())
}

/// Rounded tick step giving roughly five intervals.
fn tick_step(span: f64) -> f64 {
    let raw = (span / 5.0).max(1e-12);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|s| *s >= raw).unwrap()
}

fn fmt_tick(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let digits = (-step.log10().floor()) as usize;
        format!("{v:.digits$}")
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, svg: &mut String, xlabel: &str, ylabel: &str, xticks: bool) {
        let (px0, px1, py0, py1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        writeln!(svg, r##"<rect x="{px0:.2}" y="{py1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##, px1 - px0, py0 - py1).unwrap();
        let ys = tick_step(self.y1 - self.y0);
        let mut v = (self.y0 / ys).ceil() * ys;
        while v <= self.y1 + 1e-9 {
            let y = self.y(v);
            writeln!(svg, r##"<line x1="{px0:.2}" y1="{y:.2}" x2="{px1:.2}" y2="{y:.2}" stroke="#ddd"/>"##).unwrap();
            writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, px0 - 6.0, y + 4.0, fmt_tick(v, ys)).unwrap();
            v += ys;
        }
        if xticks {
            let xs = tick_step(self.x1 - self.x0);
            let mut v = (self.x0 / xs).ceil() * xs;
            while v <= self.x1 + 1e-9 {
                let x = self.x(v);
                writeln!(svg, r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, py0 + 16.0, fmt_tick(v, xs)).unwrap();
                v += xs;
            }
        }
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{xlabel}</text>"#, (px0 + px1) / 2.0, H - 12.0).unwrap();
        writeln!(
            svg,
            r#"<text x="16" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{ylabel}</text>"#,
            (py0 + py1) / 2.0,
            (py0 + py1) / 2.0
        )
        .unwrap();
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(svg: &mut String, labels: &[String]) {
    writeln!(svg, r#"<g class="legend">"#).unwrap();
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 14.0;
        let c = PALETTE[i % PALETTE.len()];
        writeln!(svg, r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{c}"/>"#, y - 9.0).unwrap();
        writeln!(svg, r#"<text x="{:.2}" y="{y:.2}" font-size="11">{}</text>"#, x + 18.0, escape(l)).unwrap();
    }
    writeln!(svg, "</g>").unwrap();
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{LEFT}" y="18" font-size="13">{}</text>"#, escape(title)).unwrap();
    s
}

fn learning_curves(text: &str, kind: FigureKind) -> Result<String> {
    let column = match kind {
        FigureKind::Eval => "eval_return",
        _ => "train_return",
    };
    let cs = curves(text, column)?;
    let pts = cs.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(e, m, s, _) in pts {
        x0 = x0.min(e);
        x1 = x1.max(e);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    y0 = y0.min(0.0);
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let f = Frame { x0, x1, y0, y1 };
    let mut svg = header(&format!("{column} (mean ± 1 std across seeds)"));
    f.axes(&mut svg, "episode", column, true);
    for (i, c) in cs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if c.points.iter().any(|p| p.3 > 1) {
            let upper = c.points.iter().map(|p| format!("{:.2},{:.2}", f.x(p.0), f.y(p.1 + p.2)));
            let lower = c.points.iter().rev().map(|p| format!("{:.2},{:.2}", f.x(p.0), f.y(p.1 - p.2)));
            let poly: Vec<String> = upper.chain(lower).collect();
            writeln!(svg, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, poly.join(" ")).unwrap();
        }
        let line: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", f.x(p.0), f.y(p.1))).collect();
        writeln!(svg, r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" ")).unwrap();
    }
    legend(&mut svg, &cs.iter().map(|c| c.label.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn similarity_bars(text: &str) -> Result<String> {
    let t = Table::parse(text)?;
    let (cv, cl, cd) = (t.col("variant")?, t.col("layer")?, t.col("mean_delta")?);
    let mut variants: Vec<String> = Vec::new();
    let mut bars: Vec<(usize, usize, f64)> = Vec::new();
    let mut max_layer = 1;
    for row in &t.rows {
        let (Ok(layer), Ok(d)) = (row[cl].parse::<usize>(), row[cd].parse::<f64>()) else { continue };
        let vi = match variants.iter().position(|v| *v == row[cv]) {
            Some(i) => i,
            None => {
                variants.push(row[cv].clone());
                variants.len() - 1
            }
        };
        max_layer = max_layer.max(layer);
        bars.push((vi, layer, d));
    }
    let lim = bars.iter().map(|b| b.2.abs()).fold(0.0, f64::max).max(1e-6) * 1.1;
    let f = Frame {
        x0: 0.5,
        x1: max_layer as f64 + 0.5,
        y0: -lim,
        y1: lim,
    };
    let mut svg = header("E[S(trained) - S(untrained)] per hidden layer");
    f.axes(&mut svg, "hidden layer", "cosine similarity delta", false);
    let slot = (f.x(1.5) - f.x(0.5)) * 0.8 / variants.len().max(1) as f64;
    for l in 1..=max_layer {
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{l}</text>"#, f.x(l as f64), H - BOTTOM + 16.0).unwrap();
    }
    for &(vi, layer, d) in &bars {
        let x = f.x(layer as f64) - slot * variants.len() as f64 / 2.0 + slot * vi as f64;
        let (ya, yb) = (f.y(d.max(0.0)), f.y(d.min(0.0)));
        writeln!(svg, r#"<rect class="bar" x="{x:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#, slot * 0.9, yb - ya, PALETTE[vi % PALETTE.len()]).unwrap();
    }
    let zero = f.y(0.0);
    writeln!(svg, r##"<line x1="{LEFT:.2}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="#444"/>"##, W - RIGHT).unwrap();
    legend(&mut svg, &variants);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders a summary (or similarity) CSV into SVG text. Identical input gives identical bytes.
pub fn render(text: &str, kind: FigureKind) -> Result<String> {
    match kind {
        FigureKind::Eval | FigureKind::Train => learning_curves(text, kind),
        FigureKind::Similarity => similarity_bars(text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(rows: &[(&str, u64, usize, &str)]) -> String {
        let mut s = String::from("#schema=1\nvariant,seed,episode,train_return,eval_return,solved,aborted\n");
        for (v, seed, e, ev) in rows {
            s.push_str(&format!("{v},{seed},{e},10,{ev},false,false\n"));
        }
        s
    }

    #[test]
    fn single_run_draws_no_band() {
        let s = summary(&[("a", 0, 5, "20"), ("a", 0, 10, "40")]);
        let svg = render(&s, FigureKind::Eval).unwrap();
        assert_eq!(svg.matches("class=\"mean\"").count(), 1);
        assert_eq!(svg.matches("class=\"band\"").count(), 0);
    }

    #[test]
    fn two_variants_give_two_legend_entries() {
        let s = summary(&[("a", 0, 5, "20"), ("a", 1, 5, "30"), ("b", 0, 5, "50"), ("b", 1, 5, "")]);
        let svg = render(&s, FigureKind::Eval).unwrap();
        let legend = svg.split("<g class=\"legend\">").nth(1).unwrap();
        assert_eq!(legend.matches("<text").count(), 2);
        assert_eq!(svg.matches("class=\"band\"").count(), 1);
        assert_eq!(svg, render(&s, FigureKind::Eval).unwrap());
    }

    #[test]
    fn solved_seed_holds_its_value() {
        let s = summary(&[("a", 0, 5, "500"), ("a", 1, 5, "100"), ("a", 1, 10, "300")]);
        let c = curves(&s, "eval_return").unwrap();
        assert_eq!(c[0].points[1], (10.0, 400.0, 100.0, 2));
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let e = render("variant,seed\na,1\n", FigureKind::Eval).unwrap_err();
        assert!(matches!(e, CliError::Schema(_, ref c) if c == "episode"), "{e}");
        assert!(render("variant,layer\n", FigureKind::Similarity).is_err());
    }

    #[test]
    fn similarity_bars_render() {
        let s = "variant,layer,label,mean_delta\nseparated,1,hidden_1,0.1\nseparated,2,hidden_2,-0.05\n";
        let svg = render(s, FigureKind::Similarity).unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 2);
    }
}
