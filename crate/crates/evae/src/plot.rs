//! Figure emission for metric streams: NFE sweeps, gamma sweeps and the
//! ablation ladder, rendered deterministically as SVG and PNG.

use crate::error::{Error, Result};
use serde::Deserialize;
use std::path::Path;

/// The fields a plot needs from one JSON-lines record; extra keys in eval
/// reports are ignored.
#[derive(Clone, Debug, Deserialize)]
pub struct PlotRecord {
    pub rfid_proxy: f64,
    #[serde(default)]
    pub nfe: Option<u64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub stage: Option<String>,
    #[serde(default)]
    pub grid: Option<String>,
}

/// Parses a JSON-lines stream, reporting the first offending line.
pub fn parse_records(text: &str) -> Result<Vec<PlotRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlotRecord = serde_json::from_str(line)
            .map_err(|e| Error::invalid_argument(format!("line {}: {e}: {line}", i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::invalid_argument("empty metric stream"));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    NfeSweep,
    GammaSweep,
    Ladder,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nfe_sweep" => Ok(Self::NfeSweep),
            "gamma_sweep" => Ok(Self::GammaSweep),
            "ladder" => Ok(Self::Ladder),
            other => Err(Error::invalid_argument(format!(
                "unknown plot kind {other:?}"
            ))),
        }
    }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const STAGE_ORDER: [&str; 8] = ["baseline", "a", "b", "c", "d", "e", "f", "g"];

/// Groups records into plot series for the requested figure.
pub fn build_series(
    kind: PlotKind,
    records: &[PlotRecord],
) -> Result<(Vec<Series>, String, String)> {
    match kind {
        PlotKind::NfeSweep => {
            let mut by_grid: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
                Default::default();
            for r in records {
                let nfe = r
                    .nfe
                    .ok_or_else(|| Error::invalid_argument("nfe_sweep needs nfe fields"))?;
                let grid = r.grid.clone().unwrap_or_else(|| "default".into());
                by_grid
                    .entry(grid)
                    .or_default()
                    .push((nfe as f64, r.rfid_proxy));
            }
            let series = by_grid
                .into_iter()
                .map(|(name, mut points)| {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series { name, points }
                })
                .collect();
            Ok((series, "NFE".into(), "rFID proxy".into()))
        }
        PlotKind::GammaSweep => {
            let mut points: Vec<(f64, f64)> = records
                .iter()
                .map(|r| {
                    r.gamma
                        .map(|g| (g, r.rfid_proxy))
                        .ok_or_else(|| Error::invalid_argument("gamma_sweep needs gamma fields"))
                })
                .collect::<Result<_>>()?;
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok((
                vec![Series {
                    name: "gamma".into(),
                    points,
                }],
                "gamma".into(),
                "rFID proxy".into(),
            ))
        }
        PlotKind::Ladder => {
            let mut points = Vec::new();
            for r in records {
                let stage = r
                    .stage
                    .as_deref()
                    .ok_or_else(|| Error::invalid_argument("ladder needs stage fields"))?;
                let idx = STAGE_ORDER
                    .iter()
                    .position(|s| *s == stage)
                    .ok_or_else(|| Error::invalid_argument(format!("unknown stage {stage:?}")))?;
                points.push((idx as f64, r.rfid_proxy));
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok((
                vec![Series {
                    name: "ladder".into(),
                    points,
                }],
                "stage (baseline..g)".into(),
                "rFID proxy".into(),
            ))
        }
    }
}

const W: usize = 640;
const H: usize = 440;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 30.0;
const MB: f64 = 50.0;

const COLORS: [(u8, u8, u8); 4] = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40)];

fn ranges(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmin == xmax {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymin == ymax {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let ypad = 0.05 * (ymax - ymin);
    ((xmin, xmax), (ymin - ypad, ymax + ypad))
}

fn to_px(x: f64, y: f64, xr: (f64, f64), yr: (f64, f64)) -> (f64, f64) {
    let px = ML + (x - xr.0) / (xr.1 - xr.0) * (W as f64 - ML - MR);
    let py = H as f64 - MB - (y - yr.0) / (yr.1 - yr.0) * (H as f64 - MT - MB);
    (px, py)
}

fn tick_values(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Deterministic SVG chart.
pub fn render_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (xr, yr) = ranges(series);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        W / 2
    ));
    // axes
    let (x0, y0) = (ML, H as f64 - MB);
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        W as f64 - MR
    ));
    for tv in tick_values(xr.0, xr.1) {
        let (px, _) = to_px(tv, yr.0, xr, yr);
        s.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{y0}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        s.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            y0 + 18.0,
            fmt_tick(tv)
        ));
    }
    for tv in tick_values(yr.0, yr.1) {
        let (_, py) = to_px(xr.0, tv, xr, yr);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{ML}\" y2=\"{py}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            x0 - 8.0,
            py + 4.0,
            fmt_tick(tv)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{xlabel}</text>\n",
        (ML + W as f64 - MR) / 2.0,
        H as f64 - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{ylabel}</text>\n",
        (MT + H as f64 - MB) / 2.0,
        (MT + H as f64 - MB) / 2.0
    ));
    for (si, serie) in series.iter().enumerate() {
        let (r, g, b) = COLORS[si % COLORS.len()];
        let color = format!("rgb({r},{g},{b})");
        let pts: Vec<String> = serie
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y, xr, yr);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        if pts.len() > 1 {
            s.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &serie.points {
            let (px, py) = to_px(x, y, xr, yr);
            s.push_str(&format!(
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"{color}\"/>\n"
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            W as f64 - MR - 120.0,
            MT + 16.0 * si as f64 + 12.0,
            serie.name
        ));
    }
    s.push_str("</svg>\n");
    s
}

// 3x5 bitmap glyphs for PNG tick labels
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut image::RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..3 {
                if row & (0b100 >> gx) != 0 {
                    let (px, py) = (cx + gx as i64, y + gy as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, image::Rgb(color));
                    }
                }
            }
        }
        cx += 4;
    }
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, image::Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Deterministic PNG chart (labels rendered with a tiny bitmap font).
pub fn render_png(series: &[Series]) -> image::RgbImage {
    let (xr, yr) = ranges(series);
    let mut img = image::RgbImage::from_pixel(W as u32, H as u32, image::Rgb([255, 255, 255]));
    let y0 = H as f64 - MB;
    draw_line(&mut img, (ML, MT), (ML, y0), [0, 0, 0]);
    draw_line(&mut img, (ML, y0), (W as f64 - MR, y0), [0, 0, 0]);
    for tv in tick_values(xr.0, xr.1) {
        let (px, _) = to_px(tv, yr.0, xr, yr);
        draw_line(&mut img, (px, y0), (px, y0 + 5.0), [0, 0, 0]);
        let label = fmt_tick(tv);
        draw_text(
            &mut img,
            px as i64 - 2 * label.len() as i64,
            y0 as i64 + 9,
            &label,
            [0, 0, 0],
        );
    }
    for tv in tick_values(yr.0, yr.1) {
        let (_, py) = to_px(xr.0, tv, xr, yr);
        draw_line(&mut img, (ML - 5.0, py), (ML, py), [0, 0, 0]);
        let label = fmt_tick(tv);
        draw_text(
            &mut img,
            ML as i64 - 8 - 4 * label.len() as i64,
            py as i64 - 2,
            &label,
            [0, 0, 0],
        );
    }
    for (si, serie) in series.iter().enumerate() {
        let (r, g, b) = COLORS[si % COLORS.len()];
        let color = [r, g, b];
        for w in serie.points.windows(2) {
            let a = to_px(w[0].0, w[0].1, xr, yr);
            let bpx = to_px(w[1].0, w[1].1, xr, yr);
            draw_line(&mut img, a, bpx, color);
        }
        for &(x, y) in &serie.points {
            let (px, py) = to_px(x, y, xr, yr);
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    if dx * dx + dy * dy <= 4 {
                        let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                        if qx >= 0
                            && qy >= 0
                            && (qx as u32) < img.width()
                            && (qy as u32) < img.height()
                        {
                            img.put_pixel(qx as u32, qy as u32, image::Rgb(color));
                        }
                    }
                }
            }
        }
    }
    img
}

/// Renders a metric stream to `<out_prefix>.svg` and `<out_prefix>.png`.
pub fn emit_figures(kind: PlotKind, stream_text: &str, out_prefix: &Path) -> Result<()> {
    let records = parse_records(stream_text)?;
    let (series, xlabel, ylabel) = build_series(kind, &records)?;
    let title = match kind {
        PlotKind::NfeSweep => "rFID proxy vs NFE",
        PlotKind::GammaSweep => "rFID proxy vs gamma",
        PlotKind::Ladder => "Ablation ladder",
    };
    let svg = render_svg(title, &xlabel, &ylabel, &series);
    let svg_path = out_prefix.with_extension("svg");
    std::fs::write(&svg_path, svg)
        .map_err(|e| Error::io(format!("{}: {e}", svg_path.display())))?;
    let png = render_png(&series);
    let png_path = out_prefix.with_extension("png");
    png.save(&png_path)
        .map_err(|e| Error::io(format!("{}: {e}", png_path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_malformed_streams() {
        assert!(parse_records("").is_err());
        let err = parse_records("{\"rfid_proxy\": 1.0}\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn ladder_orders_all_stages() {
        let lines: String = STAGE_ORDER
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{{\"rfid_proxy\": {}, \"stage\": \"{s}\"}}\n", 10 - i))
            .collect();
        let recs = parse_records(&lines).unwrap();
        let (series, ..) = build_series(PlotKind::Ladder, &recs).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].points.len(), 8);
        for (i, &(x, _)) in series[0].points.iter().enumerate() {
            assert_eq!(x, i as f64);
        }
    }

    #[test]
    fn nfe_sweep_uses_exact_x_values() {
        let lines = "{\"rfid_proxy\": 3.0, \"nfe\": 1}\n{\"rfid_proxy\": 2.0, \"nfe\": 2}\n{\"rfid_proxy\": 1.5, \"nfe\": 3}\n{\"rfid_proxy\": 1.4, \"nfe\": 5}\n{\"rfid_proxy\": 1.6, \"nfe\": 10}\n";
        let recs = parse_records(lines).unwrap();
        let (series, ..) = build_series(PlotKind::NfeSweep, &recs).unwrap();
        let xs: Vec<f64> = series[0].points.iter().map(|p| p.0).collect();
        assert_eq!(xs, vec![1.0, 2.0, 3.0, 5.0, 10.0]);
    }

    #[test]
    fn figures_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let stream =
            "{\"rfid_proxy\": 3.0, \"gamma\": 1.0}\n{\"rfid_proxy\": 2.0, \"gamma\": 0.6}\n";
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        emit_figures(PlotKind::GammaSweep, stream, &p1).unwrap();
        emit_figures(PlotKind::GammaSweep, stream, &p2).unwrap();
        assert_eq!(
            std::fs::read(p1.with_extension("svg")).unwrap(),
            std::fs::read(p2.with_extension("svg")).unwrap()
        );
        assert_eq!(
            std::fs::read(p1.with_extension("png")).unwrap(),
            std::fs::read(p2.with_extension("png")).unwrap()
        );
        let svg = std::fs::read_to_string(p1.with_extension("svg")).unwrap();
        assert!(svg.contains("<polyline"));
    }
}
