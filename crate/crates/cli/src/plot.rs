//! Grouped bar charts written as SVG, PNG and the CSV table they are drawn
//! from. Charts are rendered only from the table, so re-rendering a CSV gives
//! byte-identical figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mlcl::checkpoint::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub chart: String,
    pub group: String,
    pub series: String,
    /// Percent.
    pub value: f64,
    pub ci95: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub rows: Vec<Row>,
}

const PALETTE: [[u8; 3]; 8] = [
    [76, 114, 176],
    [221, 132, 82],
    [85, 168, 104],
    [196, 78, 82],
    [129, 114, 179],
    [147, 120, 96],
    [218, 139, 195],
    [140, 140, 140],
];

const BAR: f64 = 22.0;
const GAP: f64 = 18.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const PLOT_H: f64 = 240.0;
const BOTTOM: f64 = 70.0;

enum Shape {
    Rect { x: f64, y: f64, w: f64, h: f64, rgb: [u8; 3], class: &'static str },
    Line { x1: f64, y1: f64, x2: f64, y2: f64, rgb: [u8; 3] },
    Text { x: f64, y: f64, anchor: &'static str, size: u32, text: String },
}

fn ordered(values: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

impl Chart {
    pub fn groups(&self) -> Vec<String> {
        ordered(self.rows.iter().map(|r| r.group.clone()))
    }

    pub fn series(&self) -> Vec<String> {
        ordered(self.rows.iter().map(|r| r.series.clone()))
    }

    pub fn bar_count(&self) -> usize {
        self.rows.len()
    }

    fn layout(&self) -> (u32, u32, Vec<Shape>) {
        let groups = self.groups();
        let series = self.series();
        let group_w = series.len() as f64 * BAR + GAP;
        let legend_w = 20.0 + series.iter().map(|s| s.len() as f64 * 7.0 + 30.0).sum::<f64>();
        let width = (LEFT + groups.len() as f64 * group_w + GAP).max(legend_w).max(240.0).ceil();
        let height = TOP + PLOT_H + BOTTOM;
        let y_of = |v: f64| TOP + PLOT_H * (1.0 - v.clamp(0.0, 100.0) / 100.0);
        let axis = [60, 60, 60];
        let mut shapes = vec![Shape::Text {
            x: width / 2.0,
            y: 22.0,
            anchor: "middle",
            size: 14,
            text: self.title.clone(),
        }];
        for tick in (0..=100).step_by(20) {
            let y = y_of(tick as f64);
            shapes.push(Shape::Line { x1: LEFT, y1: y, x2: width - 10.0, y2: y, rgb: [225, 225, 225] });
            shapes.push(Shape::Text { x: LEFT - 6.0, y: y + 4.0, anchor: "end", size: 11, text: tick.to_string() });
        }
        shapes.push(Shape::Text { x: 14.0, y: TOP - 10.0, anchor: "start", size: 11, text: "accuracy %".into() });
        for (gi, g) in groups.iter().enumerate() {
            let x0 = LEFT + GAP + gi as f64 * group_w;
            for (si, s) in series.iter().enumerate() {
                let Some(r) = self.rows.iter().find(|r| &r.group == g && &r.series == s) else {
                    continue;
                };
                let x = x0 + si as f64 * BAR;
                let y = y_of(r.value);
                shapes.push(Shape::Rect { x, y, w: BAR - 2.0, h: TOP + PLOT_H - y, rgb: PALETTE[si % PALETTE.len()], class: "bar" });
                if r.ci95 > 0.0 {
                    let cx = x + (BAR - 2.0) / 2.0;
                    let (lo, hi) = (y_of(r.value - r.ci95), y_of(r.value + r.ci95));
                    shapes.push(Shape::Line { x1: cx, y1: lo, x2: cx, y2: hi, rgb: axis });
                    shapes.push(Shape::Line { x1: cx - 4.0, y1: hi, x2: cx + 4.0, y2: hi, rgb: axis });
                    shapes.push(Shape::Line { x1: cx - 4.0, y1: lo, x2: cx + 4.0, y2: lo, rgb: axis });
                }
            }
            shapes.push(Shape::Text {
                x: x0 + series.len() as f64 * BAR / 2.0,
                y: TOP + PLOT_H + 16.0,
                anchor: "middle",
                size: 11,
                text: g.clone(),
            });
        }
        shapes.push(Shape::Line { x1: LEFT, y1: TOP, x2: LEFT, y2: TOP + PLOT_H, rgb: axis });
        shapes.push(Shape::Line { x1: LEFT, y1: TOP + PLOT_H, x2: width - 10.0, y2: TOP + PLOT_H, rgb: axis });
        let mut lx = 20.0;
        let ly = TOP + PLOT_H + 40.0;
        for (si, s) in series.iter().enumerate() {
            shapes.push(Shape::Rect { x: lx, y: ly, w: 12.0, h: 12.0, rgb: PALETTE[si % PALETTE.len()], class: "legend" });
            shapes.push(Shape::Text { x: lx + 16.0, y: ly + 10.0, anchor: "start", size: 11, text: s.clone() });
            lx += s.len() as f64 * 7.0 + 30.0;
        }
        (width as u32, height as u32, shapes)
    }

    pub fn to_svg(&self) -> String {
        let (w, h, shapes) = self.layout();
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for shape in shapes {
            match shape {
                Shape::Rect { x, y, w, h, rgb: [r, g, b], class } => {
                    let _ = writeln!(s, r#"<rect class="{class}" x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="rgb({r},{g},{b})"/>"#);
                }
                Shape::Line { x1, y1, x2, y2, rgb: [r, g, b] } => {
                    let _ = writeln!(s, r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="rgb({r},{g},{b})"/>"#);
                }
                Shape::Text { x, y, anchor, size, text } => {
                    let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="{size}">{}</text>"#, escape(&text));
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// Raster version of the chart; text is omitted.
    pub fn to_png(&self) -> anyhow::Result<Vec<u8>> {
        let (w, h, shapes) = self.layout();
        let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
        let clampx = |v: f64| (v.round().max(0.0) as u32).min(w);
        let clampy = |v: f64| (v.round().max(0.0) as u32).min(h);
        for shape in shapes {
            match shape {
                Shape::Rect { x, y, w: rw, h: rh, rgb, .. } => {
                    for py in clampy(y)..clampy(y + rh) {
                        for px in clampx(x)..clampx(x + rw) {
                            img.put_pixel(px, py, image::Rgb(rgb));
                        }
                    }
                }
                Shape::Line { x1, y1, x2, y2, rgb } => {
                    let steps = ((x2 - x1).abs().max((y2 - y1).abs()).ceil() as usize).max(1);
                    for i in 0..=steps {
                        let t = i as f64 / steps as f64;
                        let (px, py) = (clampx(x1 + t * (x2 - x1)), clampy(y1 + t * (y2 - y1)));
                        if px < w && py < h {
                            img.put_pixel(px, py, image::Rgb(rgb));
                        }
                    }
                }
                Shape::Text { .. } => {}
            }
        }
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(w.into_inner()?)
    }

    pub fn from_csv(bytes: &[u8]) -> anyhow::Result<Self> {
        let mut rd = csv::Reader::from_reader(bytes);
        let rows: Vec<Row> = rd.deserialize().collect::<Result<_, _>>()?;
        let Some(first) = rows.first() else {
            bail!("chart table has no rows");
        };
        let title = first.chart.clone();
        if rows.iter().any(|r| r.chart != title) {
            bail!("chart table mixes several charts");
        }
        Ok(Chart { title, rows })
    }

    /// Writes `<stem>.csv`, then renders `<stem>.svg` and `<stem>.png` from it.
    pub fn write(&self, dir: &Path, stem: &str) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        atomic_write(&csv_path, &self.to_csv()?)?;
        let mut out = vec![csv_path];
        out.extend(render_table(&out[0], dir)?);
        Ok(out)
    }
}

/// Renders a chart table into SVG and PNG files next to each other in `dir`.
pub fn render_table(csv_path: &Path, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let bytes = std::fs::read(csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let chart = Chart::from_csv(&bytes).with_context(|| format!("parsing {}", csv_path.display()))?;
    let stem = csv_path.file_stem().and_then(|s| s.to_str()).context("chart table needs a file name")?;
    std::fs::create_dir_all(dir)?;
    let svg = dir.join(format!("{stem}.svg"));
    let png = dir.join(format!("{stem}.png"));
    atomic_write(&svg, chart.to_svg().as_bytes())?;
    atomic_write(&png, &chart.to_png()?)?;
    Ok(vec![svg, png])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart(groups: usize, series: usize) -> Chart {
        let mut rows = Vec::new();
        for g in 0..groups {
            for s in 0..series {
                rows.push(Row {
                    chart: "t".into(),
                    group: format!("tap {g}"),
                    series: format!("{}", (b'A' + s as u8) as char),
                    value: 20.0 + 7.3 * (g * series + s) as f64 / 3.0,
                    ci95: 0.1 * s as f64,
                    runs: 3,
                });
            }
        }
        Chart { title: "t".into(), rows }
    }

    #[test]
    fn bars_match_rows() {
        let c = chart(3, 4);
        assert_eq!(c.to_svg().matches(r#"class="bar""#).count(), 12);
        assert_eq!(chart(1, 1).to_svg().matches(r#"class="bar""#).count(), 1);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let c = chart(3, 4);
        let back = Chart::from_csv(&c.to_csv().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_png().unwrap(), c.to_png().unwrap());
    }

    #[test]
    fn rerender_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let files = chart(2, 3).write(dir.path(), "fig").unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let other = dir.path().join("again");
        let again = render_table(&files[0], &other).unwrap();
        assert_eq!(std::fs::read(&again[0]).unwrap(), first[1]);
        assert_eq!(std::fs::read(&again[1]).unwrap(), first[2]);
    }
}
