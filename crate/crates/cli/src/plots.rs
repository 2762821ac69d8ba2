//! SVG and CSV renderings of run outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use caformer_core::backbone::BackboneOutput;
use caformer_core::pipeline::Overlay;
use caformer_core::NdArray;

use crate::error::{io_err, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 24.0;
const CELL: f64 = 16.0;

/// Keeps ASCII letters, digits, `-` and `_`; everything else becomes `_`.
pub fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "dim".into()
    } else {
        s
    }
}

fn write(path: PathBuf, text: String) -> CliResult<PathBuf> {
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn polyline(values: &[f64], lo: f64, hi: f64, colour: &str) -> String {
    let n = values.len().max(2) - 1;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / n as f64;
            let y = HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / span;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    )
}

/// Truth (black) and prediction (red) of one dimension as a line chart.
pub fn line_svg(title: &str, truth: &[f64], pred: &[f64]) -> String {
    let (lo, hi) = truth
        .iter()
        .chain(pred)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    let _ = writeln!(svg, "<title>{title}</title>");
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    svg.push_str(&polyline(truth, lo, hi, "black"));
    svg.push_str(&polyline(pred, lo, hi, "red"));
    svg.push_str("</svg>\n");
    svg
}

/// Square-cell heatmap of a matrix. Each cell's `fill-opacity` is its value
/// over the largest absolute value, so zero entries render fully transparent.
pub fn heatmap_svg(title: &str, rows: usize, cols: usize, values: &[f64]) -> String {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (w, h) = (cols as f64 * CELL, rows as f64 * CELL);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(svg, "<title>{title}</title>");
    for i in 0..rows {
        for j in 0..cols {
            let v = values[i * cols + j];
            let intensity = if peak > 0.0 { v.abs() / peak } else { 0.0 };
            let colour = if v < 0.0 { "#b2182b" } else { "#2166ac" };
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{colour}\" fill-opacity=\"{intensity}\" data-row=\"{i}\" data-col=\"{j}\"/>",
                j as f64 * CELL,
                i as f64 * CELL
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean of an `N x M x M` stack over its first axis.
fn mean_over_first(a: &NdArray) -> (usize, usize, Vec<f64>) {
    let s = a.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let stacks = a.numel() / (r * c);
    let mut out = vec![0.0; r * c];
    for chunk in a.data().chunks(r * c) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v / stacks as f64);
    }
    (r, c, out)
}

fn overlay_rows(o: &Overlay, d: usize) -> (&[f64], &[f64]) {
    let t = o.truth.shape()[1];
    (&o.truth.data()[d * t..(d + 1) * t], &o.pred.data()[d * t..(d + 1) * t])
}

/// Writes `overlay_<dim>.svg`, `overlay_<dim>.csv` and the combined
/// `overlay.csv` into `dir`.
pub fn write_overlay(dir: &Path, overlay: &Overlay) -> CliResult<Vec<PathBuf>> {
    let t = overlay.truth.shape()[1];
    let mut written = Vec::new();
    let mut combined = String::from("index");
    for name in &overlay.dim_names {
        let _ = write!(combined, ",{name}_truth,{name}_pred");
    }
    combined.push('\n');
    for step in 0..t {
        let _ = write!(combined, "{step}");
        for d in 0..overlay.dim_names.len() {
            let (truth, pred) = overlay_rows(overlay, d);
            let _ = write!(combined, ",{},{}", truth[step], pred[step]);
        }
        combined.push('\n');
    }
    for (d, name) in overlay.dim_names.iter().enumerate() {
        let stem = file_stem(name);
        let (truth, pred) = overlay_rows(overlay, d);
        let mut csv = String::from("index,truth,pred\n");
        for step in 0..t {
            let _ = writeln!(csv, "{step},{},{}", truth[step], pred[step]);
        }
        written.push(write(dir.join(format!("overlay_{stem}.csv")), csv)?);
        written.push(write(dir.join(format!("overlay_{stem}.svg")), line_svg(name, truth, pred))?);
    }
    written.push(write(dir.join("overlay.csv"), combined)?);
    Ok(written)
}

/// Writes `a_d_block{b}.svg` (averaged over patches) and `h_ce_block{b}.svg`
/// for every block.
pub fn write_diagnostics(dir: &Path, diag: &BackboneOutput) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (b, block) in diag.blocks.iter().enumerate() {
        let (r, c, a_d) = mean_over_first(&block.a_d);
        written.push(write(
            dir.join(format!("a_d_block{b}.svg")),
            heatmap_svg(&format!("A_d block {b}"), r, c, &a_d),
        )?);
        let (r, c, h_ce) = mean_over_first(&block.h_ce);
        written.push(write(
            dir.join(format!("h_ce_block{b}.svg")),
            heatmap_svg(&format!("H_ce block {b}"), r, c, &h_ce),
        )?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("OT"), "OT");
        assert_eq!(file_stem("a b/c"), "a_b_c");
        assert_eq!(file_stem(""), "dim");
    }

    #[test]
    fn zero_cells_are_transparent() {
        let svg = heatmap_svg("t", 2, 2, &[1.0, 0.0, 0.5, 0.5]);
        assert!(svg.contains("fill-opacity=\"0\" data-row=\"0\" data-col=\"1\""));
        assert!(svg.contains("fill-opacity=\"1\" data-row=\"0\" data-col=\"0\""));
        assert!(svg.contains("fill-opacity=\"0.5\" data-row=\"1\" data-col=\"0\""));
    }

    #[test]
    fn stack_mean() {
        let a = NdArray::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_over_first(&a), (1, 2, vec![2.0, 3.0]));
    }
}
