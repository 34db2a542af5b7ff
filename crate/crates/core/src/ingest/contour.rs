//! Ground-truth contour handling: polygon rasterization and label maps.

use super::{IngestError, Result};
use crate::image::{Image, Mask};

const EDGE_EPS: f64 = 1e-9;

/// Reads a contour text file: one `x y` pair per line, blank lines ignored.
pub fn parse_contour_text(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next = |name: &str| -> Result<f64> {
            let raw = fields.next().ok_or_else(|| IngestError::ContourSyntax {
                line: i + 1,
                reason: format!("missing {name} coordinate"),
            })?;
            raw.parse().map_err(|_| IngestError::ContourSyntax {
                line: i + 1,
                reason: format!("bad {name} coordinate {raw:?}"),
            })
        };
        let x = next("x")?;
        let y = next("y")?;
        if fields.next().is_some() {
            return Err(IngestError::ContourSyntax {
                line: i + 1,
                reason: "more than two fields".into(),
            });
        }
        points.push((x, y));
    }
    Ok(points)
}

/// Fills the polygon `points` (x = column, y = row, pixel centres on integer
/// coordinates) into a `rows x cols` mask.
///
/// Interior is decided by the even-odd rule on each pixel row; pixels whose
/// centre lies on an edge are included. Parts of the polygon outside the
/// image are clipped.
pub fn rasterize_contour(points: &[(f64, f64)], rows: usize, cols: usize) -> Result<Mask> {
    if points.len() < 3 {
        return Err(IngestError::DegeneratePolygon(points.len()));
    }
    let mut mask = Image::filled(rows, cols, 0u8);
    let n = points.len();
    let edges = || (0..n).map(move |i| (points[i], points[(i + 1) % n]));

    let mut crossings = Vec::new();
    for r in 0..rows {
        let y = r as f64;
        crossings.clear();
        for ((x0, y0), (x1, y1)) in edges() {
            // Half-open in y so shared vertices are counted once.
            if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
                crossings.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        for pair in crossings.chunks_exact(2) {
            fill_span(&mut mask, r, pair[0], pair[1]);
        }
    }

    // Edges lying along a pixel row, and vertices at the top of the polygon,
    // are not covered by the half-open crossing rule.
    for ((x0, y0), (x1, y1)) in edges() {
        let r_lo = y0.min(y1).ceil().max(0.0);
        let r_hi = y0.max(y1).floor().min(rows as f64 - 1.0);
        let c_lo = x0.min(x1).ceil().max(0.0);
        let c_hi = x0.max(x1).floor().min(cols as f64 - 1.0);
        if r_lo > r_hi || c_lo > c_hi {
            continue;
        }
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        for r in r_lo as usize..=r_hi as usize {
            for c in c_lo as usize..=c_hi as usize {
                let (px, py) = (c as f64, r as f64);
                let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                if cross.abs() <= EDGE_EPS * len.max(1.0) {
                    mask.set(r, c, 1);
                }
            }
        }
    }
    Ok(mask)
}

fn fill_span(mask: &mut Mask, r: usize, x_left: f64, x_right: f64) {
    let lo = (x_left - EDGE_EPS).ceil().max(0.0);
    let hi = (x_right + EDGE_EPS).floor().min(mask.cols() as f64 - 1.0);
    if lo > hi {
        return;
    }
    for c in lo as usize..=hi as usize {
        mask.set(r, c, 1);
    }
}

/// Keeps only the pixels of class `lv_class` from a multi-class label map.
/// A label without that class gives an all-zero mask.
pub fn simplify_acdc_label<T: Copy + PartialEq>(label: &Image<T>, lv_class: T) -> Mask {
    label.map(|v| u8::from(v == lv_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_with_boundary() {
        let pts = [(2.0, 2.0), (2.0, 6.0), (6.0, 6.0), (6.0, 2.0)];
        let m = rasterize_contour(&pts, 10, 10).unwrap();
        assert_eq!(m.count_ones(), 25);
        assert_eq!(m.get(2, 2), 1);
        assert_eq!(m.get(6, 6), 1);
        assert_eq!(m.get(7, 6), 0);
    }

    #[test]
    fn two_points_are_degenerate() {
        assert!(matches!(
            rasterize_contour(&[(0.0, 0.0), (1.0, 1.0)], 4, 4),
            Err(IngestError::DegeneratePolygon(2))
        ));
    }

    #[test]
    fn single_row_polygon_is_drawn() {
        // Zero-area polygon along row 1: only its boundary exists.
        let pts = [(0.0, 1.0), (3.0, 1.0), (1.0, 1.0)];
        let m = rasterize_contour(&pts, 3, 5).unwrap();
        assert_eq!(m.count_ones(), 4);
        assert!((0..4).all(|c| m.get(1, c) == 1));
    }

    #[test]
    fn polygon_outside_image_is_clipped() {
        let pts = [(-5.0, -5.0), (-5.0, 2.0), (2.0, 2.0), (2.0, -5.0)];
        let m = rasterize_contour(&pts, 4, 4).unwrap();
        assert_eq!(m.count_ones(), 9);
        let far = [(10.0, 10.0), (12.0, 10.0), (12.0, 12.0)];
        assert_eq!(rasterize_contour(&far, 4, 4).unwrap().count_ones(), 0);
    }

    #[test]
    fn contour_text_parsing() {
        let pts = parse_contour_text("1.5 2.5\n\n3 4\n").unwrap();
        assert_eq!(pts, vec![(1.5, 2.5), (3.0, 4.0)]);
        assert!(matches!(
            parse_contour_text("1.0\n"),
            Err(IngestError::ContourSyntax { line: 1, .. })
        ));
        assert!(parse_contour_text("1 2 3").is_err());
    }

    #[test]
    fn acdc_label_simplification() {
        let label = Image::from_vec(2, 2, vec![0u8, 1, 2, 3]);
        assert_eq!(simplify_acdc_label(&label, 3).data(), &[0, 0, 0, 1]);
        let no_lv = Image::from_vec(2, 2, vec![0u8, 1, 2, 1]);
        assert_eq!(simplify_acdc_label(&no_lv, 3).count_ones(), 0);
        let all = Image::filled(4, 4, 3u8);
        assert_eq!(simplify_acdc_label(&all, 3).count_ones(), 16);
    }
}
