//! Exact convex-polygon clipping for goal coverage.

pub type Point = [f64; 2];

/// Corners of a square of half-side `half` centred at `c`, rotated by `angle`.
pub fn square_corners(c: Point, half: f64, angle: f64) -> [Point; 4] {
    let (s, co) = angle.sin_cos();
    let local = [[-half, -half], [half, -half], [half, half], [-half, half]];
    local.map(|[x, y]| [c[0] + co * x - s * y, c[1] + s * x + co * y])
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc.abs() * 0.5
}

/// Sutherland–Hodgman clip of a convex polygon against an axis-aligned box.
pub fn clip_to_box(poly: &[Point], lo: Point, hi: Point) -> Vec<Point> {
    let mut out: Vec<Point> = poly.to_vec();
    // (axis, bound, keep_greater)
    for (axis, bound, keep_ge) in [(0, lo[0], true), (0, hi[0], false), (1, lo[1], true), (1, hi[1], false)] {
        if out.is_empty() {
            break;
        }
        let inside = |p: &Point| if keep_ge { p[axis] >= bound } else { p[axis] <= bound };
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}
