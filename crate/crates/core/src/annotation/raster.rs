//! Pixel sets covered by brush stamps and polygons. Pixel `(x, y)` is the
//! point at integer coordinates `(x, y)`.

/// Pixels of a `width×height` plane within Euclidean distance `radius` of
/// any path point, in raster order without repeats.
pub fn disc_union(path: &[(i64, i64)], radius: u32, width: usize, height: usize) -> Vec<usize> {
    let r = radius as i64;
    let mut hit = vec![false; width * height];
    for &(cx, cy) in path {
        let (y0, y1) = ((cy - r).max(0), (cy + r).min(height as i64 - 1));
        for y in y0..=y1 {
            let dy = y - cy;
            for x in (cx - r).max(0)..=(cx + r).min(width as i64 - 1) {
                let dx = x - cx;
                if dx * dx + dy * dy <= r * r {
                    hit[y as usize * width + x as usize] = true;
                }
            }
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

/// Twice the signed area of a closed polygon.
pub fn doubled_area(vertices: &[(i64, i64)]) -> i64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum()
}

fn on_segment(p: (i64, i64), a: (i64, i64), b: (i64, i64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    cross == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Even-odd membership with boundary points counted as inside. Exact: the
/// crossing test compares integer cross products instead of dividing.
pub fn polygon_contains(vertices: &[(i64, i64)], p: (i64, i64)) -> bool {
    let n = vertices.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        if on_segment(p, a, b) {
            return true;
        }
        if (a.1 > p.1) != (b.1 > p.1) {
            // p.x < intersection x, with the sign of (b.y - a.y) folded in.
            let lhs = (p.0 - a.0) * (b.1 - a.1);
            let rhs = (b.0 - a.0) * (p.1 - a.1);
            if (b.1 > a.1 && lhs < rhs) || (b.1 < a.1 && lhs > rhs) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Pixels of a plane covered by the polygon, in raster order.
pub fn polygon_pixels(vertices: &[(i64, i64)], width: usize, height: usize) -> Vec<usize> {
    let x0 = vertices.iter().map(|v| v.0).min().unwrap_or(0).max(0);
    let x1 = vertices.iter().map(|v| v.0).max().unwrap_or(-1).min(width as i64 - 1);
    let y0 = vertices.iter().map(|v| v.1).min().unwrap_or(0).max(0);
    let y1 = vertices.iter().map(|v| v.1).max().unwrap_or(-1).min(height as i64 - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if polygon_contains(vertices, (x, y)) {
                out.push(y as usize * width + x as usize);
            }
        }
    }
    out
}
