//! Screen-space triangle traversal shared by the renderer, depth warping and
//! texture baking. Pixel `(x, y)` is sampled at its integer coordinate, which
//! matches the projection convention of [`crate::geometry::project`].

/// Edge-function triangle traversal with the top-left fill rule.
///
/// Calls `f(x, y, [b0, b1, b2])` with screen-space barycentrics for every
/// covered sample inside `[0, width) x [0, height)`. Winding does not matter.
pub fn for_each_covered<F>(p: [[f64; 2]; 3], width: usize, height: usize, mut f: F)
where
    F: FnMut(usize, usize, [f64; 3]),
{
    let area = edge(p[0], p[1], p[2]);
    if !(area.abs() > 0.0) || !area.is_finite() {
        return;
    }
    // Normalize to a consistent orientation so the fill rule is well defined.
    let swapped = area < 0.0;
    let (p, area) = if swapped {
        ([p[0], p[2], p[1]], -area)
    } else {
        (p, area)
    };

    let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = p
        .iter()
        .map(|q| q[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(width as f64 - 1.0);
    let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = p
        .iter()
        .map(|q| q[1])
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(height as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }

    let edges = [(p[1], p[2]), (p[2], p[0]), (p[0], p[1])];
    let top_left = edges.map(|(a, b)| is_top_left(a, b));

    for y in min_y as usize..=max_y as usize {
        for x in min_x as usize..=max_x as usize {
            let s = [x as f64, y as f64];
            let w = [
                edge(edges[0].0, edges[0].1, s),
                edge(edges[1].0, edges[1].1, s),
                edge(edges[2].0, edges[2].1, s),
            ];
            let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && top_left[k]));
            if inside {
                let b = [w[0] / area, w[1] / area, w[2] / area];
                f(x, y, if swapped { [b[0], b[2], b[1]] } else { b });
            }
        }
    }
}

/// Twice the signed area of `(a, b, c)`; positive when `c` lies to the right
/// of `a→b` in a y-down image, i.e. clockwise on screen.
#[inline]
fn edge(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// For triangles with positive `edge` orientation in y-down coordinates:
/// a top edge is horizontal with the interior below it, a left edge runs upward.
#[inline]
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let dy = b[1] - a[1];
    let dx = b[0] - a[0];
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}
