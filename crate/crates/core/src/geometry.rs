//! Oriented-rectangle footprints and their intersection-over-union.

use crate::scene::ActorState;

/// IOU above which two footprints count as colliding.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.02;

pub type Point = (f64, f64);

/// Footprint corners, counter-clockwise.
pub fn box_corners(s: &ActorState) -> [Point; 4] {
    let (sn, cs) = s.yaw.sin_cos();
    let (hl, hw) = (0.5 * s.length, 0.5 * s.width);
    let corner = |a: f64, b: f64| (s.x + a * cs - b * sn, s.y + a * sn + b * cs);
    [corner(hl, -hw), corner(hl, hw), corner(-hl, hw), corner(-hl, -hw)]
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    0.5 * twice
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    for k in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            let inside_cur = dc >= 0.0;
            let inside_prev = dp >= 0.0;
            if inside_cur {
                if !inside_prev {
                    output.push(intersect(prev, cur, dp, dc));
                }
                output.push(cur);
            } else if inside_prev {
                output.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// 2D footprint IOU of two actor boxes.
pub fn box_iou(a: &ActorState, b: &ActorState) -> f64 {
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if (a.x - b.x).hypot(a.y - b.y) > ra + rb {
        return 0.0;
    }
    let pa = box_corners(a);
    let pb = box_corners(b);
    let inter = polygon_area(&clip_convex(&pa, &pb)).max(0.0);
    let union = a.length * a.width + b.length * b.width - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn point_segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (ex, ey) = (bx - ax, by - ay);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((px - ax) * ex + (py - ay) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - ax - t * ex).hypot(py - ay - t * ey)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64, yaw: f64) -> ActorState {
        ActorState {
            length: 5.0,
            width: 2.0,
            ..ActorState::car(x, y, yaw, 0.0)
        }
    }

    #[test]
    fn coincident_boxes() {
        let a = car(1.0, 2.0, 0.3);
        assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distant_boxes() {
        assert_eq!(box_iou(&car(0.0, 0.0, 0.0), &car(100.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn half_overlap_axis_aligned() {
        // overlap 2.5 x 2 = 5, union 10 + 10 - 5 = 15
        let iou = box_iou(&car(0.0, 0.0, 0.0), &car(2.5, 0.0, 0.0));
        assert!((iou - 5.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_inside_square() {
        // A square rotated 45 degrees inside a larger one: intersection is the small square.
        let big = ActorState {
            length: 10.0,
            width: 10.0,
            ..ActorState::car(0.0, 0.0, 0.0, 0.0)
        };
        let small = ActorState {
            length: 2.0,
            width: 2.0,
            ..ActorState::car(0.0, 0.0, std::f64::consts::FRAC_PI_4, 0.0)
        };
        assert!((box_iou(&big, &small) - 4.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn corners_are_ccw() {
        assert!((polygon_area(&box_corners(&car(3.0, -1.0, 2.0))) - 10.0).abs() < 1e-12);
    }
}
