use super::{Vec2, Wall};

/// First crossing of a segment into a wall interior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Fraction of the segment travelled before contact, in `[0, 1)`.
    pub t: f64,
    pub wall: usize,
    /// Axes whose motion the wall blocks (both for an exact corner hit).
    pub blocks: [bool; 2],
    /// Face coordinate on each blocked axis.
    pub face: [f64; 2],
}

/// Slab test of segment `p -> p + d` against the open interiors of `walls`.
///
/// Touching a face or gliding along it is not a hit; only motion that would
/// enter a wall's interior is.
pub fn first_hit(walls: &[Wall], p: Vec2, d: Vec2) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (idx, wall) in walls.iter().enumerate() {
        let lo = wall.min();
        let hi = wall.max();
        let mut t_near = [f64::NEG_INFINITY; 2];
        let mut t_far = [f64::INFINITY; 2];
        let mut face = [0.0; 2];
        let mut missed = false;
        for a in 0..2 {
            if d[a] == 0.0 {
                if !(p[a] > lo[a] && p[a] < hi[a]) {
                    missed = true;
                    break;
                }
            } else {
                let t1 = (lo[a] - p[a]) / d[a];
                let t2 = (hi[a] - p[a]) / d[a];
                if t1 < t2 {
                    t_near[a] = t1;
                    t_far[a] = t2;
                } else {
                    t_near[a] = t2;
                    t_far[a] = t1;
                }
                face[a] = if d[a] > 0.0 { lo[a] } else { hi[a] };
            }
        }
        if missed {
            continue;
        }
        let t_enter = t_near[0].max(t_near[1]);
        let t_exit = t_far[0].min(t_far[1]);
        if !(t_enter < t_exit && t_enter < 1.0 && t_exit > 0.0) {
            continue;
        }
        let blocks = [t_near[0] == t_enter, t_near[1] == t_enter];
        let hit = Hit {
            t: t_enter.max(0.0),
            wall: idx,
            blocks,
            face,
        };
        if best.is_none_or(|b| hit.t < b.t) {
            best = Some(hit);
        }
    }
    best
}

pub(super) struct Outcome {
    pub end: Vec2,
    pub blocked: Vec2,
    pub contact: bool,
}

fn clip(p: Vec2, d: Vec2, hit: &Hit) -> (Vec2, Vec2, Vec2) {
    let mut c = p + d * hit.t;
    let rem = d * (1.0 - hit.t);
    let mut blocked = Vec2::zeros();
    for a in 0..2 {
        if hit.blocks[a] {
            c[a] = hit.face[a];
            blocked[a] = rem[a];
        }
    }
    (c, blocked, rem - blocked)
}

/// Move from `start` by `delta`, clipping at the first wall and sliding the
/// tangential remainder (scaled by `friction`) in a single pass.
pub(super) fn resolve(walls: &[Wall], start: Vec2, delta: Vec2, friction: f64) -> Outcome {
    let Some(hit) = first_hit(walls, start, delta) else {
        return Outcome {
            end: start + delta,
            blocked: Vec2::zeros(),
            contact: false,
        };
    };
    let (contact_pt, mut blocked, tangential) = clip(start, delta, &hit);
    let slide = tangential * friction;
    let end = if slide == Vec2::zeros() {
        contact_pt
    } else if let Some(h2) = first_hit(walls, contact_pt, slide) {
        let (c2, b2, _) = clip(contact_pt, slide, &h2);
        blocked += b2;
        c2
    } else {
        contact_pt + slide
    };
    Outcome {
        end,
        blocked,
        contact: true,
    }
}
