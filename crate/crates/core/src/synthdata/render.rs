use super::scene::{Object, SceneSpec, Shape};
use super::SynthConfig;
use crate::metrics::BinaryMask;

/// Rendered sample: interleaved 8-bit RGB rows, the expression tokens and
/// the referent mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub tokens: Vec<u32>,
    pub mask: BinaryMask,
}

/// Pixel `(x, y)` is inside when its centre is. Coordinates are doubled so
/// the test stays in integers.
pub fn covers(cfg: &SynthConfig, o: &Object, x: usize, y: usize) -> bool {
    let (cy, cx) = cfg.cell_center(o.cell.0, o.cell.1);
    let r = 2 * cfg.half_extent(o.size);
    let dx = 2 * x as i64 + 1 - 2 * cx;
    let dy = 2 * y as i64 + 1 - 2 * cy;
    match o.shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        // right angle at the lower left
        Shape::Triangle => dx >= -r && dy <= r && dx <= dy,
    }
}

/// Hard-edged rendering, no anti-aliasing.
pub fn render(spec: &SceneSpec, cfg: &SynthConfig) -> Triplet {
    let n = spec.canvas;
    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let hit = spec.objects.iter().position(|o| covers(cfg, o, x, y));
            let color = hit.map_or(cfg.background, |i| spec.objects[i].color.rgb());
            rgb.extend_from_slice(&color);
            mask.push(hit == Some(spec.referent));
        }
    }
    Triplet {
        size: n,
        rgb,
        tokens: spec.expression.tokens(),
        mask: BinaryMask::new(n, n, mask).expect("n*n values"),
    }
}
