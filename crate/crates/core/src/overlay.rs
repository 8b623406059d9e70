//! Scene-graph overlay drawing: edges first, then one disc per node, gold
//! for salient nodes and blue for contextual ones.

use crate::error::{Error, Result};
use crate::graph::{GraphGeometry, NodePos, ScenePlan};
use crate::image::RgbImage;
use crate::tensor::Tensor;

pub const GOLD: [u8; 3] = [218, 165, 32];
pub const ROYAL_BLUE: [u8; 3] = [65, 105, 225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlaySpec {
    pub radius: usize,
    pub salient: [u8; 3],
    pub contextual: [u8; 3],
    pub edge: [u8; 3],
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec { radius: 3, salient: GOLD, contextual: ROYAL_BLUE, edge: [235, 235, 235] }
    }
}

impl OverlaySpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::config("overlay radius must be at least 1"));
        }
        let c = [self.salient, self.contextual, self.edge];
        if c[0] == c[1] || c[0] == c[2] || c[1] == c[2] {
            return Err(Error::config("overlay colors must be distinct"));
        }
        Ok(())
    }
}

/// Centre of feature-map cell `p` in an `img_w x img_h` image.
pub fn scale_position(p: NodePos, grid_w: usize, grid_h: usize, img_w: usize, img_h: usize) -> (i64, i64) {
    let sx = ((2 * p.x + 1) * img_w / (2 * grid_w)) as i64;
    let sy = ((2 * p.y + 1) * img_h / (2 * grid_h)) as i64;
    (sx, sy)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.put(x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_disc(img: &mut RgbImage, (cx, cy): (i64, i64), radius: usize, rgb: [u8; 3]) {
    let r = radius as i64;
    for y in -r..=r {
        for x in -r..=r {
            if x * x + y * y <= r * r {
                img.put(cx + x, cy + y, rgb);
            }
        }
    }
}

/// Draw both graphs of batch item `n` onto `img`; returns the number of node
/// markers drawn.
pub fn draw_overlay(img: &mut RgbImage, plan: &ScenePlan, n: usize, spec: &OverlaySpec) -> Result<usize> {
    spec.validate()?;
    if n >= plan.salient.indices.len() {
        return Err(Error::config(format!("batch item {n} out of range")));
    }
    let (w, h) = (img.width, img.height);
    let place = |g: &GraphGeometry| -> Vec<(i64, i64)> {
        g.positions[n].iter().map(|&p| scale_position(p, plan.w, plan.h, w, h)).collect()
    };
    let graphs = [(&plan.salient, spec.salient), (&plan.contextual, spec.contextual)];
    for (g, _) in graphs {
        let pts = place(g);
        for &(i, j) in &g.edges {
            draw_line(img, pts[i], pts[j], spec.edge);
        }
    }
    let mut markers = 0;
    for (g, color) in graphs {
        for p in place(g) {
            draw_disc(img, p, spec.radius, color);
            markers += 1;
        }
    }
    Ok(markers)
}

/// Grayscale rendering of a `[1,T,M]` spectrogram in tensor orientation:
/// row `t` is frame `t` and column `m` is mel band `m`, so feature-map node
/// positions scale onto it the same way they do for images.
pub fn spectrogram_image(spec: &Tensor) -> Result<RgbImage> {
    if spec.rank() != 3 || spec.shape()[0] != 1 {
        return Err(Error::config(format!("expected a [1,T,M] spectrogram, got {:?}", spec.shape())));
    }
    let (t, m) = (spec.shape()[1], spec.shape()[2]);
    let lo = spec.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spec.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    let mut img = RgbImage::new(m, t, [0, 0, 0]);
    for (i, &x) in spec.data().iter().enumerate() {
        let v = ((x - lo) / range * 255.0).round() as u8;
        img.put((i % m) as i64, (i / m) as i64, [v, v, v]);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::plan_scene_graphs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_is_valid() {
        OverlaySpec::default().validate().unwrap();
        assert!(OverlaySpec { radius: 0, ..Default::default() }.validate().is_err());
        assert!(OverlaySpec { contextual: GOLD, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn scaled_positions_stay_inside() {
        for (gw, gh, iw, ih) in [(8, 8, 64, 64), (7, 3, 10, 5), (28, 28, 224, 224), (4, 13, 64, 201), (5, 5, 5, 5)] {
            for x in 0..gw {
                for y in 0..gh {
                    let (sx, sy) = scale_position(NodePos { x, y }, gw, gh, iw, ih);
                    assert!(sx >= 0 && (sx as usize) < iw && sy >= 0 && (sy as usize) < ih);
                }
            }
        }
        assert_eq!(scale_position(NodePos { x: 0, y: 0 }, 8, 8, 64, 64), (4, 4));
    }

    #[test]
    fn k20_draws_forty_markers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        let plan = plan_scene_graphs(&f, 20).unwrap();
        let mut img = RgbImage::new(64, 64, [0, 0, 0]);
        let spec = OverlaySpec::default();
        assert_eq!(draw_overlay(&mut img, &plan, 0, &spec).unwrap(), 40);
        let count = |c: [u8; 3]| (0..64).flat_map(|y| (0..64).map(move |x| (x, y))).filter(|&(x, y)| img.get(x, y) == c).count();
        assert!(count(GOLD) > 0 && count(ROYAL_BLUE) > 0 && count(spec.edge) > 0);
    }

    #[test]
    fn line_endpoints_are_drawn() {
        let mut img = RgbImage::new(10, 10, [0, 0, 0]);
        draw_line(&mut img, (1, 2), (8, 7), [9, 9, 9]);
        assert_eq!(img.get(1, 2), [9, 9, 9]);
        assert_eq!(img.get(8, 7), [9, 9, 9]);
    }

    #[test]
    fn spectrogram_orientation() {
        let t = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        let img = spectrogram_image(&t).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.get(0, 0), [0, 0, 0]);
        assert_eq!(img.get(2, 1), [255, 255, 255]);
    }
}
