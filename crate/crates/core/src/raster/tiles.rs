use crate::sensor::SensorModel;
use crate::ut::{normalized_bounds, Projection2D};

pub const DEFAULT_TILE_SIZE: usize = 16;

/// Inclusive pixel rectangle whose pixel centres fall inside a projection's extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x0 && col <= self.x1 && row >= self.y0 && row <= self.y1
    }
}

/// Pixel-centre rectangle of a projection, clipped to the image; `None` when empty.
pub fn pixel_rect(p: &Projection2D, sensor: &SensorModel) -> Option<PixelRect> {
    let [u0, u1, v0, v1] = normalized_bounds(p, sensor);
    let span = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        if !(lo.is_finite() && hi.is_finite()) {
            return None;
        }
        // Pixel j is covered when its centre (j + 0.5)/n lies in [lo, hi].
        let a = (lo * n as f64 - 0.5).ceil().max(0.0);
        let b = (hi * n as f64 - 0.5).floor().min(n as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    };
    let (x0, x1) = span(u0, u1, sensor.width)?;
    let (y0, y1) = span(v0, v1, sensor.height)?;
    Some(PixelRect { x0, x1, y0, y1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, indices into the projection list.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel bounds `(x0, x1, y0, y1)` (exclusive ends) of tile `t`.
    pub fn tile_bounds(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, (x0 + self.tile_size).min(width), y0, (y0 + self.tile_size).min(height))
    }
}

/// Assigns each projection to every tile its pixel rectangle touches.
pub fn tile_assign(projections: &[Projection2D], sensor: &SensorModel, tile_size: usize) -> TileGrid {
    let rects: Vec<Option<PixelRect>> = projections.iter().map(|p| pixel_rect(p, sensor)).collect();
    tile_assign_rects(&rects, sensor.width, sensor.height, tile_size)
}

pub(crate) fn tile_assign_rects(rects: &[Option<PixelRect>], width: usize, height: usize, tile_size: usize) -> TileGrid {
    let tile_size = tile_size.max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, rect) in rects.iter().enumerate() {
        let Some(r) = rect else { continue };
        for ty in r.y0 / tile_size..=r.y1 / tile_size {
            for tx in r.x0 / tile_size..=r.x1 / tile_size {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    TileGrid {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}
