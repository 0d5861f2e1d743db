use std::cmp::Ordering;

use mmgs_diffgrad::Real;

use super::preprocess::Splat;

/// Per-tile lists of splat indices, each sorted front to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Row-major over tiles; entries are Gaussian indices.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.lists.len()
    }

    pub fn entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// Pixel bounds `[x0, x1) x [y0, y1)` of tile `t`, clipped to the image.
    pub fn pixel_bounds(&self, t: usize, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let tx = t as u32 % self.tiles_x;
        let ty = t as u32 / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            (x0 + self.tile_size).min(width),
            y0,
            (y0 + self.tile_size).min(height),
        )
    }
}

pub(crate) fn depth_order<T: Real>(a: &Splat<T>, b: &Splat<T>) -> Ordering {
    a.depth
        .partial_cmp(&b.depth)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

/// Bins splats into tiles. Tile `k` along an axis owns the pixel area
/// `[k * ts - 0.5, (k + 1) * ts - 0.5)`, since pixel centres are integers.
/// A splat goes to every tile its `cull_sigmas` box touches; with `cull`
/// off every splat lands in every tile.
pub(crate) fn bin<T: Real>(
    splats: &[Option<Splat<T>>],
    width: u32,
    height: u32,
    tile_size: u32,
    cull: Option<f64>,
) -> TileGrid {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    let ts = tile_size as f64;
    let half = 0.5;
    let mut order: Vec<&Splat<T>> = splats.iter().flatten().collect();
    order.sort_by(|a, b| depth_order(a, b));
    for sp in order {
        let (x0, x1, y0, y1) = if let Some(k) = cull {
            let mx = sp.mean[0].as_f64();
            let my = sp.mean[1].as_f64();
            let ex = k * sp.std_dev[0].as_f64();
            let ey = k * sp.std_dev[1].as_f64();
            let lo_x = ((mx - ex + half) / ts).floor();
            let hi_x = ((mx + ex + half) / ts).floor();
            let lo_y = ((my - ey + half) / ts).floor();
            let hi_y = ((my + ey + half) / ts).floor();
            if hi_x < 0.0 || hi_y < 0.0 || lo_x >= tiles_x as f64 || lo_y >= tiles_y as f64 || !(mx.is_finite() && my.is_finite()) {
                continue;
            }
            (
                lo_x.max(0.0) as u32,
                (hi_x as u32).min(tiles_x - 1),
                lo_y.max(0.0) as u32,
                (hi_y as u32).min(tiles_y - 1),
            )
        } else {
            (0, tiles_x - 1, 0, tiles_y - 1)
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[(ty * tiles_x + tx) as usize].push(sp.index as u32);
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
