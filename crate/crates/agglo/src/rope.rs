//! Normalized rotary-coordinate generation for resolution-robust positional
//! encoding.
//!
//! Patch-center coordinates are scaled by the image aspect ratio: x spans
//! `[-sqrt(W/H), sqrt(W/H)]` and y spans `[-sqrt(H/W), sqrt(H/W)]`, so the
//! coordinate box always has area 4 and the frequency scaling is the same at
//! every resolution. Rotation directions are spread over arbitrary 2D angles
//! at golden-angle increments, with geometrically spaced base frequencies.

/// Golden angle pi * (3 - sqrt(5)), the low-discrepancy angular increment.
pub const GOLDEN_ANGLE: f64 = std::f64::consts::PI * (3.0 - 2.236_067_977_499_79_f64);

/// Frequency-schedule base, matching common rotary embedding practice.
const FREQUENCY_BASE: f64 = 100.0;

/// Aspect-normalized patch-center coordinates for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    positions: Vec<[f64; 2]>,
    grid_h: usize,
    grid_w: usize,
    x_half_extent: f64,
    y_half_extent: f64,
}

impl CoordinateGrid {
    /// Row-major `(x, y)` positions, length `grid_h * grid_w`.
    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn num_patches(&self) -> usize {
        self.positions.len()
    }

    /// Half of the x extent, i.e. `sqrt(W/H)`.
    pub fn x_half_extent(&self) -> f64 {
        self.x_half_extent
    }

    /// Half of the y extent, i.e. `sqrt(H/W)`.
    pub fn y_half_extent(&self) -> f64 {
        self.y_half_extent
    }
}

/// Rotation directions (unit vectors) with their base frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    directions: Vec<[f64; 2]>,
    base_frequencies: Vec<f64>,
}

impl DirectionSet {
    pub fn directions(&self) -> &[[f64; 2]] {
        &self.directions
    }

    pub fn base_frequencies(&self) -> &[f64] {
        &self.base_frequencies
    }

    pub fn num_pairs(&self) -> usize {
        self.directions.len()
    }
}

/// Patch-center coordinates, linearly spaced with the extreme centers at the
/// aspect-normalized bounds. A single row or column sits at 0.
pub fn normalized_grid(width_px: u32, height_px: u32, patch_size: u32) -> CoordinateGrid {
    assert!(width_px > 0 && height_px > 0 && patch_size > 0, "dimensions must be positive");
    let grid_w = width_px.div_ceil(patch_size) as usize;
    let grid_h = height_px.div_ceil(patch_size) as usize;
    let x_half = (width_px as f64 / height_px as f64).sqrt();
    let y_half = (height_px as f64 / width_px as f64).sqrt();

    // 2i/(n-1) is an exact IEEE division at both endpoints, so the extreme
    // patch centers land exactly on +-half.
    let axis = |count: usize, half: f64, i: usize| -> f64 {
        if count == 1 {
            0.0
        } else {
            half * (2.0 * i as f64 / (count - 1) as f64 - 1.0)
        }
    };
    let mut positions = Vec::with_capacity(grid_h * grid_w);
    for row in 0..grid_h {
        let y = axis(grid_h, y_half, row);
        for col in 0..grid_w {
            positions.push([axis(grid_w, x_half, col), y]);
        }
    }
    CoordinateGrid { positions, grid_h, grid_w, x_half_extent: x_half, y_half_extent: y_half }
}

/// Unit directions at golden-angle increments from `seed_angle`, with
/// base frequencies geometrically spaced from 1 down to 1/FREQUENCY_BASE.
pub fn golden_directions(num_pairs: usize, seed_angle: f64) -> DirectionSet {
    assert!(num_pairs >= 1, "at least one frequency pair required");
    let mut directions = Vec::with_capacity(num_pairs);
    let mut base_frequencies = Vec::with_capacity(num_pairs);
    for k in 0..num_pairs {
        let theta = seed_angle + k as f64 * GOLDEN_ANGLE;
        directions.push([theta.cos(), theta.sin()]);
        base_frequencies.push(FREQUENCY_BASE.powf(-(k as f64) / num_pairs as f64));
    }
    DirectionSet { directions, base_frequencies }
}

/// Rotary phases: `phase[p][k] = frequency_k * <position_p, direction_k>`,
/// row-major with shape `num_patches x num_pairs`.
///
/// Phases depend only on the aspect ratio and the relative patch position,
/// never on the absolute resolution.
pub fn rotary_phases(grid: &CoordinateGrid, dirs: &DirectionSet) -> Vec<f64> {
    let pairs = dirs.num_pairs();
    let mut out = Vec::with_capacity(grid.num_patches() * pairs);
    for pos in grid.positions() {
        for k in 0..pairs {
            let dir = dirs.directions[k];
            out.push(dirs.base_frequencies[k] * (pos[0] * dir[0] + pos[1] * dir[1]));
        }
    }
    out
}
