//! Aspect-normalized rotary coordinates: extents that depend only on the
//! aspect ratio, golden-angle direction spreading, and phases that match
//! across resolutions.
//!
//! Run with: cargo run --example rope_grids

use agglo::rope::{golden_directions, normalized_grid, rotary_phases, GOLDEN_ANGLE};

fn main() {
    println!("golden angle: {GOLDEN_ANGLE:.6} rad");

    for (w, h) in [(256u32, 256u32), (2048, 2048), (1024, 256), (256, 1024)] {
        let grid = normalized_grid(w, h, 16);
        println!(
            "{w:>4}x{h:<4}: grid {:>3}x{:<3} x in [{:+.3}, {:+.3}] y in [{:+.3}, {:+.3}]",
            grid.grid_w(),
            grid.grid_h(),
            -grid.x_half_extent(),
            grid.x_half_extent(),
            -grid.y_half_extent(),
            grid.y_half_extent(),
        );
    }
    println!("(x extent x y extent = 4 for every aspect ratio)");

    let dirs = golden_directions(4, 0.0);
    println!("\ndirections and base frequencies:");
    for (d, f) in dirs.directions().iter().zip(dirs.base_frequencies()) {
        println!("  ({:+.4}, {:+.4})  freq {:.4}", d[0], d[1], f);
    }

    // Same relative position, different resolutions: identical phases.
    let coarse = normalized_grid(256, 256, 16); // 16x16 patches
    let fine = normalized_grid(976, 976, 16); // 61x61; shares the coarse lattice
    let pc = rotary_phases(&coarse, &dirs);
    let pf = rotary_phases(&fine, &dirs);
    let k = dirs.num_pairs();
    println!("\nphases at the top-left / center-ish / bottom-right corners:");
    for (label, (cr, cc)) in
        [("corner", (0usize, 0usize)), ("middle", (8, 8)), ("far corner", (15, 15))]
    {
        let ci = cr * coarse.grid_w() + cc;
        let fi = (cr * 4) * fine.grid_w() + cc * 4;
        let a = &pc[ci * k..ci * k + k];
        let b = &pf[fi * k..fi * k + k];
        let max_diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        println!("  {label:<11} 256px {a:.4?} vs 976px (same rel. pos) max diff {max_diff:.2e}");
    }
}
