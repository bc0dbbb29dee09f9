//! Voxel-space interpolation shared by resizing and augmentation.

/// How samples falling outside the grid are resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Clamp coordinates to the grid (edge replication).
    Clamp,
    /// Return a fixed value outside the grid.
    Fill(f32),
}

const EDGE_TOL: f64 = 1e-6;

/// Trilinear sample of an x-fastest buffer at fractional voxel coordinates.
pub fn trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3], boundary: Boundary) -> f32 {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let mut c = p[a];
        if let Boundary::Fill(v) = boundary {
            if !(-EDGE_TOL..=hi + EDGE_TOL).contains(&c) {
                return v;
            }
        }
        c = c.clamp(0.0, hi);
        let f = c.floor();
        base[a] = (f as usize).min(dims[a].saturating_sub(2));
        frac[a] = c - base[a] as f64;
    }
    let at = |x: usize, y: usize, z: usize| data[x + dims[0] * (y + dims[1] * z)] as f64;
    let step = |a: usize| usize::from(dims[a] > 1);
    let (x0, y0, z0) = (base[0], base[1], base[2]);
    let (x1, y1, z1) = (x0 + step(0), y0 + step(1), z0 + step(2));
    let [fx, fy, fz] = frac;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz) as f32
}

/// Resample to `new_dims` with centre-aligned voxels (`old = (new + 0.5)·old/new − 0.5`).
pub fn resize_trilinear(data: &[f32], dims: [usize; 3], new_dims: [usize; 3]) -> Vec<f32> {
    let ratio: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 / new_dims[a] as f64);
    let mut out = Vec::with_capacity(new_dims.iter().product());
    for z in 0..new_dims[2] {
        for y in 0..new_dims[1] {
            for x in 0..new_dims[0] {
                let p = [x, y, z];
                let src = std::array::from_fn(|a| (p[a] as f64 + 0.5) * ratio[a] - 0.5);
                out.push(trilinear(data, dims, src, Boundary::Clamp));
            }
        }
    }
    out
}

/// Copy a box of `size` voxels starting at `from` in the source into `to` in
/// a destination grid; both boxes must fit.
pub fn copy_box(
    src: &[f32],
    src_dims: [usize; 3],
    from: [usize; 3],
    dst: &mut [f32],
    dst_dims: [usize; 3],
    to: [usize; 3],
    size: [usize; 3],
) {
    for z in 0..size[2] {
        for y in 0..size[1] {
            let s = from[0] + src_dims[0] * (from[1] + y + src_dims[1] * (from[2] + z));
            let d = to[0] + dst_dims[0] * (to[1] + y + dst_dims[1] * (to[2] + z));
            dst[d..d + size[0]].copy_from_slice(&src[s..s + size[0]]);
        }
    }
}
