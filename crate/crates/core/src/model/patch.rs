use crate::volume::Dims;

/// Patch-grid extents for a volume, if the patch divides it.
pub fn grid_dims(volume: Dims, patch: Dims) -> Option<Dims> {
    if patch.contains(&0) || (0..3).any(|a| !volume[a].is_multiple_of(patch[a])) {
        return None;
    }
    Some([0, 1, 2].map(|a| volume[a] / patch[a]))
}

/// Rearranges a row-major volume into `N×P` rows: tokens in grid raster
/// order, voxels within a patch in raster order.
pub fn patchify<V: Copy>(src: &[V], dims: Dims, patch: Dims) -> Vec<V> {
    let grid = grid_dims(dims, patch).expect("patch divides volume");
    let mut out = Vec::with_capacity(src.len());
    for gz in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                for pz in 0..patch[0] {
                    for py in 0..patch[1] {
                        let z = gz * patch[0] + pz;
                        let y = gy * patch[1] + py;
                        let start = (z * dims[1] + y) * dims[2] + gx * patch[2];
                        out.extend_from_slice(&src[start..start + patch[2]]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<V: Copy + Default>(rows: &[V], dims: Dims, patch: Dims) -> Vec<V> {
    let grid = grid_dims(dims, patch).expect("patch divides volume");
    let mut out = vec![V::default(); rows.len()];
    let mut at = 0;
    for gz in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                for pz in 0..patch[0] {
                    for py in 0..patch[1] {
                        let z = gz * patch[0] + pz;
                        let y = gy * patch[1] + py;
                        let start = (z * dims[1] + y) * dims[2] + gx * patch[2];
                        out[start..start + patch[2]].copy_from_slice(&rows[at..at + patch[2]]);
                        at += patch[2];
                    }
                }
            }
        }
    }
    out
}
