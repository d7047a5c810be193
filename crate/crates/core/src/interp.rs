//! Center-aligned bilinear sampling shared by image resizing and heatmap
//! upsampling.

/// Source position for output sample `i` of `out_len` when `src_len` samples
/// span the same extent. Sample centers sit at `(k + 0.5) / len`; positions
/// outside the outermost source centers clamp to the edge.
///
/// Returns the two neighbouring source indices and the weight of the second.
pub(crate) fn source_coord(i: usize, out_len: usize, src_len: usize) -> (usize, usize, f64) {
    // ((i + 0.5) / out_len) * src_len - 0.5 with an exact numerator
    let numer = (2 * i + 1) as f64 * src_len as f64 - out_len as f64;
    let s = (numer / (2 * out_len) as f64).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// `a + t (b - a)`; returns `a` exactly when `a == b`.
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}
