use crate::error::{Error, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

/// For every element of `out_shape`, the flat index of the element of `src`
/// it reads under broadcasting.
pub(crate) fn source_indices(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    // Stride of each output axis inside `src`; zero for broadcast axes.
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        let d = dim_from_end(src, rank - 1 - i);
        if d != 1 {
            src_strides[i] = stride;
        }
        stride *= d;
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
