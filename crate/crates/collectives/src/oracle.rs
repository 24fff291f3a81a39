//! Reference reduction used to check the ring.

use std::ops::Add;

/// Elementwise sum over ranks, accumulated left to right from rank 0.
/// Panics if the buffers differ in length.
pub fn naive_allreduce_oracle<T: Copy + Add<Output = T>>(buffers: &[Vec<T>]) -> Vec<T> {
    let Some((first, rest)) = buffers.split_first() else {
        return Vec::new();
    };
    let mut out = first.clone();
    for b in rest {
        assert_eq!(b.len(), out.len(), "rank buffers differ in length");
        for (o, v) in out.iter_mut().zip(b) {
            *o = *o + *v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_in_rank_order() {
        let out = naive_allreduce_oracle(&[vec![1.0f64, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(out, vec![9.0, 12.0]);
        assert!(naive_allreduce_oracle::<f32>(&[]).is_empty());
    }
}
