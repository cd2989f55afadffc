use crate::linalg::RngStream;

/// Shuffles `0..n` and cuts it into contiguous chunks of `batch_size`; the
/// last chunk may be short. Derive a fresh stream per epoch to reshuffle.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversized_batch_holds_everything() {
        let b = make_batches(7, 100, &mut RngStream::new(1));
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 7);
    }

    #[test]
    fn batches_partition_the_split() {
        let b = make_batches(23, 5, &mut RngStream::new(2));
        assert_eq!(
            b.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![5, 5, 5, 5, 3]
        );
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            make_batches(50, 8, &mut RngStream::new(9)),
            make_batches(50, 8, &mut RngStream::new(9))
        );
        assert_ne!(
            make_batches(50, 8, &mut RngStream::new(9)),
            make_batches(50, 8, &mut RngStream::new(10))
        );
    }
}
