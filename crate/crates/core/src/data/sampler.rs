use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::dataset::LabeledImageSet;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{Rng, RngState};

/// Per-class epoch-shuffled index streams over a labeled set.
///
/// A batch never repeats a sample unless the class has fewer samples than the batch.
#[derive(Debug, Clone)]
pub struct ClassSampler {
    rng: Rng,
    queues: Vec<Queue>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Queue {
    order: Vec<u32>,
    cursor: usize,
}

impl ClassSampler {
    pub fn new(num_classes: usize, rng: Rng) -> Self {
        ClassSampler {
            rng,
            queues: vec![
                Queue {
                    order: Vec::new(),
                    cursor: 0
                };
                num_classes
            ],
        }
    }

    /// Positions into `real.class_indices(class)`.
    pub fn next_positions(&mut self, class_size: usize, class: usize, batch_size: usize) -> Result<Vec<usize>> {
        if class >= self.queues.len() {
            return Err(Error::param(format!("unknown class {class}")));
        }
        if batch_size == 0 || class_size == 0 {
            return Err(Error::param("batch size and class size must be >= 1"));
        }
        if batch_size > class_size {
            return Ok((0..batch_size).map(|_| self.rng.random_range(0..class_size)).collect());
        }
        let q = &mut self.queues[class];
        if q.order.len() != class_size || q.cursor + batch_size > q.order.len() {
            q.order = (0..class_size as u32).collect();
            q.order.shuffle(&mut self.rng);
            q.cursor = 0;
        }
        let out = q.order[q.cursor..q.cursor + batch_size].iter().map(|&i| i as usize).collect();
        q.cursor += batch_size;
        Ok(out)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        RngState::capture(&self.rng).write(w);
        w.u64(self.queues.len() as u64);
        for q in &self.queues {
            w.u64(q.cursor as u64);
            w.u64(q.order.len() as u64);
            for &i in &q.order {
                w.u32(i);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let rng = RngState::read(r)?.restore();
        let k = r.u64()? as usize;
        let mut queues = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            let cursor = r.u64()? as usize;
            let len = r.u64()? as usize;
            let mut order = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                order.push(r.u32()?);
            }
            queues.push(Queue { order, cursor });
        }
        Ok(ClassSampler { rng, queues })
    }
}

impl PartialEq for ClassSampler {
    fn eq(&self, other: &Self) -> bool {
        RngState::capture(&self.rng) == RngState::capture(&other.rng) && self.queues == other.queues
    }
}

/// Draws `batch_size` images of `class`.
pub fn sample_class_batch<F: Real>(
    real: &LabeledImageSet<F>,
    class: usize,
    batch_size: usize,
    sampler: &mut ClassSampler,
) -> Result<Array4<F>> {
    if class >= real.num_classes() {
        return Err(Error::param(format!("unknown class {class}")));
    }
    let pool = real.class_indices(class);
    let pos = sampler.next_positions(pool.len(), class, batch_size)?;
    let idx: Vec<usize> = pos.into_iter().map(|p| pool[p]).collect();
    Ok(real.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn exhaustive_draw_is_a_permutation() {
        let mut s = ClassSampler::new(2, stream(1, Stream::Batch));
        let mut p = s.next_positions(10, 1, 10).unwrap();
        p.sort();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_class_before_repeating() {
        let mut s = ClassSampler::new(1, stream(1, Stream::Batch));
        let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_positions(12, 0, 3).unwrap()).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn replay_is_identical() {
        let mut a = ClassSampler::new(3, stream(4, Stream::Batch));
        let mut b = a.clone();
        for k in [0, 2, 1, 0] {
            assert_eq!(a.next_positions(7, k, 5).unwrap(), b.next_positions(7, k, 5).unwrap());
        }
    }

    #[test]
    fn oversized_batch_samples_with_replacement() {
        let mut s = ClassSampler::new(1, stream(4, Stream::Batch));
        let p = s.next_positions(3, 0, 128).unwrap();
        assert_eq!(p.len(), 128);
        assert!(p.iter().all(|&i| i < 3));
    }

    #[test]
    fn unknown_class() {
        let mut s = ClassSampler::new(2, stream(4, Stream::Batch));
        assert!(matches!(s.next_positions(3, 2, 1), Err(Error::Param(_))));
    }
}
