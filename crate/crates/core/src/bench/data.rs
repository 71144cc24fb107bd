//! Synthetic Gaussian-cluster classification tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MdmError, Result};

pub const TRAIN_PER_CLASS: usize = 256;
pub const VAL_PER_CLASS: usize = 64;
pub const TEST_PER_CLASS: usize = 64;
/// Standard deviation of every cluster.
pub const CLUSTER_SIGMA: f64 = 1.0;

const CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-coordinate mean of the inputs.
    pub fn input_mean(&self) -> Vec<f64> {
        let Some(first) = self.inputs.first() else {
            return Vec::new();
        };
        let mut mean = vec![0.0; first.len()];
        for x in &self.inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        let n = self.inputs.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn concat(parts: &[&Dataset]) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.inputs.extend(p.inputs.iter().cloned());
            out.labels.extend(p.labels.iter().copied());
        }
        out
    }
}

/// Which split of a task to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A classification task. Inputs live in a shared `input_width`-wide space
/// with the task's own features at `feature_offset..feature_offset + dims`;
/// its classes map to network outputs `head_offset..head_offset + class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub task_id: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub class_count: usize,
    pub generator_seed: u64,
    pub dims: usize,
    pub input_width: usize,
    pub feature_offset: usize,
    pub head_offset: usize,
    pub centers: Vec<Vec<f64>>,
}

impl TaskBundle {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn head(&self) -> std::ops::Range<usize> {
        self.head_offset..self.head_offset + self.class_count
    }

    pub fn chance_accuracy(&self) -> f64 {
        1.0 / self.class_count as f64
    }

    /// Places the task in a wider input space and output head.
    pub fn embed(mut self, input_width: usize, feature_offset: usize, head_offset: usize) -> Result<Self> {
        if feature_offset + self.dims > input_width {
            return Err(MdmError::invalid(format!(
                "features {}..{} do not fit an input of width {input_width}",
                feature_offset,
                feature_offset + self.dims
            )));
        }
        let shift = |ds: &mut Dataset, old_offset: usize, old_width: usize| {
            for x in &mut ds.inputs {
                let mut wide = vec![0.0; input_width];
                wide[feature_offset..feature_offset + self.dims]
                    .copy_from_slice(&x[old_offset..old_offset + self.dims]);
                debug_assert_eq!(x.len(), old_width);
                *x = wide;
            }
        };
        let (old_offset, old_width) = (self.feature_offset, self.input_width);
        shift(&mut self.train, old_offset, old_width);
        shift(&mut self.val, old_offset, old_width);
        shift(&mut self.test, old_offset, old_width);
        self.input_width = input_width;
        self.feature_offset = feature_offset;
        self.head_offset = head_offset;
        Ok(self)
    }
}

fn sample_centers(rng: &mut ChaCha8Rng, class_count: usize, dims: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let min_dist = separation * CLUSTER_SIGMA;
    let radius = separation * (class_count as f64).powf(1.0 / dims as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let c: Vec<f64> = (0..dims).map(|_| rng.random_range(-radius..=radius)).collect();
            let far = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
            });
            if far {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(MdmError::invalid(format!(
                "cannot place {class_count} centers {min_dist} apart in {dims} dimensions"
            )));
        }
    }
    Ok(centers)
}

fn draw(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], per_class: usize) -> Dataset {
    let mut ds = Dataset::default();
    for _ in 0..per_class {
        for (label, c) in centers.iter().enumerate() {
            let x = c
                .iter()
                .map(|m| m + CLUSTER_SIGMA * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>();
            ds.inputs.push(x);
            ds.labels.push(label);
        }
    }
    ds
}

/// Gaussian clusters with centers at least `separation` cluster deviations
/// apart, drawn uniformly from a cube that grows with the class count.
pub fn make_task(seed: u64, class_count: usize, dims: usize, separation: f64) -> Result<TaskBundle> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(MdmError::invalid("separation must be positive"));
    }
    if class_count == 0 || dims == 0 {
        return Err(MdmError::invalid("class_count and dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = sample_centers(&mut rng, class_count, dims, separation)?;
    let train = draw(&mut rng, &centers, TRAIN_PER_CLASS);
    let val = draw(&mut rng, &centers, VAL_PER_CLASS);
    let test = draw(&mut rng, &centers, TEST_PER_CLASS);
    Ok(TaskBundle {
        task_id: format!("task-{seed}"),
        train,
        val,
        test,
        class_count,
        generator_seed: seed,
        dims,
        input_width: dims,
        feature_offset: 0,
        head_offset: 0,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid_accuracy(t: &TaskBundle, ds: &Dataset) -> f64 {
        let mut correct = 0;
        for (x, y) in ds.inputs.iter().zip(&ds.labels) {
            let x = &x[t.feature_offset..t.feature_offset + t.dims];
            let best = t
                .centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(best == *y);
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn well_separated_task_is_centroid_separable() {
        let t = make_task(3, 5, 16, 8.0).unwrap();
        assert!(nearest_centroid_accuracy(&t, &t.test) >= 0.99);
        assert_eq!(t.train.len(), 5 * TRAIN_PER_CLASS);
        assert_eq!(t.val.len(), 5 * VAL_PER_CLASS);
        assert_eq!(t.test.len(), 5 * TEST_PER_CLASS);
    }

    #[test]
    fn centers_respect_separation() {
        let t = make_task(9, 6, 4, 3.0).unwrap();
        for i in 0..6 {
            for j in (i + 1)..6 {
                let d: f64 = t.centers[i]
                    .iter()
                    .zip(&t.centers[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 3.0);
            }
        }
    }

    #[test]
    fn deterministic_from_seed() {
        assert_eq!(make_task(4, 3, 5, 2.0).unwrap(), make_task(4, 3, 5, 2.0).unwrap());
        assert_ne!(make_task(4, 3, 5, 2.0).unwrap(), make_task(5, 3, 5, 2.0).unwrap());
    }

    #[test]
    fn single_class() {
        let t = make_task(1, 1, 3, 1.0).unwrap();
        assert!(t.train.labels.iter().all(|&l| l == 0));
        assert_eq!(nearest_centroid_accuracy(&t, &t.test), 1.0);
    }

    #[test]
    fn bad_arguments() {
        assert!(make_task(1, 3, 2, 0.0).is_err());
        assert!(make_task(1, 3, 2, f64::NAN).is_err());
        assert!(make_task(1, 0, 2, 1.0).is_err());
    }

    #[test]
    fn embedding_moves_features() {
        let t = make_task(2, 2, 3, 4.0).unwrap();
        let orig = t.train.inputs[5].clone();
        let e = t.clone().embed(10, 4, 6).unwrap();
        let x = &e.train.inputs[5];
        assert_eq!(x.len(), 10);
        assert_eq!(&x[4..7], &orig[..]);
        assert!(x[..4].iter().chain(&x[7..]).all(|v| *v == 0.0));
        assert_eq!(e.head(), 6..8);
        assert!(t.embed(5, 4, 0).is_err());
    }

    #[test]
    fn input_mean_oracle() {
        let ds = Dataset {
            inputs: vec![vec![1.0, 2.0], vec![3.0, -2.0]],
            labels: vec![0, 0],
        };
        assert_eq!(ds.input_mean(), vec![2.0, 0.0]);
    }
}
