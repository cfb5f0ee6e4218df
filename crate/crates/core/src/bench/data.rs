use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::Tensor;

/// Labelled token grids with disjoint train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    /// Global identity of each class; used to keep pretext and continual
    /// classes apart.
    pub class_keys: Vec<u64>,
    /// `[n_train, patch_tokens, token_dim]`
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

impl Dataset {
    /// SHA-256 over inputs and labels of both splits.
    pub fn fingerprint(&self) -> String {
        let labels = |y: &[usize]| Tensor::from_fn(&[y.len()], |i| y[i] as f64);
        let (a, b) = (labels(&self.train_y), labels(&self.test_y));
        crate::checkpoint::checksum([&self.train_x, &a, &self.test_x, &b])
    }
}

/// Class-conditional Gaussian token patterns built from shared parts.
///
/// A dictionary of prototype tokens is drawn once per seed. Each class
/// (identified by its key) owns a small set of distinct prototypes, its
/// parts. Every position of a sample shows one of the class's parts chosen
/// at random, or with probability `swap_prob` any prototype, plus isotropic
/// Gaussian noise. Classes are thus told apart by which parts occur, not
/// where. Classes drawn with different key ranges from the same seed share
/// the dictionary, so a backbone pretrained on one range learns part
/// detectors that transfer to another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub patch_tokens: usize,
    pub token_dim: usize,
    pub prototypes: usize,
    /// Distinct prototypes per class.
    pub parts: usize,
    /// Probability that a position shows a random prototype instead of one
    /// of the class's parts.
    pub swap_prob: f64,
    pub noise: f64,
    /// Key of class 0; classes get consecutive keys.
    pub key_offset: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            per_class_train: 100,
            per_class_test: 40,
            patch_tokens: 16,
            token_dim: 8,
            prototypes: 12,
            parts: 3,
            swap_prob: 0.3,
            noise: 1.0,
            key_offset: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn class_keys(&self) -> Vec<u64> {
        (0..self.num_classes as u64).map(|c| self.key_offset + c).collect()
    }

    fn dictionary(&self) -> Vec<Vec<f64>> {
        let mut r = rng::derive(self.seed, 0xd1c7);
        (0..self.prototypes).map(|_| (0..self.token_dim).map(|_| rng::normal(&mut r, 1.0)).collect()).collect()
    }

    /// Prototype indices making up class `key`, in draw order.
    pub fn class_parts(&self, key: u64) -> Vec<usize> {
        let mut r = rng::derive(self.seed, 0x1_0000_0000 + key);
        let mut all: Vec<usize> = (0..self.prototypes).collect();
        rng::shuffle(&mut r, &mut all);
        all.truncate(self.parts);
        all
    }

    /// Expected sample of class `key`, flattened; identical at every position.
    pub fn class_mean(&self, key: u64) -> Vec<f64> {
        let dict = self.dictionary();
        let parts = self.class_parts(key);
        let mut token = vec![0.0; self.token_dim];
        for (i, t) in token.iter_mut().enumerate() {
            let own = parts.iter().map(|&p| dict[p][i]).sum::<f64>() / parts.len() as f64;
            let any = dict.iter().map(|d| d[i]).sum::<f64>() / dict.len() as f64;
            *t = (1.0 - self.swap_prob) * own + self.swap_prob * any;
        }
        token.repeat(self.patch_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class_train == 0 || self.per_class_test == 0 {
            return Err(Error::Config("synthetic class and sample counts must be at least 1".into()));
        }
        if self.patch_tokens == 0 || self.token_dim == 0 || self.prototypes < 2 {
            return Err(Error::Config("synthetic data needs tokens, width and at least two prototypes".into()));
        }
        if self.parts == 0 || self.parts > self.prototypes {
            return Err(Error::Config(format!("parts must be in 1..={}", self.prototypes)));
        }
        if !(0.0..=1.0).contains(&self.swap_prob) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("swap_prob must be in [0, 1] and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let dict = self.dictionary();
        let (p, w) = (self.patch_tokens, self.token_dim);
        let pick = |r: &mut Rng, n: usize| ((rng::uniform(r, 0.0, 1.0) * n as f64) as usize).min(n - 1);
        let sample = |r: &mut Rng, parts: &[usize], out: &mut Vec<f64>| {
            for _ in 0..p {
                let proto = if rng::uniform(r, 0.0, 1.0) < self.swap_prob {
                    pick(r, self.prototypes)
                } else {
                    parts[pick(r, parts.len())]
                };
                for &m in &dict[proto] {
                    out.push(m + rng::normal(r, self.noise));
                }
            }
        };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
        for (c, key) in self.class_keys().into_iter().enumerate() {
            let parts = self.class_parts(key);
            let mut r = rng::derive(self.seed, 0x2_0000_0000 + key);
            for _ in 0..self.per_class_train {
                sample(&mut r, &parts, &mut train);
                train_y.push(c);
            }
            for _ in 0..self.per_class_test {
                sample(&mut r, &parts, &mut test);
                test_y.push(c);
            }
        }
        Ok(Dataset {
            num_classes: self.num_classes,
            class_keys: self.class_keys(),
            train_x: Tensor::new(&[train_y.len(), p, w], train)?,
            train_y,
            test_x: Tensor::new(&[test_y.len(), p, w], test)?,
            test_y,
        })
    }
}

/// Default-shaped synthetic dataset with the given counts and seed.
pub fn make_synthetic_dataset(num_classes: usize, per_class_train: usize, per_class_test: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec { num_classes, per_class_train, per_class_test, seed, ..SyntheticSpec::default() }.generate()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub class_order_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { num_tasks: 5, classes_per_task: 4, class_order_seed: 0 }
    }
}

/// One task: a contiguous block of remapped class indices and its data.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    /// Half-open remapped class range.
    pub classes: (usize, usize),
    /// Dataset class indices, in arrival order.
    pub source_classes: Vec<usize>,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub spec: SplitSpec,
    pub num_classes: usize,
    /// `class_order[k]` is the dataset class that becomes label `k`.
    pub class_order: Vec<usize>,
    pub tasks: Vec<Task>,
}

/// Permutes classes with the class-order seed and cuts them into consecutive
/// tasks; labels are remapped to arrival order so they stay dense.
pub fn split_tasks(data: &Dataset, spec: &SplitSpec) -> Result<TaskStream> {
    if spec.num_tasks == 0 || spec.classes_per_task == 0 {
        return Err(Error::Split("need at least one task and one class per task".into()));
    }
    if spec.num_tasks * spec.classes_per_task > data.num_classes {
        return Err(Error::Split(format!(
            "{} tasks x {} classes exceed the {} available classes",
            spec.num_tasks, spec.classes_per_task, data.num_classes
        )));
    }
    let mut order: Vec<usize> = (0..data.num_classes).collect();
    rng::shuffle(&mut rng::seeded(spec.class_order_seed), &mut order);
    let mut remap = vec![usize::MAX; data.num_classes];
    for (k, &c) in order.iter().enumerate() {
        remap[c] = k;
    }
    let pick = |x: &Tensor, y: &[usize], lo: usize, hi: usize| -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| (lo..hi).contains(&remap[y[i]])).collect();
        let labels = idx.iter().map(|&i| remap[y[i]]).collect();
        Ok((x.select_rows(&idx)?, labels))
    };
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let (lo, hi) = (t * spec.classes_per_task, (t + 1) * spec.classes_per_task);
        let (train_x, train_y) = pick(&data.train_x, &data.train_y, lo, hi)?;
        let (test_x, test_y) = pick(&data.test_x, &data.test_y, lo, hi)?;
        tasks.push(Task { index: t, classes: (lo, hi), source_classes: order[lo..hi].to_vec(), train_x, train_y, test_x, test_y });
    }
    order.truncate(spec.num_tasks * spec.classes_per_task);
    Ok(TaskStream { spec: spec.clone(), num_classes: data.num_classes, class_order: order, tasks })
}
