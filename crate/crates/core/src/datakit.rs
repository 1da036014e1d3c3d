//! Datasets, labeled/unlabeled splits, synthetic blobs and batch iteration.
//!
//! Training code only ever sees an [`UnlabeledPool`] through its inputs; the
//! labels it carries are reachable through [`UnlabeledPool::eval_labels`],
//! which the trainer calls only from its evaluation path.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Vector(usize),
    /// Height × width × channels, stored row-major with channels innermost.
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl InputShape {
    pub fn numel(self) -> usize {
        match self {
            InputShape::Vector(d) => d,
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    /// `"8"` for vectors, `"32x32x3"` for images.
    pub fn to_manifest(self) -> String {
        match self {
            InputShape::Vector(d) => d.to_string(),
            InputShape::Image {
                height,
                width,
                channels,
            } => format!("{height}x{width}x{channels}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("input_shape", s))?;
        match dims.as_slice() {
            [d] if *d > 0 => Ok(InputShape::Vector(*d)),
            [h, w, c] if *h > 0 && *w > 0 && *c > 0 => Ok(InputShape::Image {
                height: *h,
                width: *w,
                channels: *c,
            }),
            _ => Err(Error::format("input_shape", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    name: String,
    shape: InputShape,
    n_classes: usize,
    inputs: Tensor<T>,
    labels: Vec<u32>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        name: impl Into<String>,
        shape: InputShape,
        n_classes: usize,
        inputs: Tensor<T>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if inputs.cols() != shape.numel() {
            return Err(Error::ShapeMismatch {
                context: "dataset inputs".into(),
                expected: format!("{} features", shape.numel()),
                found: format!("{} features", inputs.cols()),
            });
        }
        if inputs.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: inputs.rows(),
                right: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            n_classes,
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }

    /// Standard deviation over every feature value of every sample.
    pub fn feature_std(&self) -> T {
        let data = self.inputs.data();
        if data.is_empty() {
            return T::zero();
        }
        let n = T::from_usize(data.len()).expect("length fits");
        let mean = data.iter().copied().sum::<T>() / n;
        let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        var.sqrt()
    }

    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            shape: self.shape,
            n_classes: self.n_classes,
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Unlabeled training pool. Labels ride along for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool<T> {
    data: Dataset<T>,
}

impl<T: Scalar> UnlabeledPool<T> {
    pub fn from_dataset(data: Dataset<T>) -> Self {
        Self { data }
    }

    pub fn inputs(&self) -> &Tensor<T> {
        self.data.inputs()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.data.shape()
    }

    pub fn n_classes(&self) -> usize {
        self.data.n_classes()
    }

    /// Ground truth for pseudo-label quality metrics. Not for training.
    pub fn eval_labels(&self) -> &[u32] {
        self.data.labels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labels_per_class: usize,
    pub seed: u64,
    /// Keep labeled samples (labels stripped) in the unlabeled pool.
    #[serde(default = "default_true")]
    pub include_labeled_in_unlabeled: bool,
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn new(n_labels_per_class: usize, seed: u64) -> Self {
        Self {
            n_labels_per_class,
            seed,
            include_labeled_in_unlabeled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSplit<T> {
    pub labeled: Dataset<T>,
    pub unlabeled: UnlabeledPool<T>,
    /// Source indices of the labeled samples, class-major.
    pub labeled_indices: Vec<usize>,
}

/// Draws `n_labels_per_class` samples of every class uniformly without
/// replacement.
pub fn split_labeled<T: Scalar>(dataset: &Dataset<T>, spec: SplitSpec) -> Result<LabeledSplit<T>> {
    if spec.n_labels_per_class == 0 {
        return Err(Error::invalid("n_labels_per_class must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut labeled_indices = Vec::with_capacity(spec.n_labels_per_class * by_class.len());
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < spec.n_labels_per_class {
            return Err(Error::ClassUnderflow {
                class,
                available: members.len(),
                requested: spec.n_labels_per_class,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        labeled_indices.extend_from_slice(&members[..spec.n_labels_per_class]);
    }
    let labeled = dataset.subset(&labeled_indices, format!("{}-labeled", dataset.name()));
    let unlabeled = if spec.include_labeled_in_unlabeled {
        dataset.clone()
    } else {
        let mut taken = vec![false; dataset.len()];
        for &i in &labeled_indices {
            taken[i] = true;
        }
        let rest: Vec<usize> = (0..dataset.len()).filter(|&i| !taken[i]).collect();
        dataset.subset(&rest, format!("{}-unlabeled", dataset.name()))
    };
    Ok(LabeledSplit {
        labeled,
        unlabeled: UnlabeledPool::from_dataset(unlabeled),
        labeled_indices,
    })
}

/// Class centers for the synthetic blobs. Every pair is at least
/// `separation` apart and the centers are zero-mean.
pub fn class_means(n_classes: usize, input_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let k = n_classes;
    let mut means = vec![vec![0.0; input_dim]; k];
    if k <= input_dim {
        // regular simplex on scaled basis vectors: |e_a − e_b|·s/√2 = s
        let s = separation / std::f64::consts::SQRT_2;
        for (c, m) in means.iter_mut().enumerate() {
            m[c] = s;
        }
    } else if input_dim >= 2 {
        // adjacent chord of a regular k-gon equals the separation
        let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
        for (c, m) in means.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            m[0] = radius * angle.cos();
            m[1] = radius * angle.sin();
        }
    } else {
        for (c, m) in means.iter_mut().enumerate() {
            m[0] = c as f64 * separation;
        }
    }
    for d in 0..input_dim {
        let centroid = means.iter().map(|m| m[d]).sum::<f64>() / k as f64;
        for m in means.iter_mut() {
            m[d] -= centroid;
        }
    }
    means
}

/// Isotropic Gaussian blobs around [`class_means`], class-major order.
pub fn make_synthetic<T: Scalar>(
    n_classes: usize,
    n_per_class: usize,
    input_dim: usize,
    class_separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_classes == 0 || n_per_class == 0 || input_dim == 0 {
        return Err(Error::invalid("synthetic counts must be positive"));
    }
    if class_separation <= 0.0 || class_separation.is_nan() {
        return Err(Error::invalid("class_separation must be positive"));
    }
    if noise_sigma < 0.0 || noise_sigma.is_nan() {
        return Err(Error::invalid("noise_sigma must be non-negative"));
    }
    let means = class_means(n_classes, input_dim, class_separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(T::lit(m + noise_sigma * z));
            }
            labels.push(class as u32);
        }
    }
    Dataset::new(
        format!("blobs-{n_classes}x{n_per_class}-d{input_dim}-s{seed}"),
        InputShape::Vector(input_dim),
        n_classes,
        Tensor::from_vec(n, input_dim, data),
        labels,
    )
}

/// Index-level contents of one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Materialized batch: `B` labeled samples and `μ·B` unlabeled ones.
#[derive(Debug, Clone)]
pub struct BatchPair<T> {
    pub labeled_inputs: Tensor<T>,
    pub labels: Vec<u32>,
    pub unlabeled_inputs: Tensor<T>,
}

impl BatchIndices {
    pub fn materialize<T: Scalar>(
        &self,
        labeled: &Dataset<T>,
        unlabeled: &UnlabeledPool<T>,
    ) -> BatchPair<T> {
        BatchPair {
            labeled_inputs: labeled.inputs().select_rows(&self.labeled),
            labels: self.labeled.iter().map(|&i| labeled.labels()[i]).collect(),
            unlabeled_inputs: unlabeled.inputs().select_rows(&self.unlabeled),
        }
    }
}

/// Position of an epoch-permutation cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CursorState {
    pub epoch: u64,
    pub pos: usize,
}

#[derive(Debug, Clone)]
struct PoolCursor {
    len: usize,
    seed: u64,
    pool_id: u64,
    state: CursorState,
    perm: Vec<usize>,
}

impl PoolCursor {
    fn new(len: usize, seed: u64, pool_id: u64, state: CursorState) -> Self {
        let mut c = Self {
            len,
            seed,
            pool_id,
            state,
            perm: Vec::new(),
        };
        c.perm = c.permutation(state.epoch);
        c
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.pool_id << 48) ^ epoch);
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng);
        perm
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.state.pos == self.len {
                self.state.epoch += 1;
                self.state.pos = 0;
                self.perm = self.permutation(self.state.epoch);
            }
            let n = (count - out.len()).min(self.len - self.state.pos);
            out.extend_from_slice(&self.perm[self.state.pos..self.state.pos + n]);
            self.state.pos += n;
        }
        out
    }
}

/// Serializable iterator position, for checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIterState {
    pub labeled: CursorState,
    pub unlabeled: CursorState,
}

impl Default for BatchIterState {
    fn default() -> Self {
        let start = CursorState { epoch: 0, pos: 0 };
        Self {
            labeled: start,
            unlabeled: start,
        }
    }
}

/// Infinite stream of batch indices. Each pool is walked through seeded
/// per-epoch permutations; a batch larger than what is left of the current
/// epoch wraps into the next one, so small pools repeat within a batch.
#[derive(Debug, Clone)]
pub struct BatchIter {
    batch_size: usize,
    mu: usize,
    labeled: PoolCursor,
    unlabeled: PoolCursor,
}

impl BatchIter {
    pub fn new(
        labeled_len: usize,
        unlabeled_len: usize,
        batch_size: usize,
        mu: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::with_state(
            labeled_len,
            unlabeled_len,
            batch_size,
            mu,
            seed,
            BatchIterState::default(),
        )
    }

    pub fn with_state(
        labeled_len: usize,
        unlabeled_len: usize,
        batch_size: usize,
        mu: usize,
        seed: u64,
        state: BatchIterState,
    ) -> Result<Self> {
        if labeled_len == 0 {
            return Err(Error::EmptyPool("labeled"));
        }
        if unlabeled_len == 0 {
            return Err(Error::EmptyPool("unlabeled"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(Self {
            batch_size,
            mu,
            labeled: PoolCursor::new(labeled_len, seed, 0, state.labeled),
            unlabeled: PoolCursor::new(unlabeled_len, seed, 1, state.unlabeled),
        })
    }

    pub fn state(&self) -> BatchIterState {
        BatchIterState {
            labeled: self.labeled.state,
            unlabeled: self.unlabeled.state,
        }
    }
}

impl Iterator for BatchIter {
    type Item = BatchIndices;

    fn next(&mut self) -> Option<BatchIndices> {
        let labeled = self.labeled.take(self.batch_size);
        let unlabeled = self.unlabeled.take(self.mu * self.batch_size);
        Some(BatchIndices { labeled, unlabeled })
    }
}

/// Convenience constructor over a labeled set and an unlabeled pool.
pub fn batch_iter<T: Scalar>(
    labeled: &Dataset<T>,
    unlabeled: &UnlabeledPool<T>,
    batch_size: usize,
    mu: usize,
    seed: u64,
) -> Result<BatchIter> {
    BatchIter::new(labeled.len(), unlabeled.len(), batch_size, mu, seed)
}

/// Paths of the three files making up an on-disk dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub inputs: PathBuf,
    pub labels: PathBuf,
}

impl DatasetFiles {
    /// `<dir>/<stem>.manifest`, `<dir>/<stem>.inputs.bin`, `<dir>/<stem>.labels.bin`.
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            manifest: dir.join(format!("{stem}.manifest")),
            inputs: dir.join(format!("{stem}.inputs.bin")),
            labels: dir.join(format!("{stem}.labels.bin")),
        }
    }
}

/// Writes the manifest plus little-endian `f32` inputs and `u32` labels.
pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, dir: &Path, stem: &str) -> Result<DatasetFiles> {
    fs::create_dir_all(dir)?;
    let files = DatasetFiles::in_dir(dir, stem);
    let file_name = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let manifest = format!(
        "name={}\ncount={}\nclasses={}\ninput_shape={}\ndtype=f32\ninputs={}\nlabels={}\n",
        dataset.name(),
        dataset.len(),
        dataset.n_classes(),
        dataset.shape().to_manifest(),
        file_name(&files.inputs),
        file_name(&files.labels),
    );
    fs::write(&files.manifest, manifest)?;
    let mut inputs = Vec::with_capacity(dataset.inputs().len() * 4);
    for &v in dataset.inputs().data() {
        inputs.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(&files.inputs, inputs)?;
    let mut labels = Vec::with_capacity(dataset.len() * 4);
    for &y in dataset.labels() {
        labels.extend_from_slice(&y.to_le_bytes());
    }
    fs::write(&files.labels, labels)?;
    Ok(files)
}

/// Loads a dataset from its manifest, validating byte counts against it.
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<Dataset<T>> {
    let text = fs::read_to_string(manifest_path)?;
    let mut name = None;
    let mut count = None;
    let mut classes = None;
    let mut shape = None;
    let mut dtype = DType::F32;
    let mut inputs_file = None;
    let mut labels_file = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format("manifest", format!("line {}: expected key=value", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::format("manifest", format!("{k}={v}")))
        };
        match k {
            "name" => name = Some(v.to_string()),
            "count" => count = Some(parse_usize(v)?),
            "classes" => classes = Some(parse_usize(v)?),
            "input_shape" => shape = Some(InputShape::parse(v)?),
            "dtype" => {
                dtype = DType::parse(v).ok_or_else(|| Error::format("manifest dtype", v))?
            }
            "inputs" => inputs_file = Some(v.to_string()),
            "labels" => labels_file = Some(v.to_string()),
            _ => {}
        }
    }
    let missing = |key: &str| Error::format("manifest", format!("missing key `{key}`"));
    let name = name.ok_or_else(|| missing("name"))?;
    let count = count.ok_or_else(|| missing("count"))?;
    let classes = classes.ok_or_else(|| missing("classes"))?;
    let shape = shape.ok_or_else(|| missing("input_shape"))?;

    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let stem = manifest_path
        .file_name()
        .map(|s| s.to_string_lossy().trim_end_matches(".manifest").to_string())
        .unwrap_or_default();
    let inputs_path = dir.join(inputs_file.unwrap_or_else(|| format!("{stem}.inputs.bin")));
    let labels_path = dir.join(labels_file.unwrap_or_else(|| format!("{stem}.labels.bin")));

    let raw = fs::read(&inputs_path)?;
    let expected = count * shape.numel() * dtype.size();
    if raw.len() != expected {
        return Err(Error::format(
            "inputs file",
            format!("{} bytes, manifest implies {expected}", raw.len()),
        ));
    }
    let values: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    let raw_labels = fs::read(&labels_path)?;
    if raw_labels.len() != count * 4 {
        return Err(Error::format(
            "labels file",
            format!("{} bytes, manifest implies {}", raw_labels.len(), count * 4),
        ));
    }
    let labels = raw_labels
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(
        name,
        shape,
        classes,
        Tensor::from_vec(count, shape.numel(), values),
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Dataset<f64> {
        make_synthetic(4, 25, 3, 3.0, 0.5, 11).unwrap()
    }

    #[test]
    fn split_counts_per_class() {
        let data = blobs();
        let split = split_labeled(&data, SplitSpec::new(4, 7)).unwrap();
        assert_eq!(split.labeled.len(), 16);
        assert_eq!(split.labeled.class_counts(), vec![4; 4]);
        assert_eq!(split.unlabeled.len(), 100);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let data = blobs();
        let a = split_labeled(&data, SplitSpec::new(4, 7)).unwrap();
        let b = split_labeled(&data, SplitSpec::new(4, 7)).unwrap();
        assert_eq!(a.labeled_indices, b.labeled_indices);
        let mut idx = a.labeled_indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 16);
        assert!(idx.iter().all(|&i| i < data.len()));
        let c = split_labeled(&data, SplitSpec::new(4, 8)).unwrap();
        assert_ne!(a.labeled_indices, c.labeled_indices);
    }

    #[test]
    fn split_can_exclude_labeled() {
        let data = blobs();
        let mut spec = SplitSpec::new(5, 1);
        spec.include_labeled_in_unlabeled = false;
        let split = split_labeled(&data, spec).unwrap();
        assert_eq!(split.unlabeled.len(), 80);
    }

    #[test]
    fn split_underflow() {
        let data = blobs();
        let err = split_labeled(&data, SplitSpec::new(30, 1)).unwrap_err();
        assert!(matches!(
            err,
            Error::ClassUnderflow {
                available: 25,
                requested: 30,
                ..
            }
        ));
    }

    #[test]
    fn zero_noise_collapses_to_means() {
        let data: Dataset<f64> = make_synthetic(3, 5, 4, 2.0, 0.0, 3).unwrap();
        let means = class_means(3, 4, 2.0);
        for (row, &y) in data.inputs().iter_rows().zip(data.labels()) {
            assert_eq!(row, means[y as usize].as_slice());
        }
    }

    #[test]
    fn class_means_respect_separation() {
        for &(k, d) in &[(4, 2), (4, 8), (3, 1), (10, 3), (2, 2)] {
            let means = class_means(k, d, 5.0);
            for a in 0..k {
                for b in a + 1..k {
                    let dist: f64 = means[a]
                        .iter()
                        .zip(&means[b])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 5.0 - 1e-9, "k={k} d={d} dist={dist}");
                }
            }
        }
    }

    #[test]
    fn batches_have_exact_sizes() {
        let mut it = BatchIter::new(16, 100, 64, 7, 3).unwrap();
        for _ in 0..5 {
            let b = it.next().unwrap();
            assert_eq!(b.labeled.len(), 64);
            assert_eq!(b.unlabeled.len(), 448);
            // 64 draws from a pool of 16 must repeat
            let mut uniq = b.labeled.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 16);
        }
    }

    #[test]
    fn batch_iter_resumes_from_state() {
        let mut a = BatchIter::new(10, 37, 4, 3, 9).unwrap();
        for _ in 0..7 {
            a.next();
        }
        let state = a.state();
        let mut b = BatchIter::with_state(10, 37, 4, 3, 9, state).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next(), b.next());
        }
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(matches!(
            BatchIter::new(0, 10, 2, 1, 0),
            Err(Error::EmptyPool("labeled"))
        ));
        assert!(matches!(
            BatchIter::new(3, 0, 2, 1, 0),
            Err(Error::EmptyPool("unlabeled"))
        ));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Dataset<f32> = make_synthetic(3, 4, 2, 1.0, 0.3, 5).unwrap();
        let files = save_dataset(&data, dir.path(), "train").unwrap();
        let back: Dataset<f32> = load_dataset(&files.manifest).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_inputs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data: Dataset<f64> = make_synthetic(2, 3, 2, 1.0, 0.3, 5).unwrap();
        let files = save_dataset(&data, dir.path(), "d").unwrap();
        let mut raw = fs::read(&files.inputs).unwrap();
        raw.truncate(raw.len() - 4);
        fs::write(&files.inputs, raw).unwrap();
        assert!(matches!(
            load_dataset::<f64>(&files.manifest),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn input_shape_parsing() {
        assert_eq!(InputShape::parse("8").unwrap(), InputShape::Vector(8));
        let img = InputShape::parse("32x32x3").unwrap();
        assert_eq!(img.numel(), 3072);
        assert_eq!(img.to_manifest(), "32x32x3");
        assert!(InputShape::parse("3x3").is_err());
    }
}
