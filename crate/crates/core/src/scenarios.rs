//! Task streams: class splits, synthetic drifting blobs and IDX ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ClassId;
use crate::rng::{child_seed, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub class: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_dim: usize,
    /// Class ids are `0..num_classes`.
    pub num_classes: usize,
}

impl Dataset {
    pub fn classes(&self) -> Vec<ClassId> {
        (0..self.num_classes).collect()
    }

    pub fn count_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.class] += 1;
        }
        counts
    }
}

/// Disjoint train and test portions over the same class set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Labeled data of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Zero-based position in the stream.
    pub index: usize,
    /// Sorted class ids of this task.
    pub classes: Vec<ClassId>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitKind {
    Equal {
        tasks: usize,
    },
    LargeFirst {
        tasks: usize,
        first_fraction: f64,
    },
}

impl SplitKind {
    pub fn tasks(&self) -> usize {
        match self {
            SplitKind::Equal { tasks } | SplitKind::LargeFirst { tasks, .. } => *tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplitSpec {
    pub kind: SplitKind,
    /// Fisher–Yates seed for the class order; `None` keeps ids in order.
    pub class_order_seed: Option<u64>,
}

fn spread_evenly(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// Class counts per task for `num_classes` classes.
pub fn task_sizes(kind: &SplitKind, num_classes: usize) -> Result<Vec<usize>> {
    let too_many = |tasks| Error::TooManyTasks {
        tasks,
        classes: num_classes,
    };
    match *kind {
        SplitKind::Equal { tasks } => {
            if tasks == 0 || tasks > num_classes {
                return Err(too_many(tasks));
            }
            Ok(spread_evenly(num_classes, tasks))
        }
        SplitKind::LargeFirst {
            tasks,
            first_fraction,
        } => {
            if !(0.0..=1.0).contains(&first_fraction) {
                return Err(Error::Config("first_fraction must lie in [0, 1]".into()));
            }
            if tasks == 0 || tasks > num_classes {
                return Err(too_many(tasks));
            }
            if tasks == 1 {
                return Ok(vec![num_classes]);
            }
            let first = (first_fraction * num_classes as f64).round() as usize;
            if first == 0 || num_classes - first.min(num_classes) < tasks - 1 {
                return Err(too_many(tasks));
            }
            let mut sizes = vec![first];
            sizes.extend(spread_evenly(num_classes - first, tasks - 1));
            Ok(sizes)
        }
    }
}

/// Partitions the classes into tasks and routes samples accordingly.
pub fn make_split(data: &SplitDataset, spec: &TaskSplitSpec) -> Result<Vec<TaskData>> {
    let n = data.train.num_classes;
    let sizes = task_sizes(&spec.kind, n)?;
    let mut order: Vec<ClassId> = (0..n).collect();
    if let Some(seed) = spec.class_order_seed {
        SeededRng::new(seed).shuffle(&mut order);
    }
    let mut task_of = vec![0usize; n];
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (t, size) in sizes.iter().enumerate() {
        let mut classes = order[start..start + size].to_vec();
        classes.sort_unstable();
        for c in &classes {
            task_of[*c] = t;
        }
        tasks.push(TaskData {
            index: t,
            classes,
            train: Vec::new(),
            test: Vec::new(),
        });
        start += size;
    }
    for s in &data.train.samples {
        tasks[task_of[s.class]].train.push(s.clone());
    }
    for s in &data.test.samples {
        if s.class >= n {
            return Err(Error::MissingClass(s.class));
        }
        tasks[task_of[s.class]].test.push(s.clone());
    }
    Ok(tasks)
}

/// Per-task rigid motion applied to class groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    /// Rotation (radians) added per task in every coordinate plane `(2i, 2i+1)`.
    pub angle: f64,
    /// Translation length added per task along a fixed seeded direction.
    pub translation: f64,
    /// Classes `[j·n, (j+1)·n)` form drift group `j`.
    pub classes_per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub input_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub spread: f64,
    /// Scale of each class's covariance factor.
    pub cov_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Random correlated covariance per class instead of `cov_scale²·I`.
    #[serde(default = "default_true")]
    pub anisotropic: bool,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    /// Set by the caller; not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input_dim == 0 {
            return Err(Error::Config("blobs need classes and input_dim > 0".into()));
        }
        if !(self.spread > 0.0) || !(self.cov_scale >= 0.0) {
            return Err(Error::Config("spread must be > 0 and cov_scale ≥ 0".into()));
        }
        if self.train_per_class < 2 || self.test_per_class < 1 {
            return Err(Error::Config(
                "need ≥ 2 training and ≥ 1 test samples per class".into(),
            ));
        }
        if let Some(d) = &self.drift {
            if d.classes_per_task == 0 || !d.angle.is_finite() || !d.translation.is_finite() {
                return Err(Error::Config("invalid drift".into()));
            }
        }
        Ok(())
    }
}

/// Ground truth of one synthetic class after drift.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobClass {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
}

/// Rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Isometry {
    dim: usize,
    rotation: Vec<f64>,
    shift: Vec<f64>,
}

impl Isometry {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.shift[i]
                    + self.rotation[i * self.dim..(i + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(r, v)| r * v)
                        .sum::<f64>()
            })
            .collect()
    }

    fn rotate_cov(&self, cov: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let r = &self.rotation;
        let mut tmp = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                tmp[i * d + j] = (0..d).map(|k| r[i * d + k] * cov[k * d + j]).sum();
            }
        }
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| tmp[i * d + k] * r[j * d + k]).sum();
            }
        }
        out
    }
}

/// Transform for drift group `group`: every plane `(2i, 2i+1)` rotated by
/// `group·angle`, then shifted by `group·translation` along `direction`.
pub fn drift_transform(spec: &DriftSpec, dim: usize, direction: &[f64], group: usize) -> Isometry {
    let theta = spec.angle * group as f64;
    let (s, c) = theta.sin_cos();
    let mut rotation = vec![0.0; dim * dim];
    for i in 0..dim {
        rotation[i * dim + i] = 1.0;
    }
    for p in 0..dim / 2 {
        let (a, b) = (2 * p, 2 * p + 1);
        rotation[a * dim + a] = c;
        rotation[a * dim + b] = -s;
        rotation[b * dim + a] = s;
        rotation[b * dim + b] = c;
    }
    let shift = direction
        .iter()
        .map(|u| u * spec.translation * group as f64)
        .collect();
    Isometry {
        dim,
        rotation,
        shift,
    }
}

struct BlobDraw {
    truth: Vec<BlobClass>,
    data: SplitDataset,
}

fn generate_blobs(spec: &BlobSpec) -> Result<BlobDraw> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = SeededRng::new(spec.seed);
    let mut truth = Vec::with_capacity(spec.classes);
    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);

    // Generation order: per class, mean, covariance factor, train draws, test draws.
    for class in 0..spec.classes {
        let mean: Vec<f64> = (0..d).map(|_| spec.spread * rng.normal()).collect();
        let factor: Vec<f64> = if spec.anisotropic {
            let scale = spec.cov_scale / (d as f64).sqrt();
            (0..d * d).map(|_| scale * rng.normal()).collect()
        } else {
            let mut f = vec![0.0; d * d];
            for i in 0..d {
                f[i * d + i] = spec.cov_scale;
            }
            f
        };
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| factor[i * d + k] * factor[j * d + k]).sum();
            }
        }
        let draw = |rng: &mut SeededRng| -> Vec<f64> {
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            (0..d)
                .map(|i| mean[i] + (0..d).map(|k| factor[i * d + k] * z[k]).sum::<f64>())
                .collect()
        };
        for _ in 0..spec.train_per_class {
            train.push(Sample {
                x: draw(&mut rng),
                class,
            });
        }
        for _ in 0..spec.test_per_class {
            test.push(Sample {
                x: draw(&mut rng),
                class,
            });
        }
        truth.push(BlobClass { mean, cov });
    }

    if let Some(drift) = &spec.drift {
        let mut drng = SeededRng::new(child_seed(spec.seed, 0xD81F));
        let mut dir: Vec<f64> = (0..d).map(|_| drng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for v in &mut dir {
            *v /= norm;
        }
        let groups = spec.classes.div_ceil(drift.classes_per_task);
        let transforms: Vec<Isometry> = (0..groups)
            .map(|g| drift_transform(drift, d, &dir, g))
            .collect();
        for s in train.iter_mut().chain(test.iter_mut()) {
            s.x = transforms[s.class / drift.classes_per_task].apply(&s.x);
        }
        for (class, t) in truth.iter_mut().enumerate() {
            let tr = &transforms[class / drift.classes_per_task];
            t.mean = tr.apply(&t.mean);
            t.cov = tr.rotate_cov(&t.cov);
        }
    }

    let mk = |samples| Dataset {
        samples,
        input_dim: d,
        num_classes: spec.classes,
    };
    Ok(BlobDraw {
        truth,
        data: SplitDataset {
            train: mk(train),
            test: mk(test),
        },
    })
}

/// Seeded Gaussian blobs, one per class, with optional per-group drift.
pub fn synth_blobs(spec: &BlobSpec) -> Result<SplitDataset> {
    Ok(generate_blobs(spec)?.data)
}

/// The generating means and covariances behind [`synth_blobs`].
pub fn blob_truth(spec: &BlobSpec) -> Result<Vec<BlobClass>> {
    Ok(generate_blobs(spec)?.truth)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what} header")))
}

/// Decodes IDX image and label buffers; pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let lmagic = be_u32(labels, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let n_images = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let pixels = images
        .get(16..16 + n_images * dim)
        .ok_or_else(|| Error::TruncatedFile("image data".into()))?;
    let label_bytes = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| Error::TruncatedFile("label data".into()))?;
    let samples: Vec<Sample> = pixels
        .chunks_exact(dim.max(1))
        .take(n_images)
        .zip(label_bytes)
        .map(|(px, &l)| Sample {
            x: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            class: l as ClassId,
        })
        .collect();
    let num_classes = samples.iter().map(|s| s.class + 1).max().unwrap_or(0);
    Ok(Dataset {
        samples,
        input_dim: dim,
        num_classes,
    })
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;
    parse_idx(&img, &lab)
}

/// Keeps at most `per_class` samples of each class, in file order.
pub fn cap_per_class(data: &mut Dataset, per_class: usize) {
    let mut seen = vec![0usize; data.num_classes];
    data.samples.retain(|s| {
        seen[s.class] += 1;
        seen[s.class] <= per_class
    });
}
