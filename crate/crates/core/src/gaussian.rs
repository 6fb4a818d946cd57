//! Per-class Gaussian models in an expert's latent space.
//!
//! Each class is summarised by its sample mean and a shrunk sample
//! covariance; scoring uses the Gaussian log-density and expert selection
//! uses the symmetrized KL divergence between class models.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, shrink, trace_solve, CholFactor, SpdMatrix};

pub type ClassId = usize;

/// How a class is represented in latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationMode {
    #[default]
    #[serde(alias = "full")]
    FullCovariance,
    #[serde(alias = "diag")]
    DiagonalCovariance,
    /// Mean only; scored as a nearest-mean classifier.
    Prototype,
}

impl RepresentationMode {
    pub fn name(self) -> &'static str {
        match self {
            RepresentationMode::FullCovariance => "full",
            RepresentationMode::DiagonalCovariance => "diag",
            RepresentationMode::Prototype => "prototype",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            RepresentationMode::FullCovariance => 0,
            RepresentationMode::DiagonalCovariance => 1,
            RepresentationMode::Prototype => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(RepresentationMode::FullCovariance),
            1 => Some(RepresentationMode::DiagonalCovariance),
            2 => Some(RepresentationMode::Prototype),
            _ => None,
        }
    }
}

impl std::str::FromStr for RepresentationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full-covariance" => Ok(RepresentationMode::FullCovariance),
            "diag" | "diagonal" | "diagonal-covariance" => {
                Ok(RepresentationMode::DiagonalCovariance)
            }
            "prototype" | "nmc" => Ok(RepresentationMode::Prototype),
            other => Err(Error::Config(format!("unknown representation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Covariance {
    matrix: SpdMatrix,
    chol: CholFactor,
    logdet: f64,
}

impl Covariance {
    fn new(matrix: SpdMatrix) -> Result<Self> {
        let chol = cholesky(&matrix)?;
        let logdet = log_det(&chol);
        Ok(Self {
            matrix,
            chol,
            logdet,
        })
    }
}

/// One class's model: mean plus (unless prototype) covariance with its
/// cached Cholesky factor and log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    mean: Vec<f64>,
    cov: Option<Covariance>,
    mode: RepresentationMode,
}

impl ClassGaussian {
    /// Builds from explicit parameters. `cov` must be `None` exactly when
    /// `mode` is `Prototype`.
    pub fn new(mean: Vec<f64>, cov: Option<SpdMatrix>, mode: RepresentationMode) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let cov = match (mode, cov) {
            (RepresentationMode::Prototype, None) => None,
            (RepresentationMode::Prototype, Some(_)) => {
                return Err(Error::UnsupportedMode("prototype"))
            }
            (_, None) => {
                return Err(Error::Config(
                    "covariance required for non-prototype mode".into(),
                ))
            }
            (_, Some(m)) => {
                if m.dim() != mean.len() {
                    return Err(Error::DimensionMismatch {
                        expected: mean.len(),
                        got: m.dim(),
                    });
                }
                Some(Covariance::new(m)?)
            }
        };
        Ok(Self { mean, cov, mode })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mode(&self) -> RepresentationMode {
        self.mode
    }

    pub fn cov(&self) -> Option<&SpdMatrix> {
        self.cov.as_ref().map(|c| &c.matrix)
    }

    pub fn log_det(&self) -> Option<f64> {
        self.cov.as_ref().map(|c| c.logdet)
    }

    /// Number of stored scalars: mean plus the covariance diagonal or triangle.
    pub fn param_count(&self) -> usize {
        let s = self.dim();
        match self.mode {
            RepresentationMode::Prototype => s,
            RepresentationMode::DiagonalCovariance => 2 * s,
            RepresentationMode::FullCovariance => s + s * (s + 1) / 2,
        }
    }
}

/// Fits a class model to latent samples.
///
/// Covariance is the unbiased sample covariance (divisor `n − 1`), reduced to
/// its diagonal in `DiagonalCovariance` mode, then shrunk by `eps`. If the
/// shrunk matrix still fails to factor, the ridge is raised tenfold until it
/// does.
pub fn fit_gaussian(
    samples: &[&[f64]],
    mode: RepresentationMode,
    eps: f64,
) -> Result<ClassGaussian> {
    let needed = if mode == RepresentationMode::Prototype { 1 } else { 2 };
    if samples.len() < needed {
        return Err(Error::TooFewSamples {
            needed,
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    if dim == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    if mode == RepresentationMode::Prototype {
        return ClassGaussian::new(mean, None, mode);
    }

    let mut data = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for s in samples {
        for (c, (v, m)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in 0..=i {
                data[i * dim + j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            let v = data[i * dim + j] / (n - 1.0);
            data[i * dim + j] = v;
            data[j * dim + i] = v;
        }
    }
    // Spread at rounding-noise level counts as no spread, so the ridge
    // falls back to the absolute floor instead of scaling with the noise.
    let scale = samples
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let noise = 64.0 * f64::EPSILON * scale;
    if (0..dim).all(|i| data[i * dim + i] <= noise * noise) {
        data.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut raw = SpdMatrix::from_row_major(dim, data)?;
    if mode == RepresentationMode::DiagonalCovariance {
        raw = raw.diagonal_part();
    }

    let mut ridge = eps;
    loop {
        let candidate = shrink(&raw, ridge);
        match Covariance::new(candidate) {
            Ok(cov) => {
                return Ok(ClassGaussian {
                    mean,
                    cov: Some(cov),
                    mode,
                })
            }
            Err(Error::NotPositiveDefinite { .. }) if ridge < 1.0 => {
                ridge = if ridge <= 0.0 { 1e-10 } else { ridge * 10.0 };
            }
            Err(e) => return Err(e),
        }
    }
}

/// Gaussian log-density of `r`; negative half squared distance for prototypes.
pub fn log_likelihood(g: &ClassGaussian, r: &[f64]) -> Result<f64> {
    if r.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: r.len(),
        });
    }
    let diff: Vec<f64> = r.iter().zip(&g.mean).map(|(a, b)| a - b).collect();
    Ok(match &g.cov {
        None => -0.5 * diff.iter().map(|d| d * d).sum::<f64>(),
        Some(c) => {
            let s = g.dim() as f64;
            -0.5 * (c.logdet + s * (2.0 * PI).ln() + c.chol.mahalanobis_sq(&diff))
        }
    })
}

/// `KL(p‖q) + KL(q‖p)`. The log-determinant terms cancel in the sum, leaving
/// `½[tr(Σq⁻¹Σp) + tr(Σp⁻¹Σq) + Δμᵀ(Σp⁻¹ + Σq⁻¹)Δμ] − S`.
pub fn sym_kl(p: &ClassGaussian, q: &ClassGaussian) -> Result<f64> {
    let (cp, cq) = match (&p.cov, &q.cov) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::UnsupportedMode("prototype")),
    };
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let s = p.dim() as f64;
    let delta: Vec<f64> = q.mean.iter().zip(&p.mean).map(|(a, b)| a - b).collect();
    let traces = trace_solve(&cq.chol, &cp.matrix) + trace_solve(&cp.chol, &cq.matrix);
    let maha = cq.chol.mahalanobis_sq(&delta) + cp.chol.mahalanobis_sq(&delta);
    Ok((0.5 * (traces + maha) - s).max(0.0))
}

/// One expert's class models, keyed by class id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassBank {
    classes: BTreeMap<ClassId, ClassGaussian>,
}

impl ClassBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a class model. All members must agree on
    /// dimension and mode.
    pub fn insert(&mut self, class: ClassId, g: ClassGaussian) -> Result<()> {
        if let Some((_, first)) = self.classes.iter().find(|(c, _)| **c != class) {
            if first.dim() != g.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    got: g.dim(),
                });
            }
            if first.mode() != g.mode() {
                return Err(Error::UnsupportedMode(g.mode().name()));
            }
        }
        self.classes.insert(class, g);
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassGaussian> {
        self.classes.get(&class)
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.classes.contains_key(&class)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &ClassGaussian)> {
        self.classes.iter().map(|(c, g)| (*c, g))
    }

    pub fn param_count(&self) -> usize {
        self.classes.values().map(ClassGaussian::param_count).sum()
    }
}

/// Sum of `sym_kl` over unordered pairs of the listed classes.
pub fn overlap_score(bank: &ClassBank, classes: &[ClassId]) -> Result<f64> {
    if classes.len() < 2 {
        return Err(Error::TooFewClasses(classes.len()));
    }
    let models = classes
        .iter()
        .map(|c| bank.get(*c).ok_or(Error::MissingClass(*c)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            total += sym_kl(models[i], models[j])?;
        }
    }
    Ok(total)
}
