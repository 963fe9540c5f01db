//! Labeled token datasets: the synthetic union-of-subspaces generator and a
//! loader for directories of PGM images.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use super::config::{ModelConfig, SyntheticDatasetSpec};
use super::rng::{random_orthonormal, standard_normal, stream, stream_rng};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::pgm::PgmImage;

/// One input: `n × token_dim` tokens and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub token_dim: usize,
    pub tokens: usize,
    /// Per-class `d × p` orthonormal bases, present for synthetic data.
    pub bases: Option<Vec<DMatrix<f64>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices split per class: the last `fraction` of each class is held out.
    pub fn holdout_split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..self.num_classes {
            let idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            let held = (idx.len() as f64 * fraction).round() as usize;
            let cut = idx.len() - held.min(idx.len());
            train.extend_from_slice(&idx[..cut]);
            test.extend_from_slice(&idx[cut..]);
        }
        (train, test)
    }

    /// Errors with [`Error::Mismatch`] when the data cannot feed `model`.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        if self.token_dim != model.token_dim || self.tokens != model.tokens() || self.num_classes != model.num_classes {
            return Err(Error::Mismatch(format!(
                "data has {} tokens of dim {} over {} classes; model expects {} tokens of dim {} over {} classes",
                self.tokens,
                self.token_dim,
                self.num_classes,
                model.tokens(),
                model.token_dim,
                model.num_classes
            )));
        }
        Ok(())
    }
}

/// Draws one orthonormal basis per class (stream 1) and then the samples
/// (stream 2), class by class. Token `j` of a class-`c` sample is
/// `U_c α_j + σ w_j` with `α_j`, `w_j` standard normal.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut basis_rng = stream_rng(seed, stream::BASES);
    let bases = (0..spec.num_classes)
        .map(|_| random_orthonormal(spec.dim, spec.subspace_dim, &mut basis_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream_rng(seed, stream::SAMPLES);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for label in 0..bases.len() {
        for _ in 0..spec.samples_per_class {
            let assignment = vec![label; spec.tokens];
            samples.push(Sample {
                tokens: subspace_tokens(&bases, &assignment, spec.noise, &mut rng),
                label,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes,
        token_dim: spec.dim,
        tokens: spec.tokens,
        bases: Some(bases),
    })
}

/// Tokens with token `j` drawn from subspace `assignment[j]`.
pub fn subspace_tokens<R: Rng>(bases: &[DMatrix<f64>], assignment: &[usize], noise: f64, rng: &mut R) -> Tensor {
    let d = bases[0].nrows();
    let mut out = Tensor::zeros(assignment.len(), d);
    for (j, &c) in assignment.iter().enumerate() {
        let basis = &bases[c];
        let alpha: Vec<f64> = (0..basis.ncols()).map(|_| standard_normal(rng)).collect();
        let row = out.row_mut(j);
        for (i, v) in row.iter_mut().enumerate() {
            let signal: f64 = alpha.iter().enumerate().map(|(a, &x)| basis[(i, a)] * x).sum();
            *v = signal + noise * standard_normal(rng);
        }
    }
    out
}

/// Class with the largest projection energy `Σ_j ‖U_cᵀ z_j‖²`.
pub fn nearest_subspace(tokens: &Tensor, bases: &[DMatrix<f64>]) -> usize {
    let energy = |basis: &DMatrix<f64>| -> f64 {
        (0..tokens.rows())
            .map(|j| {
                let z = tokens.row(j);
                (0..basis.ncols())
                    .map(|a| {
                        let c: f64 = z.iter().enumerate().map(|(i, v)| basis[(i, a)] * v).sum();
                        c * c
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let mut best = (0, f64::NEG_INFINITY);
    for (c, basis) in bases.iter().enumerate() {
        let e = energy(basis);
        if e > best.1 {
            best = (c, e);
        }
    }
    best.0
}

/// Accuracy of [`nearest_subspace`] on the given samples.
pub fn nearest_subspace_accuracy(data: &Dataset, indices: &[usize]) -> Result<f64> {
    let bases = data
        .bases
        .as_ref()
        .ok_or_else(|| invalid("nearest-subspace classification needs the generating bases"))?;
    if indices.is_empty() {
        return Err(invalid("no samples to classify"));
    }
    let correct = indices
        .iter()
        .filter(|&&i| nearest_subspace(&data.samples[i].tokens, bases) == data.samples[i].label)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Splits a row-major `size × size` image into non-overlapping `patch × patch`
/// tiles in raster order; each tile becomes one token of `patch²` values.
pub fn patchify(image: &[f64], size: usize, patch: usize) -> Result<Tensor> {
    if image.len() != size * size || patch == 0 || size % patch != 0 {
        return Err(invalid(format!(
            "cannot cut a {size}x{size} image ({} pixels) into {patch}x{patch} patches",
            image.len()
        )));
    }
    let grid = size / patch;
    Ok(Tensor::from_fn(grid * grid, patch * patch, |t, k| {
        let (gy, gx) = (t / grid, t % grid);
        let (py, px) = (k / patch, k % patch);
        image[(gy * patch + py) * size + gx * patch + px]
    }))
}

/// Loads `root/<class>/*.pgm`, classes in lexicographic order of their
/// directory names, files in lexicographic order within a class.
pub fn load_image_dir(root: &Path, model: &ModelConfig) -> Result<(Dataset, Vec<String>)> {
    let mut classes: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(invalid(format!("{} has no class subdirectories", root.display())));
    }
    let mut samples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        for path in files {
            let img = PgmImage::read(&path)?;
            if img.width != model.image_size || img.height != model.image_size {
                return Err(Error::Mismatch(format!(
                    "{} is {}x{}, model expects {}x{}",
                    path.display(),
                    img.width,
                    img.height,
                    model.image_size,
                    model.image_size
                )));
            }
            samples.push(Sample {
                tokens: patchify(&img.normalized(), model.image_size, model.patch_size)?,
                label,
            });
        }
    }
    let p = model.patch_size;
    Ok((
        Dataset {
            samples,
            num_classes: classes.len(),
            token_dim: p * p,
            tokens: model.tokens(),
            bases: None,
        },
        classes,
    ))
}
