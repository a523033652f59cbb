//! Multipositive temperature-scaled contrastive loss.
//!
//! For anchor `i` with positives `P(i)` and negatives `N(i)` (every other
//! non-positive row), each positive `j` contributes
//! `-log(e^{s_ij/t} / (e^{s_ij/t} + sum_{k in N(i)} e^{s_kj/t}))`.
//! [`DenominatorForm::Standard`] uses `s_ik` in the negative sum instead.
//! Terms are averaged over positives, then over anchors.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::LabelMatrix;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("{embeddings} embeddings but label matrix has size {labels}")]
    SizeMismatch { embeddings: usize, labels: usize },
    #[error("embedding {row} has dimension {actual}, expected {expected}")]
    Dimension {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("embedding {row} is not unit-norm (|z| = {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("anchor {row} has no positives")]
    NoPositives { row: usize },
    #[error("label matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("label matrix has a positive on the diagonal at {row}")]
    Diagonal { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorForm {
    /// Negatives paired with the positive: `s_kj`.
    #[default]
    AsWritten,
    /// Negatives paired with the anchor: `s_ik`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    #[serde(default)]
    pub denominator: DenominatorForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            denominator: DenominatorForm::AsWritten,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Gradient with respect to each (normalized) embedding.
    pub grad: Vec<Vec<T>>,
}

pub fn similarity_matrix<T: Float>(z: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = z.len();
    let mut s = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            let v = z[i]
                .iter()
                .zip(&z[j])
                .fold(T::zero(), |a, (&x, &y)| a + x * y);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

/// `-log(e^pos / (e^pos + sum e^neg))` for logits already divided by `t`.
pub fn pair_log_term<T: Float>(pos_logit: T, neg_logits: &[T]) -> T {
    let max = neg_logits.iter().fold(pos_logit, |m, &v| m.max(v));
    let sum = neg_logits
        .iter()
        .fold((pos_logit - max).exp(), |a, &v| a + (v - max).exp());
    max + sum.ln() - pos_logit
}

/// Validates preconditions, then evaluates loss and gradient.
pub fn multipositive_loss<T: Float>(
    z: &[Vec<T>],
    labels: &LabelMatrix,
    config: &LossConfig,
) -> Result<LossOutput<T>, LossError> {
    check_shapes(z, labels, config)?;
    for (row, zi) in z.iter().enumerate() {
        let norm = zi
            .iter()
            .fold(0.0, |a, &v| a + v.to_f64().unwrap().powi(2))
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(LossError::NotNormalized { row, norm });
        }
    }
    let n = labels.size();
    for i in 0..n {
        if labels.get(i, i) {
            return Err(LossError::Diagonal { row: i });
        }
        for j in 0..i {
            if labels.get(i, j) != labels.get(j, i) {
                return Err(LossError::Asymmetric { row: i, col: j });
            }
        }
    }
    Ok(multipositive_loss_unchecked(z, labels, config))
}

fn check_shapes<T: Float>(
    z: &[Vec<T>],
    labels: &LabelMatrix,
    config: &LossConfig,
) -> Result<(), LossError> {
    if !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(LossError::Temperature(config.temperature));
    }
    if z.len() != labels.size() {
        return Err(LossError::SizeMismatch {
            embeddings: z.len(),
            labels: labels.size(),
        });
    }
    let d = z.first().map_or(0, Vec::len);
    for (row, zi) in z.iter().enumerate() {
        if zi.len() != d {
            return Err(LossError::Dimension {
                row,
                expected: d,
                actual: zi.len(),
            });
        }
    }
    if let Some(row) = (0..labels.size()).find(|&i| labels.positive_count(i) == 0) {
        return Err(LossError::NoPositives { row });
    }
    Ok(())
}

/// Loss and gradient without the unit-norm and label-structure checks; used
/// for finite-difference probing where inputs leave the unit sphere.
///
/// # Panics
/// On shape mismatch, zero positives or a non-positive temperature.
pub fn multipositive_loss_unchecked<T: Float>(
    z: &[Vec<T>],
    labels: &LabelMatrix,
    config: &LossConfig,
) -> LossOutput<T> {
    check_shapes(z, labels, config).expect("loss preconditions");
    let n = z.len();
    let d = z.first().map_or(0, Vec::len);
    let inv_t = T::from(1.0 / config.temperature).unwrap();
    let s = similarity_matrix(z);
    let mut ds = vec![vec![T::zero(); n]; n];
    let mut total = T::zero();
    let scale = T::one() / T::from(n).unwrap();
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let positives: Vec<usize> = labels.positives(i).collect();
        let negatives: Vec<usize> = (0..n).filter(|&k| k != i && !labels.get(i, k)).collect();
        let w = scale / T::from(positives.len()).unwrap();
        for &j in &positives {
            logits.clear();
            logits.push(s[i][j] * inv_t);
            for &k in &negatives {
                let sim = match config.denominator {
                    DenominatorForm::AsWritten => s[k][j],
                    DenominatorForm::Standard => s[i][k],
                };
                logits.push(sim * inv_t);
            }
            let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom = logits.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            total = total + w * (max + denom.ln() - logits[0]);
            let p0 = (logits[0] - max).exp() / denom;
            ds[i][j] = ds[i][j] + w * inv_t * (p0 - T::one());
            for (slot, &k) in negatives.iter().enumerate() {
                let pk = (logits[slot + 1] - max).exp() / denom;
                let g = w * inv_t * pk;
                match config.denominator {
                    DenominatorForm::AsWritten => ds[k][j] = ds[k][j] + g,
                    DenominatorForm::Standard => ds[i][k] = ds[i][k] + g,
                }
            }
        }
    }
    let mut grad = vec![vec![T::zero(); d]; n];
    for a in 0..n {
        for b in 0..n {
            let coef = ds[a][b] + ds[b][a];
            if coef != T::zero() {
                for (g, &v) in grad[a].iter_mut().zip(&z[b]) {
                    *g = *g + coef * v;
                }
            }
        }
    }
    LossOutput { loss: total, grad }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::normalize;
    use crate::sampler::{build_label_matrix, expand_multiview, ClipSpec, LabelingMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                normalize(
                    &(0..d)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<f64>>(),
                )
            })
            .collect()
    }

    fn cfg(form: DenominatorForm) -> LossConfig {
        LossConfig {
            temperature: 0.1,
            denominator: form,
        }
    }

    /// Direct transcription of the loss with no stabilization.
    fn oracle(z: &[Vec<f64>], labels: &LabelMatrix, c: &LossConfig) -> f64 {
        let n = z.len();
        let sim = |a: usize, b: usize| {
            z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / c.temperature
        };
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = labels.positives(i).collect();
            let mut acc = 0.0;
            for &j in &pos {
                let mut den = sim(i, j).exp();
                for k in (0..n).filter(|&k| k != i && !labels.get(i, k)) {
                    den += match c.denominator {
                        DenominatorForm::AsWritten => sim(k, j).exp(),
                        DenominatorForm::Standard => sim(i, k).exp(),
                    };
                }
                acc += -(sim(i, j).exp() / den).ln();
            }
            total += acc / pos.len() as f64;
        }
        total / n as f64
    }

    #[test]
    fn identical_positive_pair_is_zero() {
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let l = LabelMatrix::from_rows(&[&[0, 1], &[1, 0]]);
        for form in [DenominatorForm::AsWritten, DenominatorForm::Standard] {
            assert_eq!(multipositive_loss(&z, &l, &cfg(form)).unwrap().loss, 0.0);
        }
    }

    #[test]
    fn hand_evaluated_pair_term() {
        let expected = (1.0f64 + (-10.0f64).exp()).ln();
        assert!((expected - 4.54e-5).abs() < 1e-7);
        // z_i = z_j = e1, negative orthogonal to z_j.
        let z = [vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = similarity_matrix(&z);
        let term = pair_log_term(s[0][1] / 0.1, &[s[2][1] / 0.1]);
        assert!((term - expected).abs() < 1e-15);
    }

    #[test]
    fn similarity_matrix_cases() {
        let e: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let s = similarity_matrix(&e);
        assert_eq!(s, e);
        let s = similarity_matrix(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(s[0][1], -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_unit(10, 8, &mut rng);
        let s = similarity_matrix(&z);
        for i in 0..10 {
            assert!((s[i][i] - 1.0).abs() < 1e-6);
            for j in 0..10 {
                let naive: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
                assert!((s[i][j] - naive).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn precondition_errors() {
        let l = LabelMatrix::from_rows(&[&[0, 1], &[1, 0]]);
        let c = LossConfig::default();
        assert!(matches!(
            multipositive_loss(&[vec![2.0, 0.0], vec![1.0, 0.0]], &l, &c),
            Err(LossError::NotNormalized { row: 0, .. })
        ));
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let lonely = LabelMatrix::from_rows(&[&[0, 0], &[0, 0]]);
        assert_eq!(
            multipositive_loss(&z, &lonely, &c),
            Err(LossError::NoPositives { row: 0 })
        );
        let asym = LabelMatrix::from_rows(&[&[0, 1, 0], &[1, 0, 1], &[1, 1, 0]]);
        let z3 = vec![vec![1.0, 0.0]; 3];
        assert!(matches!(
            multipositive_loss(&z3, &asym, &c),
            Err(LossError::Asymmetric { .. })
        ));
        let bad_t = LossConfig {
            temperature: 0.0,
            ..c
        };
        assert_eq!(
            multipositive_loss(&z, &l, &bad_t),
            Err(LossError::Temperature(0.0))
        );
    }

    #[test]
    fn stable_at_tiny_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_unit(8, 8, &mut rng);
        let l = expand_multiview(
            &build_label_matrix(
                &ClipSpec {
                    clip_len: 4,
                    ..Default::default()
                },
                &mut rng,
            )
            .unwrap(),
        );
        let c = LossConfig {
            temperature: 1e-3,
            denominator: DenominatorForm::AsWritten,
        };
        let out = multipositive_loss(&z, &l, &c).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.grad.iter().flatten().all(|g| g.is_finite()));
    }

    fn fd_check(form: DenominatorForm, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=8);
        let spec = ClipSpec {
            clip_len: n,
            labeling: if rng.random() {
                LabelingMode::Sampled
            } else {
                LabelingMode::FullWindow
            },
            ..Default::default()
        };
        let labels = expand_multiview(&build_label_matrix(&spec, &mut rng).unwrap());
        let mut z = random_unit(2 * n, 8, &mut rng);
        let c = cfg(form);
        let out = multipositive_loss(&z, &labels, &c).unwrap();
        assert!((out.loss - oracle(&z, &labels, &c)).abs() < 1e-10);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for a in 0..2 * n {
            for d in 0..8 {
                let orig = z[a][d];
                z[a][d] = orig + h;
                let fp = multipositive_loss_unchecked(&z, &labels, &c).loss;
                z[a][d] = orig - h;
                let fm = multipositive_loss_unchecked(&z, &labels, &c).loss;
                z[a][d] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let g = out.grad[a][d];
                worst = worst.max((numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..60 {
            for form in [DenominatorForm::AsWritten, DenominatorForm::Standard] {
                let worst = fd_check(form, seed);
                assert!(worst < 1e-4, "seed {seed} {form:?}: {worst}");
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in any::<u64>(), standard in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = expand_multiview(&build_label_matrix(&ClipSpec { clip_len: 5, ..Default::default() }, &mut rng).unwrap());
            let z = random_unit(10, 8, &mut rng);
            let mut perm: Vec<usize> = (0..10).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let zp: Vec<Vec<f64>> = perm.iter().map(|&p| z[p].clone()).collect();
            let lp = LabelMatrix::from_fn(10, |i, j| labels.get(perm[i], perm[j]));
            let c = cfg(if standard { DenominatorForm::Standard } else { DenominatorForm::AsWritten });
            let a = multipositive_loss(&z, &labels, &c).unwrap();
            let b = multipositive_loss(&zp, &lp, &c).unwrap();
            prop_assert!((a.loss - b.loss).abs() < 1e-12);
            prop_assert!(a.loss >= 0.0);
            for (i, &p) in perm.iter().enumerate() {
                for d in 0..8 {
                    prop_assert!((b.grad[i][d] - a.grad[p][d]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn raising_a_negative_similarity_never_lowers_loss(angle in 0.0f64..3.0, bump in 0.0f64..0.1, standard in any::<bool>()) {
            // anchor and positive on e1; negative rotates toward them
            let neg = |a: f64| vec![a.cos(), a.sin(), 0.0];
            let labels = LabelMatrix::from_rows(&[&[0, 1, 0], &[1, 0, 0], &[0, 0, 0]]);
            let c = cfg(if standard { DenominatorForm::Standard } else { DenominatorForm::AsWritten });
            let loss = |a: f64| {
                let z = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], neg(a), vec![0.0, 0.0, 1.0]];
                let out = multipositive_loss_unchecked(&z, &labels_with_self(&labels), &c);
                out.loss
            };
            prop_assert!(loss((angle - bump).max(0.0)) >= loss(angle) - 1e-15);
        }
    }

    /// Gives the lone negative row a positive of its own so the loss is defined.
    fn labels_with_self(l: &LabelMatrix) -> LabelMatrix {
        let mut m = LabelMatrix::zeros(4);
        for i in 0..3 {
            for j in l.positives(i) {
                m.set(i, j, true);
            }
        }
        m.set(2, 3, true);
        m.set(3, 2, true);
        m
    }
}
