//! Fully connected network with the fixed 204 -> 128 -> 64 -> 32 -> 1
//! shape: rectifier hidden layers, logistic output, binary cross-entropy
//! loss (essential encoded as 1), trained by seeded mini-batch SGD with
//! Glorot-uniform weight initialization and zero biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_vector_len, ModelError, Prediction};
use crate::labeling::{Label, LabeledSample};
use crate::FeatureVector;

pub const LAYER_WIDTHS: [usize; 5] = [204, 128, 64, 32, 1];

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// Per layer, row-major `out x in`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-parameter gradients in the same shape as the model.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let layers = LAYER_WIDTHS.len() - 1;
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(ModelError::BadConfig(format!(
                "expected {layers} weight/bias layers"
            )));
        }
        for l in 0..layers {
            let (rows, cols) = (LAYER_WIDTHS[l + 1], LAYER_WIDTHS[l]);
            if self.weights[l].len() != rows * cols || self.biases[l].len() != rows {
                return Err(ModelError::BadConfig(format!(
                    "layer {l} shape mismatch: expected {rows}x{cols}"
                )));
            }
        }
        let finite = self
            .weights
            .iter()
            .chain(self.biases.iter())
            .flatten()
            .all(|p| p.is_finite());
        if !finite {
            return Err(ModelError::BadConfig("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Forward pass returning the logistic output score.
    pub fn score(&self, input: &[f64]) -> f64 {
        let activations = self.forward(input);
        activations[activations.len() - 1][0]
    }

    /// Post-activation values per layer, input included.
    fn forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.weights.len();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        activations.push(input.to_vec());
        for l in 0..layers {
            let (rows, cols) = (LAYER_WIDTHS[l + 1], LAYER_WIDTHS[l]);
            let prev = &activations[l];
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                let z: f64 = self.biases[l][r]
                    + row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>();
                out.push(if l + 1 == layers { sigmoid(z) } else { z.max(0.0) });
            }
            activations.push(out);
        }
        activations
    }

    /// Mean binary cross-entropy over a batch.
    pub fn batch_loss(&self, batch: &[LabeledSample]) -> Result<f64, ModelError> {
        let mut loss = 0.0;
        for sample in batch {
            check_vector_len(&sample.features)?;
            let score = self.score(sample.features.values()).clamp(1e-12, 1.0 - 1e-12);
            let y = label_target(sample.label);
            loss -= y * score.ln() + (1.0 - y) * (1.0 - score).ln();
        }
        Ok(loss / batch.len() as f64)
    }

    /// Analytic gradients of the batch loss, averaged over the batch.
    pub fn batch_gradients(&self, batch: &[LabeledSample]) -> Result<MlpGradients, ModelError> {
        let layers = self.weights.len();
        let mut grads = MlpGradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        for sample in batch {
            check_vector_len(&sample.features)?;
            let activations = self.forward(sample.features.values());
            let y = label_target(sample.label);
            // Logistic output with cross-entropy: dL/dz = score - y.
            let mut delta = vec![activations[layers][0] - y];
            for l in (0..layers).rev() {
                let (rows, cols) = (LAYER_WIDTHS[l + 1], LAYER_WIDTHS[l]);
                let prev = &activations[l];
                for r in 0..rows {
                    grads.biases[l][r] += delta[r];
                    let gw = &mut grads.weights[l][r * cols..(r + 1) * cols];
                    for (g, a) in gw.iter_mut().zip(prev) {
                        *g += delta[r] * a;
                    }
                }
                if l > 0 {
                    let mut next = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &self.weights[l][r * cols..(r + 1) * cols];
                        for (n, w) in next.iter_mut().zip(row) {
                            *n += delta[r] * w;
                        }
                    }
                    // Rectifier derivative from the stored activation.
                    for (n, a) in next.iter_mut().zip(prev) {
                        if *a <= 0.0 {
                            *n = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for layer in grads.weights.iter_mut().chain(grads.biases.iter_mut()) {
            for g in layer {
                *g *= scale;
            }
        }
        Ok(grads)
    }

    /// On/off pattern of every hidden rectifier unit over a batch. Lets a
    /// finite-difference check detect perturbations that cross a kink.
    pub fn hidden_unit_signs(&self, batch: &[LabeledSample]) -> Vec<bool> {
        let layers = self.weights.len();
        let mut signs = Vec::new();
        for sample in batch {
            let activations = self.forward(sample.features.values());
            for layer in activations.iter().take(layers).skip(1) {
                signs.extend(layer.iter().map(|&a| a > 0.0));
            }
        }
        signs
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn label_target(label: Label) -> f64 {
    match label {
        Label::Essential => 1.0,
        Label::NonEssential => 0.0,
    }
}

/// Glorot-uniform initial weights (zero biases) for the fixed architecture.
pub fn init_mlp(seed: u64) -> MlpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = LAYER_WIDTHS.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let (fan_in, fan_out) = (LAYER_WIDTHS[l], LAYER_WIDTHS[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let layer: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
            .collect();
        weights.push(layer);
        biases.push(vec![0.0; fan_out]);
    }
    MlpModel { weights, biases }
}

pub fn train_mlp(samples: &[LabeledSample], config: &MlpConfig) -> Result<MlpModel, ModelError> {
    train_mlp_with_validation(samples, None, config)
}

/// Trains by mini-batch SGD. When a validation set is given, the weights
/// from the epoch with the lowest validation loss are returned.
pub fn train_mlp_with_validation(
    samples: &[LabeledSample],
    validation: Option<&[LabeledSample]>,
    config: &MlpConfig,
) -> Result<MlpModel, ModelError> {
    if samples.len() < 2 {
        return Err(ModelError::TooFewSamples(samples.len()));
    }
    let essentials = samples.iter().filter(|s| s.label == Label::Essential).count();
    if essentials == 0 || essentials == samples.len() {
        return Err(ModelError::DegenerateTrainingSet);
    }
    if config.batch_size == 0 {
        return Err(ModelError::BadConfig("batch_size must be positive".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ModelError::BadConfig("learning_rate must be positive".into()));
    }
    for sample in samples {
        check_vector_len(&sample.features)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_mlp(rng.random());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best: Option<(f64, MlpModel)> = None;

    for epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LabeledSample> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let grads = model.batch_gradients(&batch)?;
            for l in 0..model.weights.len() {
                for (w, g) in model.weights[l].iter_mut().zip(&grads.weights[l]) {
                    *w -= config.learning_rate * g;
                }
                for (b, g) in model.biases[l].iter_mut().zip(&grads.biases[l]) {
                    *b -= config.learning_rate * g;
                }
            }
        }
        let train_loss = model.batch_loss(samples)?;
        if !train_loss.is_finite() {
            return Err(ModelError::DivergedTraining {
                epoch,
                loss: train_loss,
            });
        }
        if let Some(validation) = validation {
            if !validation.is_empty() {
                let val_loss = model.batch_loss(validation)?;
                if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
                    best = Some((val_loss, model.clone()));
                }
            }
        }
    }

    Ok(best.map(|(_, m)| m).unwrap_or(model))
}

/// Forward pass; the score is the logistic output.
pub fn predict_mlp(model: &MlpModel, vector: &FeatureVector) -> Result<Prediction, ModelError> {
    check_vector_len(vector)?;
    Ok(Prediction::from_score(model.score(vector.values())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::DestinationKey;
    use crate::features::{FEATURE_COUNT, WindowKey};

    fn sample_from(values: Vec<f64>, label: Label) -> LabeledSample {
        LabeledSample {
            key: WindowKey {
                device_id: "dev".into(),
                destination: DestinationKey::ip("1.1.1.1"),
                window_start: 0,
                window_len: 60,
            },
            features: FeatureVector::new(values).unwrap(),
            label,
        }
    }

    fn zeros() -> Vec<f64> {
        vec![0.0; FEATURE_COUNT]
    }

    #[test]
    fn all_zero_weights_score_half() {
        let model = MlpModel {
            weights: (0..4)
                .map(|l| vec![0.0; LAYER_WIDTHS[l] * LAYER_WIDTHS[l + 1]])
                .collect(),
            biases: (0..4).map(|l| vec![0.0; LAYER_WIDTHS[l + 1]]).collect(),
        };
        let prediction = predict_mlp(&model, &FeatureVector::new(zeros()).unwrap()).unwrap();
        assert_eq!(prediction.score, 0.5);
        assert_eq!(prediction.label, Label::NonEssential);
    }

    #[test]
    fn large_output_bias_saturates_towards_one() {
        let mut model = init_mlp(0);
        *model.biases.last_mut().unwrap() = vec![50.0];
        let prediction = predict_mlp(&model, &FeatureVector::new(zeros()).unwrap()).unwrap();
        assert!(prediction.score > 0.999999);
        assert_eq!(prediction.label, Label::Essential);
    }

    #[test]
    fn hand_computed_forward_pass() {
        // Two active inputs and hand-set sparse weights; the expected score
        // follows the layer arithmetic directly.
        let mut model = MlpModel {
            weights: (0..4)
                .map(|l| vec![0.0; LAYER_WIDTHS[l] * LAYER_WIDTHS[l + 1]])
                .collect(),
            biases: (0..4).map(|l| vec![0.0; LAYER_WIDTHS[l + 1]]).collect(),
        };
        // h1[0] = relu(0.5*x0 + 0.25*x1), h1[1] = relu(-x0) = 0
        model.weights[0][0] = 0.5;
        model.weights[0][1] = 0.25;
        model.weights[0][204] = -1.0;
        // h2[0] = relu(2*h1[0] + 1*h1[1])
        model.weights[1][0] = 2.0;
        model.weights[1][1] = 1.0;
        // h3[0] = relu(-0.5*h2[0] + 3) with bias
        model.weights[2][0] = -0.5;
        model.biases[2][0] = 3.0;
        // out = sigmoid(1.25*h3[0] - 2)
        model.weights[3][0] = 1.25;
        model.biases[3][0] = -2.0;

        let mut values = zeros();
        values[0] = 0.8;
        values[1] = 1.6;
        let v = FeatureVector::new(values).unwrap();

        let h1: f64 = 0.5 * 0.8 + 0.25 * 1.6; // 0.8
        let h2 = 2.0 * h1; // 1.6
        let h3 = -0.5 * h2 + 3.0; // 2.2
        let expected = 1.0 / (1.0 + (-(1.25 * h3 - 2.0)).exp());
        let got = predict_mlp(&model, &v).unwrap().score;
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let samples = vec![
            sample_from(zeros(), Label::Essential),
            sample_from(vec![1.0; FEATURE_COUNT], Label::NonEssential),
        ];
        let config = MlpConfig {
            epochs: 0,
            seed: 5,
            ..MlpConfig::default()
        };
        let trained = train_mlp(&samples, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = init_mlp(rng.random());
        assert_eq!(trained, init);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let batch: Vec<LabeledSample> = (0..5)
            .map(|i| {
                let values: Vec<f64> = (0..FEATURE_COUNT).map(|_| rng.random::<f64>()).collect();
                let label = if i % 2 == 0 { Label::Essential } else { Label::NonEssential };
                sample_from(values, label)
            })
            .collect();
        let model = init_mlp(4);
        let grads = model.batch_gradients(&batch).unwrap();
        let eps = 1e-4;
        let mut checked = 0;
        for layer in 0..model.weights.len() {
            for offset in (0..model.weights[layer].len()).step_by(571) {
                let mut plus = model.clone();
                plus.weights[layer][offset] += eps;
                let mut minus = model.clone();
                minus.weights[layer][offset] -= eps;
                if plus.hidden_unit_signs(&batch) != minus.hidden_unit_signs(&batch) {
                    continue; // crossed a rectifier kink
                }
                let fd = (plus.batch_loss(&batch).unwrap() - minus.batch_loss(&batch).unwrap())
                    / (2.0 * eps);
                let analytic = grads.weights[layer][offset];
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {layer} offset {offset}: {analytic} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 40);
    }

    #[test]
    fn xor_toy_is_learnable() {
        // XOR on the first two features, padded to the full input width.
        let mut samples = Vec::new();
        for (a, b) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let mut values = zeros();
            values[0] = a;
            values[1] = b;
            let label = if (a != 0.0) ^ (b != 0.0) {
                Label::Essential
            } else {
                Label::NonEssential
            };
            samples.push(sample_from(values, label));
        }
        let config = MlpConfig {
            epochs: 2000,
            batch_size: 4,
            learning_rate: 0.5,
            seed: 1,
        };
        let model = train_mlp(&samples, &config).unwrap();
        let correct = samples
            .iter()
            .filter(|s| predict_mlp(&model, &s.features).unwrap().label == s.label)
            .count();
        assert!(correct >= 4, "only {correct}/4 correct");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<LabeledSample> = (0..20)
            .map(|i| {
                let values: Vec<f64> = (0..FEATURE_COUNT).map(|_| rng.random()).collect();
                sample_from(
                    values,
                    if i % 2 == 0 { Label::Essential } else { Label::NonEssential },
                )
            })
            .collect();
        let config = MlpConfig {
            epochs: 3,
            seed: 8,
            ..MlpConfig::default()
        };
        let a = train_mlp(&samples, &config).unwrap();
        let b = train_mlp(&samples, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_degenerate() {
        let samples = vec![
            sample_from(zeros(), Label::Essential),
            sample_from(vec![1.0; FEATURE_COUNT], Label::Essential),
        ];
        assert!(matches!(
            train_mlp(&samples, &MlpConfig::default()),
            Err(ModelError::DegenerateTrainingSet)
        ));
    }
}
