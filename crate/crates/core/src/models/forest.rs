//! Random forest of CART trees: bootstrap resampling per tree, Gini
//! impurity splits over a random feature subset per split, class
//! probabilities averaged over leaves. Fully deterministic for a given
//! seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_vector_len, ModelError, Prediction};
use crate::features::{FeatureVector, FEATURE_COUNT};
use crate::labeling::{Label, LabeledSample};

#[derive(Debug, Clone)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    /// Random features examined per split. The search keeps drawing past
    /// this count until it finds at least one valid split, so a node only
    /// becomes an impure leaf when every feature is constant across it.
    pub feature_subsample: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            // ceil(sqrt(204))
            feature_subsample: 15,
            seed: 0,
        }
    }
}

/// One tree node. Samples with `value <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Class probabilities `[essential, non_essential]`.
    Leaf { prob: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// Probability of the essential class for one vector.
    pub fn predict(&self, values: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { prob } => return prob[0],
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if values[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_trees: usize,
    pub rng_seed: u64,
    pub feature_subsample: usize,
    pub max_depth: Option<usize>,
    pub trees: Vec<DecisionTree>,
}

/// Trains a forest on labeled, normalized feature vectors.
pub fn train_forest(
    samples: &[LabeledSample],
    config: &ForestConfig,
) -> Result<ForestModel, ModelError> {
    if samples.len() < 2 {
        return Err(ModelError::TooFewSamples(samples.len()));
    }
    if config.n_trees == 0 || config.feature_subsample == 0 {
        return Err(ModelError::BadConfig(
            "n_trees and feature_subsample must be positive".into(),
        ));
    }
    let essentials = samples.iter().filter(|s| s.label == Label::Essential).count();
    if essentials == 0 || essentials == samples.len() {
        return Err(ModelError::DegenerateTrainingSet);
    }
    for sample in samples {
        check_vector_len(&sample.features)?;
    }

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let tree_seeds: Vec<u64> = (0..config.n_trees).map(|_| master.random()).collect();

    let trees = tree_seeds
        .into_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bootstrap: Vec<usize> = (0..samples.len())
                .map(|_| rng.random_range(0..samples.len()))
                .collect();
            grow_tree(samples, bootstrap, config, &mut rng)
        })
        .collect();

    Ok(ForestModel {
        n_trees: config.n_trees,
        rng_seed: config.seed,
        feature_subsample: config.feature_subsample,
        max_depth: config.max_depth,
        trees,
    })
}

/// Where a finished child node must be linked into its parent.
enum Slot {
    Root,
    Left(usize),
    Right(usize),
}

fn grow_tree(
    samples: &[LabeledSample],
    root_indices: Vec<usize>,
    config: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> DecisionTree {
    let mut nodes: Vec<Node> = Vec::new();
    let mut stack: Vec<(Slot, usize, Vec<usize>)> = vec![(Slot::Root, 0, root_indices)];

    while let Some((slot, depth, indices)) = stack.pop() {
        let node_idx = nodes.len();
        match slot {
            Slot::Root => {}
            Slot::Left(parent) => {
                if let Node::Split { left, .. } = &mut nodes[parent] {
                    *left = node_idx as u32;
                }
            }
            Slot::Right(parent) => {
                if let Node::Split { right, .. } = &mut nodes[parent] {
                    *right = node_idx as u32;
                }
            }
        }

        let essential = indices
            .iter()
            .filter(|&&i| samples[i].label == Label::Essential)
            .count();
        let total = indices.len();
        let pure = essential == 0 || essential == total;
        let depth_capped = config.max_depth.is_some_and(|d| depth >= d);

        let split = if pure || depth_capped || total < 2 {
            None
        } else {
            find_split(samples, &indices, config, rng)
        };

        match split {
            None => {
                let n = total as f64;
                nodes.push(Node::Leaf {
                    prob: [essential as f64 / n, (total - essential) as f64 / n],
                });
            }
            Some((feature, threshold)) => {
                let (left, right): (Vec<usize>, Vec<usize>) = indices
                    .into_iter()
                    .partition(|&i| samples[i].features.values()[feature] <= threshold);
                nodes.push(Node::Split {
                    feature: feature as u32,
                    threshold,
                    left: 0,
                    right: 0,
                });
                stack.push((Slot::Right(node_idx), depth + 1, right));
                stack.push((Slot::Left(node_idx), depth + 1, left));
            }
        }
    }

    DecisionTree { nodes }
}

/// Finds the Gini-optimal (feature, threshold) among a random feature
/// subset. Features are drawn as a random permutation; the scan stops once
/// `feature_subsample` features were examined and a valid split exists,
/// otherwise it keeps going so any separable node does get split.
fn find_split(
    samples: &[LabeledSample],
    indices: &[usize],
    config: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, f64)> {
    let mut features: Vec<usize> = (0..FEATURE_COUNT).collect();
    for i in (1..features.len()).rev() {
        features.swap(i, rng.random_range(0..=i));
    }

    let total = indices.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for (examined, &feature) in features.iter().enumerate() {
        if examined >= config.feature_subsample && best.is_some() {
            break;
        }
        let mut column: Vec<(f64, bool)> = indices
            .iter()
            .map(|&i| {
                (
                    samples[i].features.values()[feature],
                    samples[i].label == Label::Essential,
                )
            })
            .collect();
        column.sort_by(|a, b| a.0.total_cmp(&b.0));

        let total_essential = column.iter().filter(|(_, e)| *e).count() as f64;
        let mut left_n = 0.0;
        let mut left_essential = 0.0;
        for i in 0..column.len() - 1 {
            left_n += 1.0;
            if column[i].1 {
                left_essential += 1.0;
            }
            if column[i].0 == column[i + 1].0 {
                continue;
            }
            let right_n = total - left_n;
            let right_essential = total_essential - left_essential;
            let weighted = (left_n * gini(left_essential, left_n)
                + right_n * gini(right_essential, right_n))
                / total;
            if best.is_none_or(|(g, _, _)| weighted < g) {
                let threshold = column[i].0 + 0.5 * (column[i + 1].0 - column[i].0);
                best = Some((weighted, feature, threshold));
            }
        }
    }
    best.map(|(_, feature, threshold)| (feature, threshold))
}

fn gini(essential: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = essential / n;
    let q = 1.0 - p;
    1.0 - p * p - q * q
}

/// Scores a vector as the mean of the per-tree essential-class leaf
/// probabilities.
pub fn predict_forest(model: &ForestModel, vector: &FeatureVector) -> Result<Prediction, ModelError> {
    check_vector_len(vector)?;
    let sum: f64 = model
        .trees
        .iter()
        .map(|tree| tree.predict(vector.values()))
        .sum();
    Ok(Prediction::from_score(sum / model.trees.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::DestinationKey;
    use crate::features::WindowKey;

    pub(crate) fn sample(feature0: f64, label: Label) -> LabeledSample {
        let mut values = vec![0.0; FEATURE_COUNT];
        values[0] = feature0;
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

    fn toy_training_set() -> Vec<LabeledSample> {
        vec![
            sample(0.0, Label::Essential),
            sample(0.1, Label::Essential),
            sample(0.9, Label::NonEssential),
            sample(1.0, Label::NonEssential),
        ]
    }

    #[test]
    fn separable_toy_reaches_perfect_training_accuracy() {
        let config = ForestConfig {
            n_trees: 10,
            ..ForestConfig::default()
        };
        let model = train_forest(&toy_training_set(), &config).unwrap();
        for s in toy_training_set() {
            let prediction = predict_forest(&model, &s.features).unwrap();
            assert_eq!(prediction.label, s.label, "misclassified x={}", s.features.values()[0]);
        }
    }

    #[test]
    fn probe_near_cluster_a_is_essential() {
        let config = ForestConfig {
            n_trees: 10,
            ..ForestConfig::default()
        };
        let model = train_forest(&toy_training_set(), &config).unwrap();
        let probe = sample(0.05, Label::Essential);
        let prediction = predict_forest(&model, &probe.features).unwrap();
        assert_eq!(prediction.label, Label::Essential);
        assert!(prediction.score > 0.9);
    }

    #[test]
    fn duplicated_samples_same_seed_predict_identically() {
        let config = ForestConfig {
            n_trees: 20,
            seed: 42,
            ..ForestConfig::default()
        };
        let base = toy_training_set();
        let mut doubled = base.clone();
        doubled.extend(base.clone());
        let a = train_forest(&base, &config).unwrap();
        let b = train_forest(&doubled, &config).unwrap();
        for x in [0.0, 0.05, 0.3, 0.5, 0.77, 1.0] {
            let probe = sample(x, Label::Essential);
            assert_eq!(
                predict_forest(&a, &probe.features).unwrap().label,
                predict_forest(&b, &probe.features).unwrap().label
            );
        }
    }

    #[test]
    fn identical_vectors_opposite_labels_make_unsplittable_half_leaf() {
        let samples = vec![sample(0.5, Label::Essential), sample(0.5, Label::NonEssential)];
        let config = ForestConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = grow_tree(&samples, vec![0, 1], &config, &mut rng);
        assert_eq!(tree.nodes, vec![Node::Leaf { prob: [0.5, 0.5] }]);

        let model = ForestModel {
            n_trees: 1,
            rng_seed: 0,
            feature_subsample: config.feature_subsample,
            max_depth: None,
            trees: vec![tree],
        };
        let prediction = predict_forest(&model, &samples[0].features).unwrap();
        assert_eq!(prediction.score, 0.5);
        // Strict threshold: exact 0.5 is non-essential.
        assert_eq!(prediction.label, Label::NonEssential);
    }

    #[test]
    fn single_class_input_is_degenerate() {
        let samples = vec![sample(0.0, Label::Essential), sample(1.0, Label::Essential)];
        assert!(matches!(
            train_forest(&samples, &ForestConfig::default()),
            Err(ModelError::DegenerateTrainingSet)
        ));
    }

    #[test]
    fn wrong_vector_length_rejected() {
        let model = train_forest(&toy_training_set(), &ForestConfig::default()).unwrap();
        let short = FeatureVector::new(vec![0.0; FEATURE_COUNT]).unwrap();
        assert!(predict_forest(&model, &short).is_ok());
        // A mismatched layout cannot even construct a FeatureVector, so the
        // length check guards the raw constructor path.
        assert!(FeatureVector::new(vec![0.0; 10]).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let config = ForestConfig {
            n_trees: 8,
            seed: 7,
            ..ForestConfig::default()
        };
        let a = train_forest(&toy_training_set(), &config).unwrap();
        let b = train_forest(&toy_training_set(), &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_feature_rescaling_preserves_labels() {
        // CART thresholds are order-based: applying x -> exp(x) to one
        // feature in train and test leaves every predicted label unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut train: Vec<LabeledSample> = Vec::new();
        for _ in 0..40 {
            let x: f64 = rng.random_range(0.0..0.4);
            train.push(sample(x, Label::Essential));
            let x: f64 = rng.random_range(0.6..1.0);
            train.push(sample(x, Label::NonEssential));
        }
        let rescaled: Vec<LabeledSample> = train
            .iter()
            .map(|s| {
                let mut values = s.features.values().to_vec();
                values[0] = values[0].exp();
                s.with_features(FeatureVector::new(values).unwrap())
            })
            .collect();

        let config = ForestConfig {
            n_trees: 15,
            seed: 3,
            ..ForestConfig::default()
        };
        let plain = train_forest(&train, &config).unwrap();
        let scaled = train_forest(&rescaled, &config).unwrap();
        for i in 0..30 {
            let x = i as f64 / 29.0;
            let probe_plain = sample(x, Label::Essential);
            let probe_scaled = sample(x.exp(), Label::Essential);
            assert_eq!(
                predict_forest(&plain, &probe_plain.features).unwrap().label,
                predict_forest(&scaled, &probe_scaled.features).unwrap().label,
                "labels diverged at x={x}"
            );
        }
    }
}
