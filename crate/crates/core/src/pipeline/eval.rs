use serde::{Deserialize, Serialize};

use crate::federation::NodeTask;
use crate::graph::Split;
use crate::nn::{ModelParams, NnError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Micro-averaged test accuracy over all clients.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_client: Vec<Option<f64>>,
}

/// Test accuracy of `params` on every client graph. Only original nodes
/// carry test labels, so generated neighbors never count.
pub fn evaluate(params: &ModelParams, tasks: &[NodeTask]) -> Result<EvalSummary, NnError> {
    let mut correct = 0;
    let mut total = 0;
    let mut per_client = Vec::with_capacity(tasks.len());
    for t in tasks {
        let (c, n) = t.accuracy_counts(params, Split::Test)?;
        correct += c;
        total += n;
        per_client.push((n > 0).then(|| c as f64 / n as f64));
    }
    if total == 0 {
        return Err(NnError::EmptyMask);
    }
    Ok(EvalSummary {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_client,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{featurize_graph, FeatureSpec};
    use crate::synthetic::{class_text_graph, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_model_is_near_chance() {
        // two classes, so chance is one half
        let spec = SyntheticSpec {
            n_classes: 2,
            n_nodes: 400,
            n_test: 200,
            ..SyntheticSpec::default()
        };
        let (mut g, _) = class_text_graph(&spec, 5).unwrap();
        featurize_graph(&FeatureSpec::default(), &mut g).unwrap();
        let task = NodeTask::from_graph(&g).unwrap();
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ModelParams::init_gcn2(256, 16, 2, &mut rng);
            accs.push(evaluate(&p, std::slice::from_ref(&task)).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn no_test_nodes_is_an_error() {
        let task = NodeTask {
            adj: crate::nn::NormalizedAdjacency::from_edges(1, &[]),
            x: ndarray::Array2::zeros((1, 2)),
            labels: vec![Some(0)],
            train: vec![true],
            val: vec![false],
            test: vec![false],
            original: vec![true],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init_gcn2(2, 2, 2, &mut rng);
        assert!(matches!(evaluate(&p, &[task]), Err(NnError::EmptyMask)));
    }
}
