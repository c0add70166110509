//! Class-conditional mean adjacency and between-class difference statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{contract_err, Result};
use crate::gsl::DynamicGraphSet;
use crate::tensor::Tensor;

/// Mean of every interval graph over the correctly predicted records of each
/// class. Classes with no such record are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAdjacency {
    pub means: Vec<Option<Tensor>>,
    pub counts: Vec<usize>,
}

/// Mean and population standard deviation of `|a - b|` over off-diagonal entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Delta {
    pub mean: f64,
    pub std: f64,
}

pub fn class_mean_adjacency(
    graphs: &[DynamicGraphSet],
    classes: &[usize],
    correct: &[bool],
    n_classes: usize,
) -> Result<ClassAdjacency> {
    if graphs.len() != classes.len() || graphs.len() != correct.len() {
        return Err(contract_err!("graphs, classes and correctness flags must align"));
    }
    let mut sums: Vec<Option<(Vec<f64>, Vec<usize>)>> = vec![None; n_classes];
    let mut counts = vec![0usize; n_classes];
    let mut graph_counts = vec![0usize; n_classes];
    for ((g, &c), &ok) in graphs.iter().zip(classes).zip(correct) {
        if c >= n_classes {
            return Err(contract_err!("class {c} out of range for {n_classes} classes"));
        }
        if !ok {
            continue;
        }
        counts[c] += 1;
        for w in &g.adjacency {
            let slot = sums[c].get_or_insert_with(|| (vec![0.0; w.numel()], w.shape().to_vec()));
            if slot.1 != w.shape() {
                return Err(contract_err!("adjacency shapes differ across records"));
            }
            slot.0.iter_mut().zip(w.data()).for_each(|(s, v)| *s += v);
            graph_counts[c] += 1;
        }
    }
    let means = sums
        .into_iter()
        .zip(&graph_counts)
        .map(|(s, &k)| {
            s.map(|(mut data, shape)| {
                data.iter_mut().for_each(|v| *v /= k as f64);
                Tensor::new(shape, data).expect("shape from input")
            })
        })
        .collect();
    Ok(ClassAdjacency { means, counts })
}

pub fn delta(a: &Tensor, b: &Tensor) -> Result<Delta> {
    if a.shape() != b.shape() || a.ndim() != 2 || a.shape()[0] != a.shape()[1] || a.shape()[0] < 2 {
        return Err(contract_err!("delta needs two equal square matrices, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let n = a.shape()[0];
    let diffs: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (a.at2(i, j) - b.at2(i, j)).abs())
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
    Ok(Delta { mean, std: var.sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationTest {
    pub observed: f64,
    pub null_mean: f64,
    pub null: Vec<f64>,
    /// `(1 + #{null >= observed}) / (1 + permutations)`.
    pub p_value: f64,
}

/// Compares the between-class δ mean of classes `c1` and `c2` with δ means
/// obtained after shuffling class labels among the correctly predicted records.
pub fn permutation_test(
    graphs: &[DynamicGraphSet],
    classes: &[usize],
    correct: &[bool],
    c1: usize,
    c2: usize,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    let n_classes = c1.max(c2) + 1;
    let stat = |cls: &[usize]| -> Result<f64> {
        let cm = class_mean_adjacency(graphs, cls, correct, n_classes)?;
        match (&cm.means[c1], &cm.means[c2]) {
            (Some(a), Some(b)) => Ok(delta(a, b)?.mean),
            _ => Err(contract_err!("class {c1} or {c2} has no correctly predicted record")),
        }
    };
    let observed = stat(classes)?;
    let pool: Vec<usize> = (0..classes.len()).filter(|&i| correct[i] && (classes[i] == c1 || classes[i] == c2)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = classes.to_vec();
    let mut labels: Vec<usize> = pool.iter().map(|&i| classes[i]).collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        for (&i, &l) in pool.iter().zip(&labels) {
            shuffled[i] = l;
        }
        null.push(stat(&shuffled)?);
    }
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    let null_mean = null.iter().sum::<f64>() / null.len().max(1) as f64;
    Ok(PermutationTest { observed, null_mean, p_value: (1 + exceed) as f64 / (1 + permutations) as f64, null })
}

/// CSV of δ between every pair of classes with a mean.
pub fn delta_table(cm: &ClassAdjacency) -> Result<String> {
    let mut out = String::from("class_a,class_b,delta_mean,delta_std\n");
    for a in 0..cm.means.len() {
        for b in a + 1..cm.means.len() {
            if let (Some(x), Some(y)) = (&cm.means[a], &cm.means[b]) {
                let d = delta(x, y)?;
                out.push_str(&format!("{a},{b},{:.6},{:.6}\n", d.mean, d.std));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> DynamicGraphSet {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        DynamicGraphSet { adjacency: vec![t] }
    }

    #[test]
    fn single_record_means_and_absent_class() {
        let g0 = set(&[&[1.0, 0.2], &[0.2, 1.0]]);
        let g1 = set(&[&[1.0, 0.8], &[0.8, 1.0]]);
        let cm = class_mean_adjacency(&[g0.clone(), g1.clone()], &[0, 1], &[true, true], 3).unwrap();
        assert_eq!(cm.means[0].as_ref(), Some(&g0.adjacency[0]));
        assert_eq!(cm.means[1].as_ref(), Some(&g1.adjacency[0]));
        assert!(cm.means[2].is_none());
        let d = delta(cm.means[0].as_ref().unwrap(), cm.means[1].as_ref().unwrap()).unwrap();
        assert!((d.mean - 0.6).abs() < 1e-15 && d.std.abs() < 1e-15);
        let cm = class_mean_adjacency(&[g0.clone(), g1], &[0, 1], &[true, false], 2).unwrap();
        assert!(cm.means[1].is_none());
        assert_eq!(cm.counts, vec![1, 0]);
    }

    #[test]
    fn identical_graphs_give_zero_delta() {
        let g = set(&[&[1.0, 0.3, 0.0], &[0.3, 1.0, 0.5], &[0.0, 0.5, 1.0]]);
        let cm = class_mean_adjacency(&[g.clone(), g.clone(), g], &[0, 1, 1], &[true; 3], 2).unwrap();
        let d = delta(cm.means[0].as_ref().unwrap(), cm.means[1].as_ref().unwrap()).unwrap();
        assert_eq!(d.mean, 0.0);
    }

    #[test]
    fn diagonal_is_excluded() {
        let a = Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(delta(&a, &b).unwrap().mean, 0.0);
    }

    #[test]
    fn separated_classes_beat_permutations() {
        let graphs: Vec<DynamicGraphSet> = (0..20)
            .map(|i| {
                let w = if i % 2 == 0 { 0.1 } else { 0.9 } + 0.01 * (i as f64);
                set(&[&[1.0, w], &[w, 1.0]])
            })
            .collect();
        let classes: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let t = permutation_test(&graphs, &classes, &[true; 20], 0, 1, 99, 0).unwrap();
        assert!(t.p_value <= 0.01 + 1e-12);
        assert!(t.observed > t.null_mean);
    }
}
