//! Intent prototypes: uniform targets on the sphere, k-means prototypes over base
//! embeddings, and the optimal prototype-to-target matching.

mod assignment;
mod kmeans;
mod targets;

use ndarray::Array2;

pub use self::assignment::{assignment_total, solve_assignment};
pub(crate) use self::kmeans::cosine;
pub use self::kmeans::{kmeans, Centroids};
pub use self::targets::{generate_targets, uniformity_loss, TargetParams, TargetSet};

use crate::error::{Error, Result};

/// Cluster-to-target matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[cluster] = target`.
    pub perm: Vec<usize>,
    pub mean_similarity: f64,
}

impl Assignment {
    /// Target row assigned to each instance, given its cluster label.
    pub fn target_of(&self, label: usize) -> usize {
        self.perm[label]
    }
}

/// Cosine similarity of every centroid against every target.
pub fn similarity_matrix(centroids: &Array2<f64>, targets: &TargetSet) -> Result<Array2<f64>> {
    if centroids.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} centroids but {} targets",
            centroids.nrows(),
            targets.len()
        )));
    }
    if centroids.ncols() != targets.dim() {
        return Err(Error::Shape(format!(
            "centroid dim {} differs from target dim {}",
            centroids.ncols(),
            targets.dim()
        )));
    }
    let c = centroids.nrows();
    let mut s = Array2::zeros((c, c));
    for (i, cent) in centroids.rows().into_iter().enumerate() {
        let cent = cent.to_vec();
        if cent.iter().all(|&v| v == 0.0) {
            log::warn!("centroid {i} has zero norm; its similarities are set to 0");
            continue;
        }
        for (j, t) in targets.targets.rows().into_iter().enumerate() {
            s[[i, j]] = cosine(&cent, t.as_slice().expect("standard layout"));
        }
    }
    Ok(s)
}

/// Matches prototypes to targets maximizing total cosine similarity.
pub fn assign_targets(centroids: &Centroids, targets: &TargetSet) -> Result<Assignment> {
    let s = similarity_matrix(&centroids.centroids, targets)?;
    let perm = solve_assignment(s.view())?;
    let mean_similarity = assignment_total(s.view(), &perm) / perm.len() as f64;
    Ok(Assignment {
        perm,
        mean_similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroids_from(m: Array2<f64>) -> Centroids {
        let k = m.nrows();
        Centroids {
            centroids: m,
            labels: (0..k).collect(),
            inertia: 0.0,
            history: vec![],
        }
    }

    #[test]
    fn identical_centroids_map_to_identity() {
        let ts = generate_targets(
            6,
            4,
            TargetParams {
                steps: 100,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let a = assign_targets(&centroids_from(ts.targets.clone()), &ts).unwrap();
        assert_eq!(a.perm, (0..6).collect::<Vec<_>>());
        assert!((a.mean_similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_targets_are_recovered() {
        let ts = generate_targets(
            5,
            3,
            TargetParams {
                steps: 200,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let shuffle = [2, 4, 0, 1, 3];
        let cents = Array2::from_shape_fn((5, 3), |(i, j)| ts.targets[[shuffle[i], j]]);
        let a = assign_targets(&centroids_from(cents), &ts).unwrap();
        assert_eq!(a.perm, shuffle);
    }

    #[test]
    fn positive_rescaling_keeps_the_permutation() {
        let ts = generate_targets(
            4,
            3,
            TargetParams {
                steps: 100,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let cents = ndarray::array![
            [0.3, -1.0, 0.2],
            [1.0, 0.5, 0.0],
            [-0.4, 0.1, 0.9],
            [0.0, 0.0, -1.0]
        ];
        let a = assign_targets(&centroids_from(cents.clone()), &ts).unwrap();
        let b = assign_targets(&centroids_from(cents * 37.5), &ts).unwrap();
        assert_eq!(a.perm, b.perm);
    }

    #[test]
    fn zero_centroid_gets_zero_similarity() {
        let ts = generate_targets(2, 2, TargetParams::default(), 4).unwrap();
        let cents = ndarray::array![[0.0, 0.0], [1.0, 0.0]];
        let s = similarity_matrix(&cents, &ts).unwrap();
        assert!(s.row(0).iter().all(|&v| v == 0.0));
        assert!(assign_targets(&centroids_from(cents), &ts).is_ok());
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let ts = generate_targets(3, 2, TargetParams::default(), 4).unwrap();
        let cents = Array2::zeros((2, 2));
        assert!(matches!(
            assign_targets(&centroids_from(cents), &ts),
            Err(Error::Shape(_))
        ));
    }
}
