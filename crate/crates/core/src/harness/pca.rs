//! Two-component PCA of state vectors via eigendecomposition of the sample
//! covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::statevec::StateVector;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaExport {
    /// 2-D coordinates, one per input vector.
    pub points: Vec<[f64; 2]>,
    /// Example-position index of each input (its `n_examples_seen`).
    pub labels: Vec<usize>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
    /// Unit principal directions.
    #[serde(skip)]
    pub components: [Vec<f64>; 2],
}

/// Which part of each state vector to project.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaInput {
    Flattened,
    Layer(usize),
}

/// Projects rows onto their top two principal components.
pub fn pca_rows(rows: &[Vec<f64>]) -> Result<([Vec<f64>; 2], [f64; 2], Vec<[f64; 2]>)> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::Contract(format!("PCA needs at least 3 points, got {n}")));
    }
    let p = rows[0].len();
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension {
            op: "pca",
            left: vec![p],
            right: rows.iter().map(Vec::len).find(|&l| l != p).into_iter().collect(),
        });
    }
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();

    let mut components: [Vec<f64>; 2] = [vec![0.0; p], vec![0.0; p]];
    let mut explained = [0.0; 2];
    if total > 0.0 {
        for (c, &idx) in order.iter().take(2).enumerate() {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            // Fix the sign so the largest-magnitude entry is positive.
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if lead < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
            explained[c] = eig.eigenvalues[idx].max(0.0) / total;
            components[c] = v;
        }
    }
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut pt = [0.0; 2];
            for (c, comp) in components.iter().enumerate() {
                pt[c] = row.iter().zip(comp).map(|(a, b)| a * b).sum();
            }
            pt
        })
        .collect();
    Ok((components, explained, points))
}

pub fn pca_project(svs: &[StateVector], input: PcaInput) -> Result<PcaExport> {
    let rows: Vec<Vec<f64>> = svs
        .iter()
        .map(|sv| match input {
            PcaInput::Flattened => Ok(sv.flatten()),
            PcaInput::Layer(l) if l >= 1 && l <= sv.n_layers() => Ok(sv.layer(l).to_vec()),
            PcaInput::Layer(l) => Err(Error::LayerOutOfRange {
                layer: l,
                n_layers: sv.n_layers(),
            }),
        })
        .collect::<Result<_>>()?;
    let (components, explained, points) = pca_rows(&rows)?;
    Ok(PcaExport {
        points,
        labels: svs.iter().map(|s| s.meta.n_examples_seen).collect(),
        explained,
        components,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separation {
    /// Distance between the position-1 centroid and the centroid of later positions.
    pub centroid_distance: f64,
    /// Mean distance of points to their own position's centroid.
    pub within_spread: f64,
}

pub fn separation(export: &PcaExport) -> Separation {
    let centroid = |pred: &dyn Fn(usize) -> bool| -> Option<[f64; 2]> {
        let sel: Vec<&[f64; 2]> = export
            .points
            .iter()
            .zip(&export.labels)
            .filter(|(_, &l)| pred(l))
            .map(|(p, _)| p)
            .collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some([
            sel.iter().map(|p| p[0]).sum::<f64>() / n,
            sel.iter().map(|p| p[1]).sum::<f64>() / n,
        ])
    };
    let dist = |a: [f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let centroid_distance = match (centroid(&|l| l == 1), centroid(&|l| l >= 2)) {
        (Some(a), Some(b)) => dist(a, &b),
        _ => 0.0,
    };
    let mut labels: Vec<usize> = export.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    let mut spreads = Vec::new();
    for &l in &labels {
        let c = centroid(&|x| x == l).expect("label present");
        let ds: Vec<f64> = export
            .points
            .iter()
            .zip(&export.labels)
            .filter(|(_, &x)| x == l)
            .map(|(p, _)| dist(c, p))
            .collect();
        spreads.push(ds.iter().sum::<f64>() / ds.len() as f64);
    }
    let within_spread = if spreads.is_empty() {
        0.0
    } else {
        spreads.iter().sum::<f64>() / spreads.len() as f64
    };
    Separation {
        centroid_distance,
        within_spread,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statevec::SvMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn planar_data_is_fully_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..10).map(|_| rng.random::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..10).map(|_| rng.random::<f64>() - 0.5).collect();
        let offset: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b) = (rng.random::<f64>() * 4.0, rng.random::<f64>());
                (0..10).map(|j| offset[j] + a * u[j] + b * w[j]).collect()
            })
            .collect();
        let (comps, explained, points) = pca_rows(&rows).unwrap();
        assert!((explained[0] + explained[1] - 1.0).abs() < 1e-10);
        assert!(explained[0] >= explained[1]);
        assert!((dot(&comps[0], &comps[0]) - 1.0).abs() < 1e-10);
        assert!((dot(&comps[1], &comps[1]) - 1.0).abs() < 1e-10);
        assert!(dot(&comps[0], &comps[1]).abs() < 1e-10);
        let mean: Vec<f64> = (0..10).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 30.0).collect();
        for (r, p) in rows.iter().zip(&points) {
            for j in 0..10 {
                let rec = mean[j] + p[0] * comps[0][j] + p[1] * comps[1][j];
                assert!((rec - r[j]).abs() < 1e-9);
            }
        }
        let m0 = points.iter().map(|p| p[0]).sum::<f64>() / 30.0;
        let m1 = points.iter().map(|p| p[1]).sum::<f64>() / 30.0;
        assert!(m0.abs() < 1e-12 && m1.abs() < 1e-12);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 4];
        let (_, explained, points) = pca_rows(&rows).unwrap();
        assert_eq!(explained, [0.0, 0.0]);
        assert!(points.iter().all(|p| *p == [0.0, 0.0]));
    }

    #[test]
    fn too_few_points() {
        assert!(pca_rows(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn projects_state_vectors_with_labels() {
        let svs: Vec<StateVector> = (0..6)
            .map(|i| {
                StateVector::new(
                    vec![vec![i as f64, 0.0], vec![0.0, (i * i) as f64]],
                    SvMeta {
                        n_examples_seen: i % 3 + 1,
                        ..SvMeta::default()
                    },
                )
                .unwrap()
            })
            .collect();
        let flat = pca_project(&svs, PcaInput::Flattened).unwrap();
        assert_eq!(flat.points.len(), 6);
        assert_eq!(flat.labels, vec![1, 2, 3, 1, 2, 3]);
        let layer = pca_project(&svs, PcaInput::Layer(1)).unwrap();
        assert!((layer.explained[0] - 1.0).abs() < 1e-12);
        assert!(pca_project(&svs, PcaInput::Layer(3)).is_err());
        let sep = separation(&flat);
        assert!(sep.centroid_distance >= 0.0 && sep.within_spread >= 0.0);
    }
}
