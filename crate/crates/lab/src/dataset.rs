//! Seeded synthetic classification tasks.

use zsq_core::rng::SeedRng;
use zsq_core::train::LabeledData;
use zsq_core::Tensor;

use crate::config::{ConfigError, DatasetKind, DatasetSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: LabeledData,
    pub val: LabeledData,
    /// Per-class prototype (blob center, ring direction scale or grid template).
    pub prototypes: Vec<Vec<f64>>,
}

fn prototypes(spec: &DatasetSpec, rng: &mut SeedRng) -> Vec<Vec<f64>> {
    let d = spec.dim;
    match spec.kind {
        // Centers drawn so that the expected pairwise distance equals `separation`.
        DatasetKind::GaussianBlobs => {
            let s = spec.separation / (2.0 * d as f64).sqrt();
            (0..spec.classes)
                .map(|_| (0..d).map(|_| s * rng.normal()).collect())
                .collect()
        }
        // Class k lives on the sphere of radius (k+1)·separation.
        DatasetKind::Concentric => (0..spec.classes)
            .map(|k| vec![(k + 1) as f64 * spec.separation])
            .collect(),
        // Random ±1 templates on the input grid, scaled by separation/2.
        DatasetKind::GridPatterns => (0..spec.classes)
            .map(|_| {
                (0..d)
                    .map(|_| 0.5 * spec.separation * rng.rademacher())
                    .collect()
            })
            .collect(),
    }
}

/// Orthonormal basis of the shared nuisance subspace.
fn nuisance_basis(spec: &DatasetSpec, rng: &mut SeedRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < spec.nuisance_rank {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &basis {
                let p = zsq_core::tensor::dot(u, &v);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = zsq_core::tensor::norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

fn draw(
    spec: &DatasetSpec,
    protos: &[Vec<f64>],
    nuisance: &[Vec<f64>],
    label: usize,
    rng: &mut SeedRng,
) -> Vec<f64> {
    let mut x = draw_class(spec, protos, label, rng);
    for u in nuisance {
        let a = spec.nuisance * rng.normal();
        x.iter_mut().zip(u).for_each(|(v, b)| *v += a * b);
    }
    x
}

fn draw_class(
    spec: &DatasetSpec,
    protos: &[Vec<f64>],
    label: usize,
    rng: &mut SeedRng,
) -> Vec<f64> {
    let d = spec.dim;
    match spec.kind {
        DatasetKind::GaussianBlobs | DatasetKind::GridPatterns => protos[label]
            .iter()
            .map(|&c| c + spec.spread * rng.normal())
            .collect(),
        DatasetKind::Concentric => {
            let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = zsq_core::tensor::norm(&dir).max(1e-12);
            let r = protos[label][0] + spec.spread * rng.normal();
            dir.iter().map(|v| v / n * r).collect()
        }
    }
}

fn split(
    spec: &DatasetSpec,
    protos: &[Vec<f64>],
    nuisance: &[Vec<f64>],
    per_class: usize,
    rng: &mut SeedRng,
) -> LabeledData {
    let mut rows = Vec::with_capacity(per_class * spec.classes * spec.dim);
    let mut labels = Vec::with_capacity(per_class * spec.classes);
    // Interleave classes so any prefix stays close to balanced.
    for _ in 0..per_class {
        for k in 0..spec.classes {
            rows.extend(draw(spec, protos, nuisance, k, rng));
            labels.push(k);
        }
    }
    let x = Tensor::matrix(labels.len(), spec.dim, rows).expect("row-major sample block");
    LabeledData { x, labels }
}

/// Factor that brings the expected per-feature second moment of a sample to one.
pub fn unit_scale(spec: &DatasetSpec) -> f64 {
    let d = spec.dim as f64;
    let class_part = match spec.kind {
        DatasetKind::GaussianBlobs => spec.spread.powi(2) + spec.separation.powi(2) / (2.0 * d),
        DatasetKind::GridPatterns => spec.spread.powi(2) + spec.separation.powi(2) / 4.0,
        DatasetKind::Concentric => {
            let k = spec.classes as f64;
            let mean_r2 = (1..=spec.classes)
                .map(|i| (i as f64 * spec.separation).powi(2))
                .sum::<f64>()
                / k;
            (mean_r2 + spec.spread.powi(2)) / d
        }
    };
    let total = class_part + spec.nuisance.powi(2) * spec.nuisance_rank as f64 / d;
    1.0 / total.sqrt()
}

/// Builds the train and validation sets, scaled to unit per-feature second
/// moment. Each split has its own random stream.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset, ConfigError> {
    if spec.classes < 2 || spec.dim == 0 || spec.per_class == 0 || spec.val_per_class == 0 {
        return Err(ConfigError::Invalid(
            "dataset needs ≥ 2 classes and positive sizes".into(),
        ));
    }
    if !(spec.spread > 0.0 && spec.separation > 0.0) {
        return Err(ConfigError::Invalid(
            "dataset spread and separation must be positive".into(),
        ));
    }
    let mut root = SeedRng::new(spec.seed);
    let mut proto_rng = root.fork(1);
    let mut train_rng = root.fork(2);
    let mut val_rng = root.fork(3);
    let protos = prototypes(spec, &mut proto_rng);
    let nuisance = nuisance_basis(spec, &mut root.fork(4));
    let c = unit_scale(spec);
    let scale = |d: LabeledData| LabeledData {
        x: d.x.map(|v| v * c),
        labels: d.labels,
    };
    let train = scale(split(
        spec,
        &protos,
        &nuisance,
        spec.per_class,
        &mut train_rng,
    ));
    let val = scale(split(
        spec,
        &protos,
        &nuisance,
        spec.val_per_class,
        &mut val_rng,
    ));
    Ok(Dataset {
        train,
        val,
        prototypes: protos
            .into_iter()
            .map(|p| p.into_iter().map(|v| v * c).collect())
            .collect(),
    })
}

/// True when no validation row appears bit-for-bit in the training set.
pub fn disjoint(a: &LabeledData, b: &LabeledData) -> bool {
    use std::collections::HashSet;
    let (n, _) = a.x.dims2().unwrap_or((0, 0));
    let key = |row: &[f64]| row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let seen: HashSet<Vec<u64>> = (0..n).map(|r| key(a.x.row(r))).collect();
    let (m, _) = b.x.dims2().unwrap_or((0, 0));
    (0..m).all(|r| !seen.contains(&key(b.x.row(r))))
}

/// Data as CSV: one row per sample, features then label.
pub fn to_csv(data: &LabeledData) -> String {
    let mut s = String::new();
    let (n, d) = data.x.dims2().unwrap_or((0, 0));
    let header: Vec<String> = (0..d)
        .map(|j| format!("x{j}"))
        .chain(["label".into()])
        .collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for r in 0..n {
        for v in data.x.row(r) {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{}\n", data.labels[r]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn blobs(classes: usize, per_class: usize, sep: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes,
            dim: 16,
            per_class,
            val_per_class: 100,
            spread: 1.0,
            separation: sep,
            nuisance: 0.0,
            nuisance_rank: 0,
            seed,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for kind in [
            DatasetKind::GaussianBlobs,
            DatasetKind::Concentric,
            DatasetKind::GridPatterns,
        ] {
            let spec = DatasetSpec {
                kind,
                ..blobs(4, 30, 6.0, 5)
            };
            assert_eq!(make_dataset(&spec).unwrap(), make_dataset(&spec).unwrap());
        }
        let a = make_dataset(&blobs(4, 30, 6.0, 5)).unwrap();
        let b = make_dataset(&blobs(4, 30, 6.0, 6)).unwrap();
        assert_ne!(a.train.x, b.train.x);
    }

    #[test]
    fn balanced_and_disjoint() {
        let ds = make_dataset(&blobs(4, 250, 6.0, 1)).unwrap();
        assert_eq!(ds.train.len(), 1000);
        for k in 0..4 {
            assert_eq!(ds.train.labels.iter().filter(|&&l| l == k).count(), 250);
        }
        assert!(disjoint(&ds.train, &ds.val));
    }

    #[test]
    fn nearest_centroid_oracle_on_separated_blobs() {
        let spec = blobs(4, 250, 12.0, 3);
        let ds = make_dataset(&spec).unwrap();
        let sigma = spec.spread * unit_scale(&spec);
        let p = &ds.prototypes;
        for i in 0..p.len() {
            for j in 0..i {
                let d: f64 = p[i]
                    .iter()
                    .zip(&p[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 4.0 * sigma, "centers {i},{j} only {d} apart");
            }
        }
        // Centroids estimated from training data only.
        let dim = 16;
        let mut cent = vec![vec![0.0; dim]; 4];
        for (r, &l) in ds.train.labels.iter().enumerate() {
            for (c, v) in cent[l].iter_mut().zip(ds.train.x.row(r)) {
                *c += v / 250.0;
            }
        }
        let correct = (0..ds.val.len())
            .filter(|&r| {
                let x = ds.val.x.row(r);
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = cent[a].iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                        let db: f64 = cent[b].iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == ds.val.labels[r]
            })
            .count();
        assert!(correct as f64 / ds.val.len() as f64 >= 0.99);
    }

    #[test]
    fn concentric_radii() {
        let spec = DatasetSpec {
            kind: DatasetKind::Concentric,
            spread: 0.1,
            ..blobs(3, 50, 2.0, 0)
        };
        let ds = make_dataset(&spec).unwrap();
        let c = unit_scale(&spec);
        for (r, &l) in ds.train.labels.iter().enumerate() {
            let n = zsq_core::tensor::norm(ds.train.x.row(r)) / c;
            assert!((n - 2.0 * (l + 1) as f64).abs() < 1.0);
        }
    }

    #[test]
    fn unit_second_moment() {
        for kind in [
            DatasetKind::GaussianBlobs,
            DatasetKind::Concentric,
            DatasetKind::GridPatterns,
        ] {
            let spec = DatasetSpec {
                kind,
                nuisance: 3.0,
                nuisance_rank: 2,
                ..blobs(5, 2000, 5.0, 9)
            };
            let ds = make_dataset(&spec).unwrap();
            let m2 = ds.train.x.data().iter().map(|v| v * v).sum::<f64>() / ds.train.x.len() as f64;
            assert!((m2 - 1.0).abs() < 0.25, "{kind:?}: {m2}");
        }
    }

    #[test]
    fn default_spec_builds() {
        let c = ExperimentConfig::default();
        let ds = make_dataset(&c.dataset).unwrap();
        assert_eq!(
            ds.train.x.dims2().unwrap(),
            (c.dataset.classes * c.dataset.per_class, c.dataset.dim)
        );
        assert!(to_csv(&ds.val).lines().count() == ds.val.len() + 1);
    }
}
