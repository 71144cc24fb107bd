//! Principal-direction reduction of a delta collection.
//!
//! The top-k left singular directions of the N x d delta matrix are found
//! through the N x N Gram matrix, so the cost is O(N^2 d) for the Gram
//! products plus O(k N d) to lift the eigenvectors, never a d x d problem.

use std::sync::Arc;

use crate::eigen::symmetric_eigen;
use crate::error::{MdmError, Result};
use crate::orthogonal::{OrthogonalBasis, Projection};
use crate::params::vecops::{axpy, dot, norm};
use crate::params::{Checkpoint, DeltaRecord, LayerLayout, Tensor};

/// Gram eigenvalues at or below `RANK_TOL * n * lambda_max` count as zero.
const RANK_TOL: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSubspace {
    basis_vectors: Vec<Vec<f64>>,
    singular_values: Vec<f64>,
    d: usize,
    energy_fraction: f64,
}

impl ReducedSubspace {
    pub fn k(&self) -> usize {
        self.basis_vectors.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn basis_vectors(&self) -> &[Vec<f64>] {
        &self.basis_vectors
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn energy_fraction(&self) -> f64 {
        self.energy_fraction
    }

    /// Coefficients of `values` along each principal direction.
    pub fn encode_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len(values.len(), self.d)?;
        Ok(self.basis_vectors.iter().map(|u| dot(values, u)).collect())
    }

    pub fn decode(&self, beta: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len(beta.len(), self.k())?;
        let mut out = vec![0.0; self.d];
        for (b, u) in beta.iter().zip(&self.basis_vectors) {
            axpy(&mut out, u, *b);
        }
        Ok(out)
    }

    /// Stored as layers `u_0001`, `u_0002`, ... plus metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (j, u) in self.basis_vectors.iter().enumerate() {
            let name = format!("u_{:04}", j + 1);
            c.insert(name.clone(), Tensor::f64(&name, vec![self.d], u.clone())?);
        }
        c.set_meta("kind", "subspace");
        c.set_meta("d", self.d.to_string());
        c.set_meta("energy_fraction", self.energy_fraction.to_string());
        let sv: Vec<String> = self.singular_values.iter().map(|s| s.to_string()).collect();
        c.set_meta("singular_values", sv.join(","));
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let d: usize = parse_meta(c, "d")?;
        let energy_fraction: f64 = parse_meta(c, "energy_fraction")?;
        let singular_values = c
            .require_meta("singular_values")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| MdmError::Format(format!("bad singular value `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut basis_vectors = Vec::new();
        for j in 0..singular_values.len() {
            let name = format!("u_{:04}", j + 1);
            let t = c
                .tensors
                .get(&name)
                .ok_or_else(|| MdmError::Format(format!("subspace lacks layer `{name}`")))?;
            crate::error::check_len(t.data().len(), d)?;
            basis_vectors.push(t.data().to_vec());
        }
        if c.tensors.len() != basis_vectors.len() {
            return Err(MdmError::Format("subspace has unexpected extra layers".into()));
        }
        Ok(Self {
            basis_vectors,
            singular_values,
            d,
            energy_fraction,
        })
    }
}

fn parse_meta<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> Result<T> {
    let s = c.require_meta(key)?;
    s.parse()
        .map_err(|_| MdmError::Format(format!("bad `{key}` value `{s}`")))
}

fn check_shared_layout(deltas: &[DeltaRecord]) -> Result<&Arc<LayerLayout>> {
    let first = deltas
        .first()
        .ok_or_else(|| MdmError::invalid("at least one delta is required"))?;
    for d in &deltas[1..] {
        first
            .layout()
            .ensure_same(d.layout(), &format!("delta `{}`", d.model_id))?;
    }
    Ok(first.layout())
}

/// Fits the top-`k` principal directions of `deltas` (uncentered).
pub fn fit_basis(deltas: &[DeltaRecord], k: usize) -> Result<ReducedSubspace> {
    let layout = check_shared_layout(deltas)?;
    let n = deltas.len();
    if k == 0 || k > n {
        return Err(MdmError::invalid(format!(
            "k = {k} must be between 1 and the number of deltas ({n})"
        )));
    }
    let d = layout.total_len();
    if k > d {
        return Err(MdmError::invalid(format!(
            "k = {k} exceeds the ambient dimension {d}"
        )));
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = dot(deltas[i].values(), deltas[j].values());
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let eig = symmetric_eigen(&gram, n);
    let total: f64 = eig.values.iter().map(|l| l.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(MdmError::Degenerate("all deltas are zero".into()));
    }
    let floor = RANK_TOL * n as f64 * eig.values[0];
    if eig.values[k - 1] <= floor {
        let rank = eig.values.iter().take_while(|&&l| l > floor).count();
        return Err(MdmError::invalid(format!(
            "k = {k} exceeds the numerical rank {rank} of the delta set"
        )));
    }

    let mut basis_vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for j in 0..k {
        let sigma = eig.values[j].sqrt();
        let mut u = vec![0.0; d];
        for (coef, delta) in eig.vectors[j].iter().zip(deltas) {
            axpy(&mut u, delta.values(), *coef);
        }
        // Re-orthonormalize against earlier directions; the Gram route loses
        // orthogonality in proportion to sigma_1 / sigma_j.
        for _ in 0..2 {
            for prev in &basis_vectors {
                let c = dot(&u, prev);
                axpy(&mut u, prev, -c);
            }
        }
        let nu = norm(&u);
        u.iter_mut().for_each(|x| *x /= nu);
        // largest-magnitude coordinate positive
        let lead = u
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, v)| *v)
            .unwrap_or(1.0);
        if lead < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        basis_vectors.push(u);
        singular_values.push(sigma);
    }
    let captured: f64 = eig.values[..k].iter().map(|l| l.max(0.0)).sum();
    Ok(ReducedSubspace {
        basis_vectors,
        singular_values,
        d,
        energy_fraction: (captured / total).clamp(0.0, 1.0),
    })
}

pub fn encode(delta: &DeltaRecord, sub: &ReducedSubspace) -> Result<Vec<f64>> {
    sub.encode_values(delta.values())
}

pub fn decode(beta: &[f64], sub: &ReducedSubspace) -> Result<Vec<f64>> {
    sub.decode(beta)
}

/// Orthogonalizes `deltas` inside their top-`k` principal subspace and lifts
/// the residuals back to full dimension.
pub fn reduced_orthogonalize(deltas: &[DeltaRecord], k: usize) -> Result<OrthogonalBasis> {
    let sub = fit_basis(deltas, k)?;
    reduced_orthogonalize_in(deltas, &sub)
}

pub fn reduced_orthogonalize_in(
    deltas: &[DeltaRecord],
    sub: &ReducedSubspace,
) -> Result<OrthogonalBasis> {
    let layout = check_shared_layout(deltas)?.clone();
    let coord_layout = Arc::new(LayerLayout::single("beta", sub.k()));
    let mut reduced = OrthogonalBasis::default();
    let mut lifted = OrthogonalBasis::default();
    for delta in deltas {
        let beta = encode(delta, sub)?;
        let mut coded = DeltaRecord::new(delta.model_id.clone(), beta, coord_layout.clone())?;
        coded.source_hash = delta.source_hash;
        coded.scale_factors = delta.scale_factors.clone();
        let p = reduced.project_onto_null_space(&coded)?;
        let accepted = match p {
            Projection::Accepted { residual, .. }
                if residual.norm() > reduced.eps_drop() * delta.norm() =>
            {
                Some(residual)
            }
            _ => None,
        };
        match accepted {
            Some(residual) => {
                let full = sub.decode(residual.values())?;
                let mut member = DeltaRecord::new(delta.model_id.clone(), full, layout.clone())?;
                member.source_hash = delta.source_hash;
                member.scale_factors = delta.scale_factors.clone();
                member.orthogonalized = true;
                reduced.push_member(residual);
                lifted.push_member(member);
            }
            None => {
                reduced.push_dropped(delta.model_id.clone(), "degenerate residual");
                lifted.push_dropped(delta.model_id.clone(), "degenerate residual");
            }
        }
    }
    Ok(lifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthogonal::{orthogonality_check, orthogonalize_sequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(id: &str, v: Vec<f64>) -> DeltaRecord {
        DeltaRecord::from_vec(id, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<DeltaRecord> {
        (0..n)
            .map(|i| d(&format!("t{i}"), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_one_collection() {
        let v = vec![1.0, -2.0, 2.0];
        let ds: Vec<_> = (1..=4)
            .map(|i| d(&format!("c{i}"), v.iter().map(|x| x * i as f64).collect()))
            .collect();
        let sub = fit_basis(&ds, 1).unwrap();
        let u = &sub.basis_vectors()[0];
        // sign convention puts the largest-magnitude coordinate positive;
        // |-2| ties |2|, the earlier index wins, so u = -v/|v|
        let expect: Vec<f64> = v.iter().map(|x| -x / 3.0).collect();
        assert!(dist(u, &expect) < 1e-12, "{u:?}");
        assert!((sub.energy_fraction() - 1.0).abs() < 1e-12);
        assert!(fit_basis(&ds, 2).is_err());
    }

    #[test]
    fn two_orthogonal_deltas() {
        let ds = vec![d("a", vec![3.0, 0.0, 0.0]), d("b", vec![0.0, 0.0, -1.0])];
        let sub = fit_basis(&ds, 2).unwrap();
        assert!((sub.energy_fraction() - 1.0).abs() < 1e-12);
        assert_eq!(sub.singular_values(), &[3.0, 1.0]);
        for delta in &ds {
            let back = decode(&encode(delta, &sub).unwrap(), &sub).unwrap();
            assert!(dist(&back, delta.values()) <= 1e-10);
        }
    }

    #[test]
    fn full_rank_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = random(&mut rng, 8, 100);
        let sub = fit_basis(&ds, 8).unwrap();
        for delta in &ds {
            let back = decode(&encode(delta, &sub).unwrap(), &sub).unwrap();
            assert!(dist(&back, delta.values()) <= 1e-8 * delta.norm());
        }
        for (i, u) in sub.basis_vectors().iter().enumerate() {
            for (j, w) in sub.basis_vectors().iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(u, w) - expect).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn encode_decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random(&mut rng, 4, 30);
        let sub = fit_basis(&ds, 3).unwrap();
        let u1 = d("u", sub.basis_vectors()[0].clone());
        let beta = encode(&u1, &sub).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && beta[1].abs() < 1e-12 && beta[2].abs() < 1e-12);

        // a vector orthogonal to the span
        let mut w: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in sub.basis_vectors() {
            let c = dot(&w, u);
            axpy(&mut w, u, -c);
        }
        let beta = encode(&d("w", w), &sub).unwrap();
        assert!(beta.iter().all(|b| b.abs() <= 1e-10));

        assert!(decode(&[0.0; 3], &sub).unwrap().iter().all(|x| *x == 0.0));
        let e2 = decode(&[0.0, 1.0, 0.0], &sub).unwrap();
        assert_eq!(e2, sub.basis_vectors()[1]);
        assert!(decode(&[0.0; 2], &sub).is_err());
        assert!(encode(&d("short", vec![0.0; 5]), &sub).is_err());
    }

    #[test]
    fn pythagorean_reconstruction_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = random(&mut rng, 6, 40);
        for k in 1..=6 {
            let sub = fit_basis(&ds, k).unwrap();
            for delta in &ds {
                let beta = encode(delta, &sub).unwrap();
                let back = decode(&beta, &sub).unwrap();
                // the captured share of this delta's own energy is |beta|^2/|delta|^2
                let captured = beta.iter().map(|b| b * b).sum::<f64>() / delta.norm().powi(2);
                let bound = delta.norm() * (1.0 - captured).max(0.0).sqrt();
                assert!(dist(&back, delta.values()) <= bound + 1e-10);
            }
        }
    }

    #[test]
    fn decode_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = random(&mut rng, 5, 20);
        let sub = fit_basis(&ds, 4).unwrap();
        for _ in 0..20 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = decode(&ab, &sub).unwrap();
            let da = decode(&a, &sub).unwrap();
            let db = decode(&b, &sub).unwrap();
            for ((l, x), y) in lhs.iter().zip(&da).zip(&db) {
                assert!((l - (x + y)).abs() <= 1e-12 * (1.0 + l.abs()));
            }
        }
    }

    #[test]
    fn energy_fraction_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ds = random(&mut rng, 7, 50);
        let mut last = 0.0;
        for k in 1..=7 {
            let e = fit_basis(&ds, k).unwrap().energy_fraction();
            assert!(e >= last - 1e-15);
            last = e;
        }
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reduced_full_rank_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ds = random(&mut rng, 6, 80);
        let direct = orthogonalize_sequence(&ds).unwrap();
        let reduced = reduced_orthogonalize(&ds, 6).unwrap();
        assert_eq!(reduced.len(), 6);
        assert!(orthogonality_check(&reduced).max_abs_cosine <= 1e-8);
        for (a, b) in direct.members().iter().zip(reduced.members()) {
            assert_eq!(a.model_id, b.model_id);
            assert!(dist(a.values(), b.values()) <= 1e-8 * a.norm());
        }
    }

    #[test]
    fn one_dimensional_space_holds_one_direction() {
        let ds = vec![d("a", vec![1.0, 0.5, 0.0]), d("b", vec![0.0, 1.0, 1.0])];
        let b = reduced_orthogonalize(&ds, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.dropped()[0].model_id, "b");
    }

    #[test]
    fn errors() {
        assert!(fit_basis(&[], 1).is_err());
        let z = vec![d("a", vec![0.0; 3]), d("b", vec![0.0; 3])];
        assert!(matches!(fit_basis(&z, 1), Err(MdmError::Degenerate(_))));
        let ds = vec![d("a", vec![1.0, 0.0])];
        assert!(fit_basis(&ds, 2).is_err());
        assert!(fit_basis(&ds, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ds = random(&mut rng, 3, 10);
        let sub = fit_basis(&ds, 2).unwrap();
        let back = ReducedSubspace::from_checkpoint(&sub.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, sub);
    }
}
