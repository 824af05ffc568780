//! Server-side expert synthesis: peer and external groups per layer, the
//! cluster/external means, and the per-client assignments for a round.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{AdapterPair, LayerExperts};
use crate::topology::{DepthSchedule, Partition};

/// How the cluster and external experts are combined on the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    ScalarMixed,
    /// Cluster expert only; externals are always zero and `λ` stays at 1.
    Isolationist,
}

/// Per-client weights inside each mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    BySamples,
}

/// A client's updated cluster experts after local training. `λ` stays local.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client: usize,
    pub layers: Vec<AdapterPair>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAssignment {
    pub client: usize,
    pub layers: Vec<LayerExperts>,
}

/// `(S, R)`: the client's own cluster and everybody else, both ascending.
pub fn peer_groups(p: &Partition, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if k >= p.len() {
        return Err(Error::InvalidArgument(format!("client {k} outside [0, {})", p.len())));
    }
    let own = p.cluster_of(k);
    let (peers, others) = (0..p.len()).partition(|&j| p.cluster_of(j) == own);
    Ok((peers, others))
}

fn find_upload(uploads: &[ClientUpload], client: usize) -> Result<&ClientUpload> {
    uploads
        .iter()
        .find(|u| u.client == client)
        .ok_or_else(|| Error::Protocol(format!("missing upload from client {client}")))
}

/// Mean of layer `l` over `members`, summed in ascending id order and divided once.
fn mean_pair(uploads: &[ClientUpload], members: &[usize], l: usize, weighting: Weighting) -> Result<AdapterPair> {
    let mut a: Option<Matrix> = None;
    let mut b: Option<Matrix> = None;
    let mut total = 0.0;
    for &j in members {
        let up = find_upload(uploads, j)?;
        let pair = up
            .layers
            .get(l)
            .ok_or_else(|| Error::Protocol(format!("client {j} uploaded no layer {}", l + 1)))?;
        let w = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::BySamples => up.samples as f64,
        };
        total += w;
        match (&mut a, &mut b) {
            (Some(sa), Some(sb)) => {
                if sa.shape() != pair.a().shape() || sb.shape() != pair.b().shape() {
                    return Err(Error::Protocol(format!(
                        "client {j} uploaded a mismatched layer {} shape",
                        l + 1
                    )));
                }
                sa.add_scaled(pair.a(), w)?;
                sb.add_scaled(pair.b(), w)?;
            }
            _ => {
                a = Some(pair.a().scaled(w));
                b = Some(pair.b().scaled(w));
            }
        }
    }
    let (a, b) = a
        .zip(b)
        .ok_or_else(|| Error::InvalidArgument("mean over an empty group".into()))?;
    if total <= 0.0 {
        return Err(Error::InvalidArgument("group weights sum to zero".into()));
    }
    AdapterPair::new(a.divided(total), b.divided(total))
}

/// Cluster and external experts for client `k` at layer `l`. `lambda` is
/// the client's persisted coefficient; it is forced to 1 when the external
/// group is empty.
pub fn build_experts(
    uploads: &[ClientUpload],
    p: &Partition,
    k: usize,
    l: usize,
    lambda: f64,
    weighting: Weighting,
) -> Result<LayerExperts> {
    for client in 0..p.len() {
        find_upload(uploads, client)?;
    }
    let (peers, others) = peer_groups(p, k)?;
    let cluster = mean_pair(uploads, &peers, l, weighting)?;
    if others.is_empty() {
        return Ok(LayerExperts::solo(cluster));
    }
    let external = mean_pair(uploads, &others, l, weighting)?;
    LayerExperts::mixed(cluster, external, lambda)
}

/// Assignments for every client under `schedule`. `lambdas[k][l]` is client
/// `k`'s persisted coefficient for layer `l`.
pub fn assemble_round(
    uploads: &[ClientUpload],
    schedule: &DepthSchedule,
    lambdas: &[Vec<f64>],
    variant: Variant,
    weighting: Weighting,
) -> Result<Vec<ExpertAssignment>> {
    let n = lambdas.len();
    for client in 0..n {
        let up = find_upload(uploads, client)?;
        if up.layers.len() != schedule.depth() {
            return Err(Error::dim(
                format!("layers uploaded by client {client}"),
                schedule.depth(),
                up.layers.len(),
            ));
        }
    }
    (0..n)
        .map(|k| {
            let layers = schedule
                .partitions
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    if p.len() != n {
                        return Err(Error::dim(format!("partition size at layer {}", l + 1), n, p.len()));
                    }
                    match variant {
                        Variant::ScalarMixed => build_experts(uploads, p, k, l, lambdas[k][l], weighting),
                        Variant::Isolationist => {
                            let (peers, _) = peer_groups(p, k)?;
                            Ok(LayerExperts::solo(mean_pair(uploads, &peers, l, weighting)?))
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExpertAssignment { client: k, layers })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uploads(seed: u64, n: usize, layers: usize) -> Vec<ClientUpload> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|client| ClientUpload {
                client,
                layers: (0..layers)
                    .map(|_| {
                        AdapterPair::new(
                            Matrix::gaussian(2, 3, 1.0, &mut rng),
                            Matrix::gaussian(4, 2, 1.0, &mut rng),
                        )
                        .unwrap()
                    })
                    .collect(),
                samples: 10 + client,
            })
            .collect()
    }

    fn schedule(parts: &[&[usize]]) -> DepthSchedule {
        let partitions: Vec<Partition> = parts.iter().map(|l| Partition::from_labels(l)).collect();
        DepthSchedule {
            counts: partitions.iter().map(Partition::count).collect(),
            scores: vec![0.0; partitions.len()],
            partitions,
        }
    }

    #[test]
    fn peer_group_examples() {
        assert_eq!(peer_groups(&Partition::single(3), 1).unwrap(), (vec![0, 1, 2], vec![]));
        assert_eq!(
            peer_groups(&Partition::singletons(3), 1).unwrap(),
            (vec![1], vec![0, 2])
        );
        let p = Partition::from_labels(&[0, 0, 1, 1]);
        assert_eq!(peer_groups(&p, 2).unwrap(), (vec![2, 3], vec![0, 1]));
        assert!(peer_groups(&p, 4).is_err());
    }

    #[test]
    fn singleton_cluster_returns_own_upload() {
        let ups = uploads(1, 3, 1);
        let e = build_experts(&ups, &Partition::singletons(3), 1, 0, 0.4, Weighting::Uniform).unwrap();
        assert_eq!(e.cluster(), &ups[1].layers[0]);
        assert_eq!(e.lambda(), 0.4);
        assert!(!e.external_zeroed());
    }

    #[test]
    fn full_cluster_zeroes_the_external() {
        let ups = uploads(2, 3, 1);
        let e = build_experts(&ups, &Partition::single(3), 0, 0, 0.4, Weighting::Uniform).unwrap();
        assert!(e.external_zeroed() && e.lambda_frozen());
        assert_eq!(e.lambda(), 1.0);
    }

    #[test]
    fn two_member_mean_is_entrywise() {
        let ups = uploads(3, 3, 1);
        let p = Partition::from_labels(&[0, 0, 1]);
        let e = build_experts(&ups, &p, 0, 0, 0.5, Weighting::Uniform).unwrap();
        for (i, v) in e.cluster().b().as_slice().iter().enumerate() {
            let expect = (ups[0].layers[0].b().as_slice()[i] + ups[1].layers[0].b().as_slice()[i]) / 2.0;
            assert_eq!(*v, expect);
        }
        for (i, v) in e.cluster().a().as_slice().iter().enumerate() {
            let expect = (ups[0].layers[0].a().as_slice()[i] + ups[1].layers[0].a().as_slice()[i]) / 2.0;
            assert_eq!(*v, expect);
        }
        assert_eq!(e.external(), &ups[2].layers[0]);
    }

    #[test]
    fn sample_weighting_uses_counts() {
        let ups = uploads(4, 2, 1);
        let e = build_experts(&ups, &Partition::single(2), 0, 0, 1.0, Weighting::BySamples).unwrap();
        let v = e.cluster().b().as_slice()[0];
        let expect = (10.0 * ups[0].layers[0].b().as_slice()[0] + 11.0 * ups[1].layers[0].b().as_slice()[0]) / 21.0;
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn missing_upload_is_a_protocol_error_naming_the_client() {
        let mut ups = uploads(5, 3, 1);
        ups.remove(1);
        let err = build_experts(&ups, &Partition::single(3), 0, 0, 1.0, Weighting::Uniform).unwrap_err();
        assert!(matches!(&err, Error::Protocol(m) if m.contains("client 1")), "{err}");
    }

    #[test]
    fn all_ones_schedule_is_fedavg_for_everyone() {
        let ups = uploads(6, 4, 2);
        let a = assemble_round(
            &ups,
            &schedule(&[&[0; 4], &[0; 4]]),
            &vec![vec![0.5; 2]; 4],
            Variant::ScalarMixed,
            Weighting::Uniform,
        )
        .unwrap();
        for x in &a {
            assert_eq!(x.layers, a[0].layers);
            assert!(x.layers.iter().all(|e| e.external_zeroed() && e.lambda() == 1.0));
        }
    }

    #[test]
    fn singleton_schedule_returns_own_parameters_with_others_as_external() {
        let ups = uploads(7, 3, 1);
        let a = assemble_round(
            &ups,
            &schedule(&[&[0, 1, 2]]),
            &vec![vec![0.5]; 3],
            Variant::ScalarMixed,
            Weighting::Uniform,
        )
        .unwrap();
        for (k, x) in a.iter().enumerate() {
            assert_eq!(x.layers[0].cluster(), &ups[k].layers[0]);
            let others: Vec<usize> = (0..3).filter(|&j| j != k).collect();
            let expect =
                (ups[others[0]].layers[0].b().as_slice()[0] + ups[others[1]].layers[0].b().as_slice()[0]) / 2.0;
            assert_eq!(x.layers[0].external().b().as_slice()[0], expect);
        }
    }

    #[test]
    fn mixed_schedule_shares_by_layer() {
        let ups = uploads(8, 4, 2);
        let a = assemble_round(
            &ups,
            &schedule(&[&[0; 4], &[0, 0, 1, 1]]),
            &vec![vec![0.5; 2]; 4],
            Variant::ScalarMixed,
            Weighting::Uniform,
        )
        .unwrap();
        // Direct evaluation of the two-pair means.
        let mean = |members: &[usize]| -> Vec<f64> {
            let len = ups[0].layers[1].b().as_slice().len();
            (0..len)
                .map(|i| {
                    members.iter().map(|&j| ups[j].layers[1].b().as_slice()[i]).sum::<f64>() / members.len() as f64
                })
                .collect()
        };
        for x in &a {
            assert_eq!(x.layers[0], a[0].layers[0]);
        }
        assert_eq!(a[0].layers[1].cluster(), a[1].layers[1].cluster());
        assert_eq!(a[2].layers[1].cluster(), a[3].layers[1].cluster());
        assert_ne!(a[0].layers[1].cluster(), a[2].layers[1].cluster());
        assert_eq!(a[0].layers[1].cluster().b().as_slice(), mean(&[0, 1]).as_slice());
        assert_eq!(a[0].layers[1].external().b().as_slice(), mean(&[2, 3]).as_slice());
    }

    #[test]
    fn isolationist_never_exposes_externals() {
        let ups = uploads(9, 4, 2);
        let a = assemble_round(
            &ups,
            &schedule(&[&[0, 0, 1, 1], &[0, 1, 2, 3]]),
            &vec![vec![0.3; 2]; 4],
            Variant::Isolationist,
            Weighting::Uniform,
        )
        .unwrap();
        for x in &a {
            for e in &x.layers {
                assert!(e.external_zeroed() && e.lambda() == 1.0);
                assert!(e.external().a().is_zero() && e.external().b().is_zero());
            }
        }
    }

    #[test]
    fn wrong_layer_count_is_rejected() {
        let ups = uploads(10, 2, 1);
        assert!(assemble_round(
            &ups,
            &schedule(&[&[0, 0], &[0, 1]]),
            &vec![vec![1.0; 2]; 2],
            Variant::ScalarMixed,
            Weighting::Uniform
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn means_are_convex_and_assembly_is_deterministic(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups = uploads(seed, n, 2);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sched = schedule(&[&labels, &labels]);
            let lambdas = vec![vec![0.5; 2]; n];
            let a = assemble_round(&ups, &sched, &lambdas, Variant::ScalarMixed, Weighting::Uniform).unwrap();
            prop_assert_eq!(&a, &assemble_round(&ups, &sched, &lambdas, Variant::ScalarMixed, Weighting::Uniform).unwrap());
            for l in 0..2 {
                let max_b = ups.iter().map(|u| u.layers[l].b().frobenius_norm()).fold(0.0, f64::max);
                for x in &a {
                    let e = &x.layers[l];
                    prop_assert!(e.cluster().b().frobenius_norm() <= max_b + 1e-12);
                    prop_assert!(e.external().b().frobenius_norm() <= max_b + 1e-12);
                    prop_assert_eq!(e.external_zeroed(), sched.partitions[l].count() == 1);
                }
                for (i, xi) in a.iter().enumerate() {
                    for xj in &a[i + 1..] {
                        if labels_equal(&sched.partitions[l], i, xj.client) {
                            prop_assert_eq!(xi.layers[l].cluster(), xj.layers[l].cluster());
                        }
                    }
                }
            }
        }

        #[test]
        fn relabeling_clients_permutes_assignments(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups = uploads(seed, n, 1);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // Client k becomes perm[k].
            let mut moved: Vec<ClientUpload> = ups.iter().map(|u| ClientUpload { client: perm[u.client], ..u.clone() }).collect();
            moved.sort_by_key(|u| u.client);
            let mut moved_labels = vec![0; n];
            for k in 0..n {
                moved_labels[perm[k]] = labels[k];
            }
            let lambdas = vec![vec![0.5]; n];
            let a = assemble_round(&ups, &schedule(&[&labels]), &lambdas, Variant::ScalarMixed, Weighting::Uniform).unwrap();
            let b = assemble_round(&moved, &schedule(&[&moved_labels]), &lambdas, Variant::ScalarMixed, Weighting::Uniform).unwrap();
            for k in 0..n {
                let (x, y) = (&a[k].layers[0], &b[perm[k]].layers[0]);
                prop_assert!(x.cluster().b().max_abs_diff(y.cluster().b()) <= 1e-12);
                prop_assert!(x.external().b().max_abs_diff(y.external().b()) <= 1e-12);
                prop_assert_eq!(x.external_zeroed(), y.external_zeroed());
            }
        }
    }

    fn labels_equal(p: &Partition, i: usize, j: usize) -> bool {
        p.cluster_of(i) == p.cluster_of(j)
    }
}
