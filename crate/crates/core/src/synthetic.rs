//! Planted-hierarchy teacher/student regression federations.
//!
//! All clients share one frozen backbone. Each group's teacher adds low-rank
//! deltas to it: the same deltas for layers `1..=shared_depth`, and
//! group-specific deltas deeper down. The group deltas grow quadratically with
//! depth past `shared_depth` and reach `divergence_scale` at the output layer.
//! The backbone is initialised with a gain of 3 so the tanh units run partly
//! saturated, which damps how far deep-layer differences leak back into the
//! gradients of shallow layers.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::FederationConfig;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::lora::{FrozenBackbone, Sample};
use crate::rng;
use crate::topology::Partition;

/// Scale of the backbone weights relative to `1/sqrt(fan_in)`.
pub const BACKBONE_GAIN: f64 = 3.0;
/// Exponent of the depth ramp applied to group-specific deltas.
pub const DIVERGENCE_RAMP_POWER: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: usize,
    pub group: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub backbone: FrozenBackbone,
    /// One teacher network per group.
    pub teachers: Vec<FrozenBackbone>,
    pub clients: Vec<ClientData>,
}

pub fn group_of(cfg: &FederationConfig, client: usize) -> usize {
    client / cfg.data.clients_per_group
}

/// The planted grouping as a partition of the clients.
pub fn planted_partition(cfg: &FederationConfig) -> Partition {
    let labels: Vec<usize> = (0..cfg.clients).map(|k| group_of(cfg, k)).collect();
    Partition::from_labels(&labels)
}

/// `scale · U Vᵀ` with unit-norm-ish columns, so singular values sit near `scale`.
fn low_rank_delta<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, scale: f64, rng: &mut R) -> Matrix {
    let u = Matrix::gaussian(d_out, rank, 1.0 / (d_out as f64).sqrt(), rng);
    let v = Matrix::gaussian(rank, d_in, 1.0 / (d_in as f64).sqrt(), rng);
    u.matmul(&v).expect("rank dimensions agree").scaled(scale)
}

fn draw_samples<R: Rng + ?Sized>(
    teacher: &FrozenBackbone,
    count: usize,
    noise: &Normal<f64>,
    rng: &mut R,
) -> Vec<Sample> {
    (0..count)
        .map(|_| {
            let x: Vec<f64> = (0..teacher.input_dim()).map(|_| StandardNormal.sample(rng)).collect();
            let y = teacher.forward(&x).into_iter().map(|v| v + noise.sample(rng)).collect();
            Sample { x, y }
        })
        .collect()
}

pub fn generate_federation(cfg: &FederationConfig) -> Result<Federation> {
    cfg.validate()?;
    let spec = &cfg.data;
    let layers: Vec<Matrix> = cfg
        .dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let mut r = rng::stream(cfg.seed, &[rng::BACKBONE, l as u64]);
            Matrix::gaussian(w[1], w[0], BACKBONE_GAIN / (w[0] as f64).sqrt(), &mut r)
        })
        .collect();
    let backbone = FrozenBackbone::new(layers, cfg.activation)?;

    let teachers = (0..spec.groups)
        .map(|g| {
            let layers = backbone
                .layers()
                .iter()
                .enumerate()
                .map(|(l, w0)| {
                    let (d_out, d_in) = w0.shape();
                    let delta = if l < spec.shared_depth {
                        let mut r = rng::stream(cfg.seed, &[rng::TEACHER, 0, l as u64]);
                        low_rank_delta(d_in, d_out, cfg.rank, spec.delta_scale, &mut r)
                    } else {
                        let mut r = rng::stream(cfg.seed, &[rng::TEACHER, 1 + g as u64, l as u64]);
                        let depth = (l + 1 - spec.shared_depth) as f64 / (cfg.layers - spec.shared_depth) as f64;
                        let ramp = depth.powi(DIVERGENCE_RAMP_POWER);
                        low_rank_delta(d_in, d_out, cfg.rank, spec.divergence_scale * ramp, &mut r)
                    };
                    let mut w = w0.clone();
                    w.add_scaled(&delta, 1.0)?;
                    Ok(w)
                })
                .collect::<Result<Vec<_>>>()?;
            FrozenBackbone::new(layers, cfg.activation)
        })
        .collect::<Result<Vec<_>>>()?;

    let noise = Normal::new(0.0, spec.noise_std).expect("noise_std validated");
    let clients = (0..cfg.clients)
        .map(|id| {
            let group = group_of(cfg, id);
            let mut r = rng::stream(cfg.seed, &[rng::DATA, id as u64]);
            let train = draw_samples(&teachers[group], spec.train_samples, &noise, &mut r);
            let test = draw_samples(&teachers[group], spec.test_samples, &noise, &mut r);
            ClientData { id, group, train, test }
        })
        .collect();

    Ok(Federation {
        backbone,
        teachers,
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::AdapterPair;
    use crate::lora::{batch_loss, LayerExperts};

    fn small_cfg() -> FederationConfig {
        FederationConfig::from_json_str(
            r#"{"N": 4, "L": 3, "dims": [5, 5, 5, 5], "data": {"groups": 2, "shared_depth": 1,
                "train_samples": 20, "test_samples": 10, "input_dim": 5}}"#,
        )
        .unwrap()
    }

    #[test]
    fn zero_divergence_makes_teachers_identical() {
        let mut cfg = small_cfg();
        cfg.data.divergence_scale = 0.0;
        let fed = generate_federation(&cfg).unwrap();
        assert_eq!(fed.teachers[0], fed.teachers[1]);
        let cfg = small_cfg();
        let fed = generate_federation(&cfg).unwrap();
        assert_eq!(fed.teachers[0].layers()[0], fed.teachers[1].layers()[0]);
        assert_ne!(fed.teachers[0].layers()[2], fed.teachers[1].layers()[2]);
    }

    #[test]
    fn noiseless_teacher_fits_its_own_data() {
        let mut cfg = small_cfg();
        cfg.data.noise_std = 0.0;
        let fed = generate_federation(&cfg).unwrap();
        let teacher = &fed.teachers[1];
        let experts: Vec<LayerExperts> = teacher
            .layers()
            .iter()
            .map(|w| LayerExperts::solo(AdapterPair::zeros(w.cols(), w.rows(), 1).unwrap()))
            .collect();
        let client = fed.clients.iter().find(|c| c.group == 1).unwrap();
        assert_eq!(batch_loss(teacher, &experts, &client.train).unwrap(), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        assert_eq!(generate_federation(&cfg).unwrap(), generate_federation(&cfg).unwrap());
        let mut other = small_cfg();
        other.seed = 1;
        assert_ne!(
            generate_federation(&cfg).unwrap().clients,
            generate_federation(&other).unwrap().clients
        );
    }

    #[test]
    fn planted_groups_are_contiguous() {
        let cfg = FederationConfig::default();
        assert_eq!(planted_partition(&cfg).assignment(), &[0, 0, 0, 0, 1, 1, 1, 1]);
    }
}
