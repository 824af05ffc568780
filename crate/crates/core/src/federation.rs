//! End-to-end orchestration: warmup, one-shot topology generation, then
//! synchronous rounds of server aggregation and local client training.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{assemble_round, ClientUpload, ExpertAssignment, Variant};
use crate::config::{FederationConfig, Mode};
use crate::error::{Error, Result};
use crate::lora::{batch_loss, local_gradients, sgd_step, AdapterPair, FrozenBackbone, LayerExperts, Sample};
use crate::rng;
use crate::similarity::{layer_distance_matrix, mean_distance_matrix, DistanceMatrix};
use crate::synthetic::{generate_federation, ClientData, Federation};
use crate::topology::{
    build_merge_tree, compute_depth_schedule, fixed_schedule, independent_schedule, DepthSchedule, MergeTree,
};

/// `λ` for a layer the first time it sees a nonempty external group.
pub const INITIAL_LAMBDA: f64 = 0.5;

/// A client's persistent state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Latest cluster experts, uploaded at the end of every round.
    pub adapters: Vec<AdapterPair>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub mean_train_loss: f64,
    pub mean_test_loss: f64,
    /// `lambdas[k][l]` after local training.
    pub lambdas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { round: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: FederationConfig,
    pub tree: MergeTree,
    pub schedule: DepthSchedule,
    pub rounds: Vec<RoundReport>,
    pub final_test_losses: Vec<f64>,
    pub status: RunStatus,
}

/// Warmup similarity structure: the global tree and per-layer distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub global: DistanceMatrix,
    pub layer_distances: Vec<DistanceMatrix>,
    pub tree: MergeTree,
}

fn train_epochs(
    backbone: &FrozenBackbone,
    mut experts: Vec<LayerExperts>,
    samples: &[Sample],
    cfg: &FederationConfig,
    epochs: usize,
    stream_tags: &[u64],
    what: &str,
) -> Result<Vec<LayerExperts>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut tags = stream_tags.to_vec();
    tags.push(0);
    for epoch in 0..epochs {
        *tags.last_mut().expect("epoch tag") = epoch as u64;
        let mut r = rng::stream(cfg.seed, &tags);
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = local_gradients(backbone, &experts, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "{what}: non-finite loss in epoch {}",
                    epoch + 1
                )));
            }
            experts = experts
                .iter()
                .zip(&grads)
                .map(|(e, g)| sgd_step(e, g, cfg.eta))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{what}, epoch {}: {msg}", epoch + 1)),
                    other => other,
                })?;
        }
    }
    Ok(experts)
}

/// Runs `f` for every client in parallel and returns results in client
/// order; the first failure by client id wins.
fn per_client<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(&f).collect();
    results.into_iter().collect()
}

/// Initial adapters shared by every client: Gaussian `A`, zero `B`.
pub fn initial_adapters(backbone: &FrozenBackbone, cfg: &FederationConfig) -> Result<Vec<AdapterPair>> {
    backbone
        .layers()
        .iter()
        .enumerate()
        .map(|(l, w0)| {
            let mut r = rng::stream(cfg.seed, &[rng::ADAPTER_INIT, l as u64]);
            AdapterPair::init(w0.cols(), w0.rows(), cfg.rank, &mut r)
        })
        .collect()
}

/// `E_warm` epochs of plain local LoRA training per client.
pub fn warmup(
    backbone: &FrozenBackbone,
    clients: &[ClientData],
    cfg: &FederationConfig,
) -> Result<Vec<Vec<AdapterPair>>> {
    let init = initial_adapters(backbone, cfg)?;
    per_client(clients.len(), |k| {
        let client = &clients[k];
        let experts = init.iter().cloned().map(LayerExperts::solo).collect();
        let trained = train_epochs(
            backbone,
            experts,
            &client.train,
            cfg,
            cfg.warmup_epochs,
            &[rng::WARMUP, client.id as u64],
            &format!("warmup of client {}", client.id),
        )?;
        Ok(trained.into_iter().map(LayerExperts::into_cluster).collect())
    })
}

/// Distances from the warmup `B` factors and the global average-linkage tree.
pub fn build_topology(warm: &[Vec<AdapterPair>], cfg: &FederationConfig) -> Result<Topology> {
    let layer_distances = (0..cfg.layers)
        .map(|l| {
            let bs: Vec<_> = warm.iter().map(|layers| layers[l].b()).collect();
            layer_distance_matrix(&bs, cfg.metric)
        })
        .collect::<Result<Vec<_>>>()?;
    let global = mean_distance_matrix(&layer_distances)?;
    let tree = build_merge_tree(&global)?;
    Ok(Topology {
        global,
        layer_distances,
        tree,
    })
}

/// The aggregation schedule and combination variant implied by `cfg.mode`.
pub fn schedule_for_mode(topology: &Topology, cfg: &FederationConfig) -> Result<(DepthSchedule, Variant)> {
    let t = topology;
    Ok(match cfg.mode {
        Mode::Fedtree => (
            compute_depth_schedule(&t.tree, &t.layer_distances, cfg.tau, cfg.window)?,
            cfg.variant,
        ),
        Mode::Fedit => (fixed_schedule(&t.tree, &t.layer_distances, cfg.tau, 1)?, cfg.variant),
        Mode::FixedK(k) => (fixed_schedule(&t.tree, &t.layer_distances, cfg.tau, k)?, cfg.variant),
        Mode::LocalOnly => (
            fixed_schedule(&t.tree, &t.layer_distances, cfg.tau, cfg.clients)?,
            Variant::Isolationist,
        ),
        Mode::IndependentLayerwise => (
            independent_schedule(&t.layer_distances, cfg.tau, cfg.window)?,
            cfg.variant,
        ),
    })
}

/// A prepared experiment: data generated, warmup done, schedule fixed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: FederationConfig,
    pub federation: Federation,
    pub topology: Topology,
    schedule: DepthSchedule,
    variant: Variant,
    pub clients: Vec<ClientState>,
    next_round: usize,
}

impl Experiment {
    /// Generate, warm up and build the topology; runs once per experiment.
    pub fn prepare(cfg: &FederationConfig) -> Result<Self> {
        cfg.validate()?;
        let federation = generate_federation(cfg)?;
        let warm = warmup(&federation.backbone, &federation.clients, cfg)?;
        let topology = build_topology(&warm, cfg)?;
        let (schedule, variant) = schedule_for_mode(&topology, cfg)?;
        let clients = warm
            .into_iter()
            .enumerate()
            .map(|(id, adapters)| ClientState {
                id,
                adapters,
                lambdas: vec![INITIAL_LAMBDA; cfg.layers],
            })
            .collect();
        Ok(Experiment {
            config: cfg.clone(),
            federation,
            topology,
            schedule,
            variant,
            clients,
            next_round: 1,
        })
    }

    pub fn schedule(&self) -> &DepthSchedule {
        &self.schedule
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn uploads(&self) -> Vec<ClientUpload> {
        self.clients
            .iter()
            .map(|c| ClientUpload {
                client: c.id,
                layers: c.adapters.clone(),
                samples: self.federation.clients[c.id].train.len(),
            })
            .collect()
    }

    /// What the server would send every client for the next round.
    pub fn assignments(&self) -> Result<Vec<ExpertAssignment>> {
        let lambdas: Vec<Vec<f64>> = self.clients.iter().map(|c| c.lambdas.clone()).collect();
        assemble_round(
            &self.uploads(),
            &self.schedule,
            &lambdas,
            self.variant,
            self.config.weighting,
        )
    }

    /// One synchronous round: aggregate, train locally, collect uploads.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.next_round;
        let assignments = self.assignments()?;
        let cfg = &self.config;
        let fed = &self.federation;
        let trained = per_client(self.clients.len(), |k| {
            let data = &fed.clients[k];
            let experts = train_epochs(
                &fed.backbone,
                assignments[k].layers.clone(),
                &data.train,
                cfg,
                cfg.local_epochs,
                &[rng::ROUND, k as u64, t as u64],
                &format!("client {k} in round {t}"),
            )?;
            let train_loss = batch_loss(&fed.backbone, &experts, &data.train)?;
            let test_loss = batch_loss(&fed.backbone, &experts, &data.test)?;
            if !(train_loss.is_finite() && test_loss.is_finite()) {
                return Err(Error::Numeric(format!(
                    "client {k} in round {t}: non-finite evaluation loss"
                )));
            }
            Ok((experts, train_loss, test_loss))
        })?;

        let mut report = RoundReport {
            round: t,
            train_loss: Vec::with_capacity(trained.len()),
            test_loss: Vec::with_capacity(trained.len()),
            mean_train_loss: 0.0,
            mean_test_loss: 0.0,
            lambdas: Vec::with_capacity(trained.len()),
        };
        for (state, (experts, train_loss, test_loss)) in self.clients.iter_mut().zip(trained) {
            state.lambdas = experts.iter().map(LayerExperts::lambda).collect();
            state.adapters = experts.into_iter().map(LayerExperts::into_cluster).collect();
            report.train_loss.push(train_loss);
            report.test_loss.push(test_loss);
            report.lambdas.push(state.lambdas.clone());
        }
        let n = report.train_loss.len() as f64;
        report.mean_train_loss = report.train_loss.iter().sum::<f64>() / n;
        report.mean_test_loss = report.test_loss.iter().sum::<f64>() / n;
        self.next_round += 1;
        Ok(report)
    }

    /// Runs the remaining rounds. A numeric failure ends the run early with
    /// an aborted status and the rounds completed so far.
    pub fn run(mut self) -> Result<ExperimentReport> {
        let mut rounds = Vec::with_capacity(self.config.rounds);
        let mut status = RunStatus::Completed;
        while self.next_round <= self.config.rounds {
            match self.run_round() {
                Ok(r) => rounds.push(r),
                Err(Error::Numeric(reason)) => {
                    status = RunStatus::Aborted {
                        round: self.next_round,
                        reason,
                    };
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        let final_test_losses = rounds.last().map(|r| r.test_loss.clone()).unwrap_or_default();
        Ok(ExperimentReport {
            config: self.config,
            tree: self.topology.tree,
            schedule: self.schedule,
            rounds,
            final_test_losses,
            status,
        })
    }
}

/// Generate, warm up, build the topology (or baseline schedule), train for
/// `T` rounds and report.
pub fn run_experiment(cfg: &FederationConfig) -> Result<ExperimentReport> {
    Experiment::prepare(cfg)?.run()
}

impl ExperimentReport {
    pub fn final_mean_test_loss(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.mean_test_loss)
    }
}
