//! Federated training engine: server round loop, dataset-size weighted
//! aggregation of the shared imaging weights, and local training that
//! updates the shared weights together with a private hypernetwork.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use hyperfed_tensor::{Adam, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_params, encode_params};
use crate::dataset::{derive_seed, Dataset, Task};
use crate::error::{config_err, Error, Result};
use crate::film::FiLMParams;
use crate::hypernet::{encode_geometry, hyper_forward, hyper_forward_tape, GeometryBounds, GeometryVector, HyperParams};
use crate::metrics::{psnr, serialize_real, ssim, deserialize_real, SampleMetric, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::nets::{ImagingNet, ImagingParams, NetInput, ReconOperator};
use crate::physics::{fbp_reconstruct, FilterKind, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "local_only")]
    LocalOnly,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "hyperfed")]
    HyperFed,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::LocalOnly, Self::FedAvg, Self::FedProx, Self::HyperFed];

    pub fn name(self) -> &'static str {
        match self {
            Self::LocalOnly => "local_only",
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::HyperFed => "hyperfed",
        }
    }

    pub fn federated(self) -> bool {
        self != Self::LocalOnly
    }

    pub fn uses_hypernet(self) -> bool {
        self == Self::HyperFed
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown strategy `{s}` (local_only, fedavg, fedprox, hyperfed)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: StrategyKind,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    pub rounds: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_fedprox_mu")]
    pub fedprox_mu: f64,
}

fn default_local_epochs() -> usize {
    3
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_fedprox_mu() -> f64 {
    1e-4
}

impl StrategyConfig {
    pub fn new(strategy: StrategyKind, rounds: usize) -> Self {
        Self {
            strategy,
            local_epochs: default_local_epochs(),
            rounds,
            learning_rate: default_learning_rate(),
            fedprox_mu: default_fedprox_mu(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err(format!(
                "strategy.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.fedprox_mu.is_finite() && self.fedprox_mu >= 0.0) {
            return Err(config_err(format!(
                "strategy.fedprox_mu must be non-negative, got {}",
                self.fedprox_mu
            )));
        }
        Ok(())
    }

    fn prox_mu(&self) -> f64 {
        if self.strategy == StrategyKind::FedProx {
            self.fedprox_mu
        } else {
            0.0
        }
    }
}

/// An institution's parameters: shared imaging weights and the private
/// hypernetwork, which never leaves the institution.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedModel<T> {
    pub institution_id: u32,
    pub shared_w: ImagingParams<T>,
    pub private_xi: HyperParams<T>,
}

/// One input/target pair ready for the network.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub input: NetInput<T>,
    /// `[1, 1, n, n]`.
    pub target: Tensor<T>,
}

/// Everything an institution holds locally.
#[derive(Debug, Clone)]
pub struct ClientData<T> {
    pub institution_id: u32,
    pub geometry_raw: [f64; 7],
    pub train: Vec<Example<T>>,
    pub test: Vec<Example<T>>,
}

impl<T: Real> ClientData<T> {
    /// Converts simulated splits into network inputs. Reconstruction inputs
    /// get an FBP initial image and the acquisition's projector.
    pub fn from_datasets(train: &Dataset, test: &Dataset, filter: FilterKind) -> Result<Self> {
        if train.geometry != test.geometry || train.task != test.task || train.institution_id != test.institution_id {
            return Err(config_err("train and test splits come from different acquisitions"));
        }
        let operator = match train.task {
            Task::Reconstruction => Some(Arc::new(ReconOperator::new(&train.geometry)?)),
            Task::PostProcessing => None,
        };
        let convert = |ds: &Dataset| -> Result<Vec<Example<T>>> {
            ds.records
                .iter()
                .map(|r| {
                    let target: Tensor<T> = r.target.cast();
                    let n = target.shape()[0];
                    let input = match &operator {
                        None => NetInput::image(&r.degraded_input.cast())?,
                        Some(op) => {
                            let y: Tensor<f64> = r.degraded_input.cast();
                            let init = fbp_reconstruct(&Sinogram::new(y.clone(), ds.geometry.clone())?, &ds.geometry, filter)?;
                            NetInput::sinogram(&y.cast(), &init.cast(), op.clone())?
                        }
                    };
                    Ok(Example {
                        input,
                        target: target.reshape(&[1, 1, n, n])?,
                    })
                })
                .collect()
        };
        Ok(Self {
            institution_id: train.institution_id,
            geometry_raw: train.geometry.raw_vector(),
            train: convert(train)?,
            test: convert(test)?,
        })
    }
}

/// Convex weights `sizes[k] / Σ sizes`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Contract("no clients to aggregate".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Contract("client dataset sizes must be positive".into()));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    Ok(sizes.iter().map(|&s| s as f64 / total).collect())
}

/// Dataset-size weighted average of the clients' shared weights,
/// accumulated in `f64` and clamped to the clients' elementwise range.
pub fn aggregate<T: Real>(client_ws: &[ImagingParams<T>], sizes: &[usize]) -> Result<ImagingParams<T>> {
    if client_ws.len() != sizes.len() {
        return Err(Error::Contract(format!(
            "{} parameter sets but {} sizes",
            client_ws.len(),
            sizes.len()
        )));
    }
    let weights = aggregation_weights(sizes)?;
    let first = &client_ws[0];
    if client_ws.iter().any(|w| !w.congruent(first)) {
        return Err(Error::Contract("client parameter shapes differ".into()));
    }
    let blocks = (0..first.blocks.len())
        .map(|b| {
            let len = first.blocks[b].len();
            let data = (0..len)
                .map(|i| {
                    let (mut acc, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
                    for (w, &a) in client_ws.iter().zip(&weights) {
                        let v = w.blocks[b].data()[i].as_f64();
                        acc += a * v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    T::of(acc.clamp(lo, hi))
                })
                .collect();
            Tensor::new(first.blocks[b].shape(), data).map_err(Error::from)
        })
        .collect::<Result<_>>()?;
    Ok(ImagingParams {
        blocks,
        layout: first.layout.clone(),
    })
}

/// Per-client optimizer state; Adam moments persist across rounds.
#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub model: PartitionedModel<T>,
    pub optimizer: Adam<T>,
    pub geometry: GeometryVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStats {
    /// Mean data loss over the last local epoch (NaN when no step ran).
    pub train_loss: f64,
    pub steps: usize,
}

fn modulation<T: Real>(
    net: &ImagingNet,
    strategy: StrategyKind,
    model: &PartitionedModel<T>,
    g: &GeometryVector,
) -> Result<FiLMParams<T>> {
    let layout = net.layout();
    if strategy.uses_hypernet() {
        hyper_forward(g, &model.private_xi, &layout)
    } else {
        Ok(FiLMParams::identity(&layout))
    }
}

/// Runs `local_epochs` passes over `train` in order, one Adam step per
/// example. HyperFed updates the shared weights and the hypernetwork
/// jointly; the other strategies use identity modulation and update only
/// the shared weights. FedProx adds `(μ/2)‖w − global_w‖²`.
pub fn local_train<T: Real>(
    net: &ImagingNet,
    state: &mut ClientState<T>,
    train: &[Example<T>],
    strategy: &StrategyConfig,
    global_w: &ImagingParams<T>,
) -> Result<LocalStats> {
    strategy.validate()?;
    if strategy.local_epochs > 0 && train.is_empty() {
        return Err(config_err(format!(
            "institution {} has no training data",
            state.model.institution_id
        )));
    }
    net.check_params(&state.model.shared_w)?;
    if !state.model.shared_w.congruent(global_w) {
        return Err(Error::Contract("global weights do not match the local layout".into()));
    }
    let kind = strategy.strategy;
    let mu = strategy.prox_mu();
    let layout = net.layout();
    let identity = FiLMParams::<T>::identity(&layout);
    let mut tape = Tape::new();
    let mut last_epoch_loss = f64::NAN;
    let mut steps = 0;
    for _ in 0..strategy.local_epochs {
        let mut epoch_loss = 0.0;
        for ex in train {
            tape.clear();
            let model = &mut state.model;
            let w = model.shared_w.register(&mut tape, true);
            let xi = kind.uses_hypernet().then(|| model.private_xi.register(&mut tape, true));
            let film = match &xi {
                Some(v) => hyper_forward_tape(&mut tape, v, &state.geometry, &layout)?,
                None => identity.register(&mut tape),
            };
            let out = net.forward_tape(&mut tape, &w, Some(&film), &ex.input)?;
            let target = tape.constant(ex.target.clone());
            let data_loss = tape.mse(out, target)?;
            let mut loss = data_loss;
            if mu > 0.0 {
                let prox = fedprox_penalty_tape(&mut tape, &w, global_w, mu)?;
                loss = tape.add(loss, prox)?;
            }
            tape.backward(loss)?;
            epoch_loss += tape.value(data_loss).data()[0].as_f64();

            let mut grads: Vec<Tensor<T>> = w.iter().map(|&v| tape.grad(v)).collect();
            let mut params: Vec<&mut Tensor<T>> = model.shared_w.blocks.iter_mut().collect();
            if let Some(v) = &xi {
                grads.extend([v.w1, v.b1, v.w2, v.b2].map(|v| tape.grad(v)));
                params.extend(model.private_xi.tensors_mut());
            }
            state.optimizer.step(&mut params, &grads)?;
            steps += 1;
        }
        last_epoch_loss = epoch_loss / train.len() as f64;
    }
    Ok(LocalStats {
        train_loss: last_epoch_loss,
        steps,
    })
}

/// `(μ/2) Σ ‖w_b − global_b‖²` on the tape.
pub fn fedprox_penalty_tape<T: Real>(
    tape: &mut Tape<T>,
    w: &[hyperfed_tensor::Var],
    global_w: &ImagingParams<T>,
    mu: f64,
) -> Result<hyperfed_tensor::Var> {
    if w.len() != global_w.blocks.len() {
        return Err(Error::Contract("proximal term needs congruent weights".into()));
    }
    let mut acc = None;
    for (&v, g) in w.iter().zip(&global_w.blocks) {
        let gv = tape.constant(g.clone());
        let d = tape.sub(v, gv)?;
        let s = tape.sum_sq(d)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Contract("no weights".into()))?;
    Ok(tape.scale(acc, T::of(mu / 2.0))?)
}

/// Test metrics of one institution's personalized model.
pub fn evaluate<T: Real>(
    net: &ImagingNet,
    model: &PartitionedModel<T>,
    strategy: StrategyKind,
    g: &GeometryVector,
    examples: &[Example<T>],
) -> Result<Vec<SampleMetric>> {
    let film = modulation(net, strategy, model, g)?;
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let out = net.forward(&model.shared_w, Some(&film), &ex.input)?;
            let n = ex.target.shape()[3];
            let window = SSIM_WINDOW.min(n - (1 - n % 2));
            Ok(SampleMetric {
                institution: model.institution_id,
                sample: i,
                psnr: psnr(&out, &ex.target, 1.0)?,
                ssim: ssim(&out, &ex.target, window, SSIM_K1, SSIM_K2, 1.0)?,
            })
        })
        .collect()
}

/// Predictions of one institution's personalized model.
pub fn predict<T: Real>(
    net: &ImagingNet,
    model: &PartitionedModel<T>,
    strategy: StrategyKind,
    g: &GeometryVector,
    input: &NetInput<T>,
) -> Result<Tensor<T>> {
    let film = modulation(net, strategy, model, g)?;
    net.forward(&model.shared_w, Some(&film), input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Broadcast,
    Upload,
}

/// One message between the server and an institution.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub round: usize,
    pub institution_id: u32,
    pub direction: Direction,
    /// Exact bytes on the wire: `u64` sample count, then an HFCK block of
    /// the shared weights.
    pub bytes: Vec<u8>,
}

fn wire_encode<T: Real>(w: &ImagingParams<T>, n_samples: usize) -> Result<Vec<u8>> {
    let mut out = (n_samples as u64).to_le_bytes().to_vec();
    out.extend(encode_params(w)?);
    Ok(out)
}

fn wire_decode<T: Real>(bytes: &[u8]) -> Result<(ImagingParams<T>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Format("payload shorter than its size header".into()));
    }
    let mut n = [0u8; 8];
    n.copy_from_slice(&bytes[..8]);
    Ok((decode_params(&bytes[8..])?, u64::from_le_bytes(n) as usize))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub institution: u32,
    #[serde(serialize_with = "serialize_real", deserialize_with = "deserialize_real")]
    pub train_loss: f64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRound>,
    /// Excluded from reproducibility comparisons.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Evaluate test sets every this many rounds (0: never) and always after
    /// the last round.
    pub eval_every: usize,
    pub record_payloads: bool,
    /// Train clients of a round concurrently on the current rayon pool.
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_every: 1,
            record_payloads: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub initial_w: ImagingParams<T>,
    /// Latest aggregate (equals `initial_w` for local-only training).
    pub global_w: ImagingParams<T>,
    pub models: Vec<PartitionedModel<T>>,
    pub geometry: Vec<GeometryVector>,
    pub history: Vec<RoundRecord>,
    pub payloads: Vec<Payload>,
}

/// Server-side initial weights drawn from the `init` sub-stream of `seed`.
pub fn initial_model<T: Real>(
    net: &ImagingNet,
    hyper_hidden: usize,
    seed: u64,
) -> Result<(ImagingParams<T>, HyperParams<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    let w = net.init(&mut rng)?;
    let xi = HyperParams::init(hyper_hidden, &net.layout(), &mut rng)?;
    Ok((w, xi))
}

fn mean(v: &[SampleMetric], f: impl Fn(&SampleMetric) -> f64) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().map(f).sum::<f64>() / v.len() as f64)
}

/// Executes the round loop: initialize once on the server, deliver to every
/// institution, then per round broadcast, train locally and aggregate.
/// Local-only training skips broadcast and aggregation.
pub fn run_rounds<T: Real>(
    net: &ImagingNet,
    clients: &[ClientData<T>],
    bounds: &GeometryBounds,
    strategy: &StrategyConfig,
    hyper_hidden: usize,
    seed: u64,
    opts: RunOptions,
) -> Result<RunOutcome<T>> {
    if clients.is_empty() {
        return Err(config_err("at least one institution is required"));
    }
    strategy.validate()?;
    net.validate()?;
    let (initial_w, xi0) = initial_model::<T>(net, hyper_hidden, seed)?;
    let mut states = clients
        .iter()
        .map(|c| {
            Ok(ClientState {
                model: PartitionedModel {
                    institution_id: c.institution_id,
                    shared_w: initial_w.clone(),
                    private_xi: xi0.clone(),
                },
                optimizer: Adam::new(T::of(strategy.learning_rate)),
                geometry: encode_geometry(&c.geometry_raw, bounds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = clients.iter().map(|c| c.train.len()).collect();
    let mut global_w = initial_w.clone();
    let mut history = Vec::with_capacity(strategy.rounds);
    let mut payloads = Vec::new();
    let kind = strategy.strategy;

    for round in 1..=strategy.rounds {
        let started = Instant::now();
        if kind.federated() {
            let msg = wire_encode(&global_w, sizes.iter().sum())?;
            for s in &mut states {
                let (w, _) = wire_decode::<T>(&msg)?;
                s.model.shared_w = w;
                if opts.record_payloads {
                    payloads.push(Payload {
                        round,
                        institution_id: s.model.institution_id,
                        direction: Direction::Broadcast,
                        bytes: msg.clone(),
                    });
                }
            }
        }
        let evaluate_now = round == strategy.rounds || (opts.eval_every > 0 && round % opts.eval_every == 0);
        let work = |(s, c): (&mut ClientState<T>, &ClientData<T>)| -> Result<(LocalStats, Vec<SampleMetric>)> {
            let stats = local_train(net, s, &c.train, strategy, &global_w)?;
            let metrics = if evaluate_now && !kind.federated() {
                evaluate(net, &s.model, kind, &s.geometry, &c.test)?
            } else {
                Vec::new()
            };
            Ok((stats, metrics))
        };
        let results: Vec<(LocalStats, Vec<SampleMetric>)> = if opts.parallel {
            states.par_iter_mut().zip(clients.par_iter()).map(work).collect::<Result<_>>()?
        } else {
            states.iter_mut().zip(clients.iter()).map(work).collect::<Result<_>>()?
        };

        let mut metrics: Vec<Vec<SampleMetric>> = results.iter().map(|r| r.1.clone()).collect();
        if kind.federated() {
            let mut uploaded = Vec::with_capacity(states.len());
            let mut up_sizes = Vec::with_capacity(states.len());
            for (s, &n) in states.iter().zip(&sizes) {
                let msg = wire_encode(&s.model.shared_w, n)?;
                let (w, n) = wire_decode::<T>(&msg)?;
                uploaded.push(w);
                up_sizes.push(n);
                if opts.record_payloads {
                    payloads.push(Payload {
                        round,
                        institution_id: s.model.institution_id,
                        direction: Direction::Upload,
                        bytes: msg,
                    });
                }
            }
            global_w = aggregate(&uploaded, &up_sizes)?;
            if evaluate_now {
                // Personalized evaluation: the new global weights with each
                // institution's own modulation.
                let eval = |(s, c): (&ClientState<T>, &ClientData<T>)| -> Result<Vec<SampleMetric>> {
                    let m = PartitionedModel {
                        shared_w: global_w.clone(),
                        ..s.model.clone()
                    };
                    evaluate(net, &m, kind, &s.geometry, &c.test)
                };
                metrics = if opts.parallel {
                    states.par_iter().zip(clients.par_iter()).map(eval).collect::<Result<_>>()?
                } else {
                    states.iter().zip(clients.iter()).map(eval).collect::<Result<_>>()?
                };
            }
        }
        history.push(RoundRecord {
            round,
            clients: states
                .iter()
                .zip(&results)
                .zip(&metrics)
                .map(|((s, (stats, _)), m)| ClientRound {
                    institution: s.model.institution_id,
                    train_loss: stats.train_loss,
                    test_psnr: mean(m, |x| x.psnr),
                    test_ssim: mean(m, |x| x.ssim),
                })
                .collect(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    // Institutions finish holding the final aggregate.
    if kind.federated() && strategy.rounds > 0 {
        for s in &mut states {
            s.model.shared_w = global_w.clone();
        }
    }
    Ok(RunOutcome {
        initial_w,
        global_w,
        geometry: states.iter().map(|s| s.geometry).collect(),
        models: states.into_iter().map(|s| s.model).collect(),
        history,
        payloads,
    })
}
