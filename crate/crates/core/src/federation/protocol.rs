use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::aggregate::{aggregate_payloads, Payload};
use super::{mix_seed, CommLedger, FederationError, RoundKind};
use crate::data::Dataset;
use crate::engine::{backward, count_backprop_flops, forward, sgd_step, ChannelMask, Model, ParamSet};
use crate::skeleton::{check_ratio, select_skeleton, ImportanceTable, SkeletonMask};

const STREAM_SAMPLE: u64 = 1;
const STREAM_TRAIN: u64 = 2;

/// Local optimisation and sampling settings shared by all clients.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative per-round decay of `lr`.
    pub lr_decay: f64,
    /// Fraction of clients sampled per round.
    pub participation: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 10,
            lr: 0.05,
            lr_decay: 1.0,
            participation: 0.1,
        }
    }
}

/// Totals of one client's local training.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalStats {
    /// Sum of per-example losses.
    pub loss_sum: f64,
    pub samples: u64,
    /// Backward multiply-accumulates actually performed.
    pub flops: u64,
    /// What a dense backward over the same samples would have cost.
    pub dense_flops: u64,
}

#[derive(Clone, Debug)]
pub struct Client {
    id: usize,
    capability: f64,
    ratio: f64,
    train: Vec<usize>,
    holdout: Vec<usize>,
    params: ParamSet,
    skeleton: Option<SkeletonMask>,
    importance: ImportanceTable,
}

impl Client {
    pub fn new(
        model: &Model,
        id: usize,
        capability: f64,
        ratio: f64,
        train: Vec<usize>,
        holdout: Vec<usize>,
        params: ParamSet,
    ) -> Self {
        Self {
            id,
            capability,
            ratio,
            train,
            holdout,
            params,
            skeleton: None,
            importance: ImportanceTable::new(model),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn capability(&self) -> f64 {
        self.capability
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn holdout_indices(&self) -> &[usize] {
        &self.holdout
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn skeleton(&self) -> Option<&SkeletonMask> {
        self.skeleton.as_ref()
    }

    pub fn importance(&self) -> &ImportanceTable {
        &self.importance
    }

    pub fn set_skeleton(&mut self, skeleton: Option<SkeletonMask>) {
        self.skeleton = skeleton;
    }

    /// `local_epochs` passes of minibatch SGD over the client's training
    /// indices, reshuffled each epoch from `seed`.
    pub fn train_local(
        &mut self,
        model: &Model,
        data: &Dataset,
        settings: &TrainSettings,
        lr: f64,
        seed: u64,
        mask: Option<&ChannelMask>,
        accumulate: bool,
    ) -> Result<LocalStats, FederationError> {
        if self.train.is_empty() {
            return Err(FederationError::EmptyClient { client: self.id });
        }
        let per_sample = count_backprop_flops(model, mask);
        let dense = count_backprop_flops(model, None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = self.train.clone();
        let mut stats = LocalStats::default();
        for _ in 0..settings.local_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(settings.batch_size.max(1)) {
                let (x, y) = data.gather(chunk);
                let pass = forward(model, &self.params, &x, &y)?;
                if accumulate {
                    self.importance.accumulate(model, &pass)?;
                }
                let grads = backward(model, &self.params, &pass, mask)?;
                sgd_step(model, &mut self.params, &grads, lr, mask)?;
                let n = chunk.len() as u64;
                stats.loss_sum += pass.loss() as f64 * n as f64;
                stats.samples += n;
                stats.flops += per_sample * n;
                stats.dense_flops += dense * n;
            }
        }
        Ok(stats)
    }
}

/// Holds the global model. Only global-scope slots are ever written; the
/// local-scope slots keep their initial values and are never sent.
#[derive(Clone, Debug)]
pub struct Server {
    params: ParamSet,
    round: u64,
}

impl Server {
    pub fn new(params: ParamSet) -> Self {
        Self { params, round: 0 }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn round(&self) -> u64 {
        self.round
    }
}

/// Result of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: u64,
    pub kind: RoundKind,
    pub participants: Vec<usize>,
    /// Mean training loss over every example the participants processed.
    pub mean_loss: f64,
    pub params_up: u64,
    pub params_down: u64,
    pub backprop_flops: u64,
    pub dense_flops: u64,
}

/// `floor(C·n)` clients, rejecting a fraction that selects nobody.
pub fn participant_count(clients: usize, participation: f64) -> Result<usize, FederationError> {
    let m = (participation * clients as f64 + 1e-9).floor();
    if !(m >= 1.0 && participation <= 1.0) {
        return Err(FederationError::NoParticipants {
            clients,
            participation,
        });
    }
    Ok((m as usize).min(clients))
}

/// The server, its clients and the communication ledger, with a borrowed
/// training set that client index lists point into.
pub struct Federation<'a> {
    model: Model,
    data: &'a Dataset,
    settings: TrainSettings,
    seed: u64,
    server: Server,
    clients: Vec<Client>,
    ledger: CommLedger,
}

impl<'a> Federation<'a> {
    /// Client `i` must have id `i`.
    pub fn new(
        model: Model,
        data: &'a Dataset,
        settings: TrainSettings,
        seed: u64,
        server: Server,
        clients: Vec<Client>,
    ) -> Result<Self, FederationError> {
        if clients.is_empty() {
            return Err(FederationError::NoClients);
        }
        participant_count(clients.len(), settings.participation)?;
        if !(settings.lr >= 0.0 && settings.lr.is_finite()) {
            return Err(crate::engine::EngineError::LearningRate(settings.lr).into());
        }
        server.params.check(&model)?;
        for (i, c) in clients.iter().enumerate() {
            if c.id != i {
                return Err(FederationError::Participant { client: c.id });
            }
            if c.train.is_empty() {
                return Err(FederationError::EmptyClient { client: i });
            }
            check_ratio(c.ratio)?;
            c.params.check(&model)?;
            if let Some(&bad) = c.train.iter().chain(&c.holdout).find(|&&j| j >= data.len()) {
                return Err(crate::data::DataError::Invalid(format!(
                    "client {i} refers to example {bad} of {}",
                    data.len()
                ))
                .into());
            }
        }
        let ledger = CommLedger::new(clients.len());
        Ok(Self {
            model,
            data,
            settings,
            seed,
            server,
            clients,
            ledger,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client(&self, id: usize) -> &Client {
        &self.clients[id]
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn round(&self) -> u64 {
        self.server.round
    }

    /// Uniform sample without replacement for the next round. UpdateSkel
    /// rounds draw only from clients that already hold a skeleton.
    pub fn sample(&self, kind: RoundKind) -> Result<Vec<usize>, FederationError> {
        let m = participant_count(self.clients.len(), self.settings.participation)?;
        let eligible: Vec<usize> = match kind {
            RoundKind::UpdateSkel => self
                .clients
                .iter()
                .filter(|c| c.skeleton.is_some())
                .map(|c| c.id)
                .collect(),
            _ => (0..self.clients.len()).collect(),
        };
        if eligible.is_empty() {
            return Err(FederationError::NoSkeletons);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STREAM_SAMPLE, self.server.round));
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), m.min(eligible.len()))
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        picked.sort_unstable();
        Ok(picked)
    }

    pub fn run_round(&mut self, kind: RoundKind) -> Result<RoundOutcome, FederationError> {
        let participants = self.sample(kind)?;
        self.run_round_with(kind, &participants)
    }

    pub fn run_fedavg_round(&mut self) -> Result<RoundOutcome, FederationError> {
        self.run_round(RoundKind::FedAvg)
    }

    pub fn run_setskel_round(&mut self) -> Result<RoundOutcome, FederationError> {
        self.run_round(RoundKind::SetSkel)
    }

    pub fn run_updateskel_round(&mut self) -> Result<RoundOutcome, FederationError> {
        self.run_round(RoundKind::UpdateSkel)
    }

    /// Runs one round with an explicit participant list (any order, no
    /// duplicates). Client jobs run in parallel; everything that depends on
    /// their results is consumed in ascending client id.
    pub fn run_round_with(&mut self, kind: RoundKind, participants: &[usize]) -> Result<RoundOutcome, FederationError> {
        let mut ids = participants.to_vec();
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(FederationError::NoParticipants {
                clients: self.clients.len(),
                participation: 0.0,
            });
        }
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.clients.len() || (i > 0 && ids[i - 1] == id) {
                return Err(FederationError::Participant { client: id });
            }
            if kind == RoundKind::UpdateSkel && self.clients[id].skeleton.is_none() {
                return Err(FederationError::MissingMask { client: id });
            }
        }

        let round = self.server.round;
        let lr = self.settings.lr * self.settings.lr_decay.powi(round.min(i32::MAX as u64) as i32);
        let model = &self.model;
        let data = self.data;
        let settings = &self.settings;
        let server = &self.server;
        let train_seed = mix_seed(self.seed, STREAM_TRAIN, round);
        let full_download = (kind != RoundKind::UpdateSkel).then(|| Payload::extract(model, &server.params, None));

        let mut jobs: Vec<&mut Client> = self
            .clients
            .iter_mut()
            .filter(|c| ids.binary_search(&c.id).is_ok())
            .collect();
        let results: Vec<(usize, usize, usize, Payload, LocalStats)> = jobs
            .par_iter_mut()
            .map(|client| -> Result<_, FederationError> {
                let mask = match kind {
                    RoundKind::UpdateSkel => client.skeleton.as_ref().map(|s| s.mask().clone()),
                    _ => None,
                };
                let down = match &full_download {
                    Some(p) => {
                        p.apply(&mut client.params);
                        p.len()
                    }
                    None => {
                        let p = Payload::extract(model, &server.params, mask.as_ref());
                        p.apply(&mut client.params);
                        p.len()
                    }
                };
                let accumulate = kind == RoundKind::SetSkel;
                if accumulate {
                    client.importance.reset();
                }
                let seed = mix_seed(train_seed, client.id as u64, 0);
                let stats = client.train_local(model, data, settings, lr, seed, mask.as_ref(), accumulate)?;
                let up = Payload::extract(model, &client.params, mask.as_ref());
                if kind == RoundKind::SetSkel {
                    client.skeleton = Some(select_skeleton(&client.importance, client.ratio)?);
                }
                Ok((client.id, client.train.len(), down, up, stats))
            })
            .collect::<Result<_, _>>()?;

        let mut loss_sum = 0.0;
        let mut samples = 0u64;
        let mut outcome = RoundOutcome {
            round,
            kind,
            participants: ids,
            mean_loss: 0.0,
            params_up: 0,
            params_down: 0,
            backprop_flops: 0,
            dense_flops: 0,
        };
        for (id, _, down, up, stats) in &results {
            self.ledger.charge(kind, *id, up.len() as u64, *down as u64);
            outcome.params_up += up.len() as u64;
            outcome.params_down += *down as u64;
            outcome.backprop_flops += stats.flops;
            outcome.dense_flops += stats.dense_flops;
            loss_sum += stats.loss_sum;
            samples += stats.samples;
        }
        outcome.mean_loss = loss_sum / samples.max(1) as f64;
        let updates: Vec<(&Payload, usize)> = results.iter().map(|(_, n, _, up, _)| (up, *n)).collect();
        self.server.params = aggregate_payloads(&self.model, &self.server.params, &updates)?;
        self.server.round += 1;
        Ok(outcome)
    }

    /// Global-scope slots from the server, local-scope slots from `client`.
    pub fn client_view(&self, client: usize) -> ParamSet {
        compose(&self.model, &self.server.params, &self.clients[client].params)
    }

    pub(crate) fn into_parts(self) -> (Model, Server, Vec<Client>, CommLedger) {
        (self.model, self.server, self.clients, self.ledger)
    }
}

/// Global-scope slots of `global` combined with the local-scope slots of `local`.
pub(crate) fn compose(model: &Model, global: &ParamSet, local: &ParamSet) -> ParamSet {
    let mut out = global.clone();
    for slot in model.local_slots() {
        *out.layer_mut(slot) = local.layer(slot).clone();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::engine::LayerSpec;
    use crate::skeleton::{keep_count, skeleton_param_count};

    fn model() -> Model {
        Model::new(
            [1, 6, 6],
            vec![
                LayerSpec::conv(4, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::fc(8),
                LayerSpec::relu(),
                LayerSpec::fc(3).local(),
                LayerSpec::loss(),
            ],
        )
        .unwrap()
    }

    fn federation<'a>(data: &'a Dataset, ratios: &[f64], participation: f64) -> Federation<'a> {
        let m = model();
        let init: ParamSet = ParamSet::init(&m, &mut ChaCha8Rng::seed_from_u64(3));
        let n = ratios.len();
        let per = data.len() / n;
        let clients = ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let idx: Vec<usize> = (i * per..(i + 1) * per).collect();
                Client::new(&m, i, r, r, idx[2..].to_vec(), idx[..2].to_vec(), init.clone())
            })
            .collect();
        let settings = TrainSettings {
            batch_size: 4,
            participation,
            ..TrainSettings::default()
        };
        Federation::new(m, data, settings, 11, Server::new(init), clients).unwrap()
    }

    #[test]
    fn participant_counting() {
        assert_eq!(participant_count(100, 0.1).unwrap(), 10);
        assert_eq!(participant_count(20, 0.1).unwrap(), 2);
        assert_eq!(participant_count(3, 1.0).unwrap(), 3);
        assert!(matches!(participant_count(5, 0.1), Err(FederationError::NoParticipants { .. })));
    }

    #[test]
    fn single_client_setskel_adopts_client_params() {
        let data = make_synthetic(3, 10, 6, 1).unwrap();
        let mut fed = federation(&data, &[0.5], 1.0);
        let out = fed.run_setskel_round().unwrap();
        let full = fed.model().global_param_count() as u64;
        assert_eq!((out.params_up, out.params_down), (full, full));
        for slot in fed.model().global_slots() {
            assert_eq!(fed.server().params().layer(slot), fed.client(0).params().layer(slot));
        }
        let skel = fed.client(0).skeleton().unwrap();
        assert_eq!(skel.popcounts(), vec![keep_count(0.5, 4), keep_count(0.5, 8)]);
    }

    #[test]
    fn updateskel_needs_masks_and_charges_skeletons() {
        let data = make_synthetic(3, 20, 6, 2).unwrap();
        let mut fed = federation(&data, &[1.0, 0.5, 0.25], 1.0);
        assert!(matches!(
            fed.run_round_with(RoundKind::UpdateSkel, &[0]),
            Err(FederationError::MissingMask { client: 0 })
        ));
        assert!(matches!(fed.run_updateskel_round(), Err(FederationError::NoSkeletons)));
        let set = fed.run_setskel_round().unwrap();
        assert_eq!(set.params_up + set.params_down, 2 * 3 * fed.model().global_param_count() as u64);

        let before: Vec<ParamSet> = fed.clients().iter().map(|c| c.params().clone()).collect();
        let out = fed.run_updateskel_round().unwrap();
        let expected: u64 = fed
            .clients()
            .iter()
            .map(|c| skeleton_param_count(fed.model(), c.skeleton().unwrap().mask()) as u64)
            .sum();
        assert_eq!(out.params_up, expected);
        assert_eq!(out.params_down, expected);
        // Non-skeleton filters of every participant are untouched.
        for (c, old) in fed.clients().iter().zip(&before) {
            let mask = c.skeleton().unwrap().mask();
            for p in 0..fed.model().prunable_count() {
                let slot = fed.model().slot_of_prunable(p);
                for (f, &on) in mask.layer(p).iter().enumerate() {
                    if !on {
                        assert_eq!(c.params().layer(slot).filter(f), old.layer(slot).filter(f));
                        assert_eq!(
                            c.params().layer(slot).bias.data()[f].to_bits(),
                            old.layer(slot).bias.data()[f].to_bits()
                        );
                    }
                }
            }
        }
        assert!(out.backprop_flops < out.dense_flops);
    }

    #[test]
    fn non_participants_are_unchanged() {
        let data = make_synthetic(3, 20, 6, 4).unwrap();
        let mut fed = federation(&data, &[1.0, 0.5, 0.25], 1.0);
        let before = fed.client(1).params().clone();
        fed.run_round_with(RoundKind::SetSkel, &[2, 0]).unwrap();
        assert!(fed.client(1).params().bit_eq(&before));
        assert!(fed.client(1).skeleton().is_none());
        assert!(matches!(
            fed.run_round_with(RoundKind::FedAvg, &[0, 0]),
            Err(FederationError::Participant { client: 0 })
        ));
    }

    #[test]
    fn local_head_never_leaves_the_client() {
        let data = make_synthetic(3, 20, 6, 5).unwrap();
        let mut fed = federation(&data, &[1.0, 1.0], 1.0);
        let head = fed.model().local_slots()[0];
        let server_head = fed.server().params().layer(head).clone();
        fed.run_fedavg_round().unwrap();
        assert_eq!(fed.server().params().layer(head), &server_head);
        assert_ne!(fed.client(0).params().layer(head), fed.client(1).params().layer(head));
        let global = fed.model().global_param_count() as u64;
        assert_eq!(fed.ledger().totals().up, 2 * global);
    }

    #[test]
    fn sampling_is_seeded() {
        let data = make_synthetic(3, 40, 6, 6).unwrap();
        let ratios = [1.0; 10];
        let a = federation(&data, &ratios, 0.3).sample(RoundKind::FedAvg).unwrap();
        let b = federation(&data, &ratios, 0.3).sample(RoundKind::FedAvg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }
}
