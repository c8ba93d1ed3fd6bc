use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::protocol::compose;
use super::{
    mix_seed, Client, CommLedger, Config, ConfigError, DataSource, Federation, FederationError, Method, RoundKind,
    Server,
};
use crate::data::{load_idx, make_synthetic_split, shard_noniid, split_holdout, Dataset};
use crate::engine::{Model, ParamSet};
use crate::harness::{evaluate, MetricsReport, RoundRecord, RunInfo};

const STREAM_DATA: u64 = 10;
const STREAM_SHARD: u64 = 11;
const STREAM_HOLDOUT: u64 = 12;
const STREAM_INIT: u64 = 13;

/// Order of round kinds for a whole run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub kinds: Vec<RoundKind>,
}

impl RoundPlan {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// `cycles` cycles of one SetSkel and `updates_per_cycle` UpdateSkel rounds.
/// FedAvg runs the same number of rounds, all full.
pub fn build_plan(method: Method, updates_per_cycle: usize, cycles: usize) -> RoundPlan {
    let cycle: Vec<RoundKind> = match method {
        Method::Fedskel => std::iter::once(RoundKind::SetSkel)
            .chain(std::iter::repeat(RoundKind::UpdateSkel).take(updates_per_cycle))
            .collect(),
        Method::Fedavg => vec![RoundKind::FedAvg; 1 + updates_per_cycle],
    };
    RoundPlan {
        kinds: cycle.iter().copied().cycle().take(cycle.len() * cycles).collect(),
    }
}

/// Training set plus the population test set.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(config: &Config) -> Result<ExperimentData, FederationError> {
    let d = &config.data;
    match d.source {
        DataSource::Mnist => {
            let files = d.mnist_files();
            let path = |i: usize| {
                files[i]
                    .1
                    .clone()
                    .ok_or_else(|| ConfigError::field(files[i].0, "no path given"))
            };
            Ok(ExperimentData {
                train: load_idx(&path(0)?, &path(1)?)?,
                test: load_idx(&path(2)?, &path(3)?)?,
            })
        }
        DataSource::Synthetic => {
            let spec = d
                .synthetic
                .as_ref()
                .ok_or_else(|| ConfigError::field("data.synthetic", "required for synthetic data"))?;
            let (train, test) = make_synthetic_split(spec, d.test_per_class, mix_seed(config.seed, STREAM_DATA, 0))?;
            let test = test.ok_or_else(|| ConfigError::field("data.test_per_class", "must be positive"))?;
            Ok(ExperimentData { train, test })
        }
    }
}

/// Non-IID shards per client, each split into `(train, holdout)`.
pub fn partition_clients(config: &Config, train: &Dataset) -> Result<Vec<(Vec<usize>, Vec<usize>)>, FederationError> {
    let partition = shard_noniid(
        train,
        config.clients.count,
        config.data.shards_per_client,
        mix_seed(config.seed, STREAM_SHARD, 0),
    )?;
    Ok(partition
        .clients
        .iter()
        .enumerate()
        .map(|(id, idx)| split_holdout(idx, config.data.holdout, mix_seed(config.seed, STREAM_HOLDOUT, id as u64)))
        .collect())
}

fn check_model(model: &Model, data: &ExperimentData) -> Result<(), ConfigError> {
    if model.input_shape() != data.train.image_shape() || model.input_shape() != data.test.image_shape() {
        return Err(ConfigError::field(
            "model",
            format!(
                "input {:?} does not match images {:?}",
                model.input_shape(),
                data.train.image_shape()
            ),
        ));
    }
    if model.classes() < data.train.classes().max(data.test.classes()) {
        return Err(ConfigError::field(
            "model",
            format!("{} outputs for {} classes", model.classes(), data.train.classes()),
        ));
    }
    Ok(())
}

/// Builds the server and clients described by `config` over `data`.
pub fn build_federation<'a>(config: &Config, data: &'a ExperimentData) -> Result<Federation<'a>, FederationError> {
    config.validate()?;
    let model = config.model.build()?;
    check_model(&model, data)?;
    let init: ParamSet = ParamSet::init(&model, &mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_INIT, 0)));
    let caps = config.capabilities();
    let ratios = config.ratios()?;
    let clients = partition_clients(config, &data.train)?
        .into_iter()
        .enumerate()
        .map(|(id, (train, holdout))| Client::new(&model, id, caps[id], ratios[id], train, holdout, init.clone()))
        .collect();
    Federation::new(
        model,
        &data.train,
        config.train_settings(),
        config.seed,
        Server::new(init),
        clients,
    )
}

/// Final state and metrics of a completed run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub report: MetricsReport,
    pub model: Model,
    pub server: Server,
    pub clients: Vec<Client>,
    pub ledger: CommLedger,
}

impl Experiment {
    /// The parameters client `id` predicts with: global layers from the
    /// server and its own local layers.
    pub fn client_view(&self, id: usize) -> ParamSet {
        compose(&self.model, self.server.params(), self.clients[id].params())
    }
}

/// Loads the data and runs the whole plan.
pub fn run_experiment(config: &Config) -> Result<Experiment, FederationError> {
    let data = load_data(config)?;
    run_experiment_with(config, &data)
}

/// Runs the plan on already loaded data. Evaluation happens every
/// `schedule.eval_every` rounds and always after the last one.
pub fn run_experiment_with(config: &Config, data: &ExperimentData) -> Result<Experiment, FederationError> {
    let mut fed = build_federation(config, data)?;
    let plan = build_plan(config.method, config.schedule.updates_per_cycle, config.schedule.cycles);
    let test_len = config.data.test_limit.map_or(data.test.len(), |l| l.min(data.test.len()));
    let test_indices: Vec<usize> = (0..test_len).collect();
    let mut records = Vec::with_capacity(plan.len());
    let mut dense_flops = 0;
    for (i, &kind) in plan.kinds.iter().enumerate() {
        let outcome = fed.run_round(kind)?;
        dense_flops += outcome.dense_flops;
        let mut record = RoundRecord::from_outcome(&outcome);
        let every = config.schedule.eval_every;
        if i + 1 == plan.len() || (every > 0 && (i + 1) % every == 0) {
            let locals: Vec<(&ParamSet, &[usize])> = fed
                .clients()
                .iter()
                .map(|c| (c.params(), c.holdout_indices()))
                .collect();
            let e = evaluate(
                fed.model(),
                fed.server().params(),
                &locals,
                &data.train,
                &data.test,
                &test_indices,
            )?;
            record.local_acc = Some(e.local_acc);
            record.new_acc = Some(e.new_acc);
            log::info!(
                "round {}: loss {:.4}, local {:.2}%, new {:.2}%",
                outcome.round,
                outcome.mean_loss,
                100.0 * e.local_acc,
                100.0 * e.new_acc
            );
        } else {
            log::debug!("round {} ({}): loss {:.4}", outcome.round, kind.name(), outcome.mean_loss);
        }
        records.push(record);
    }
    let info = RunInfo {
        label: config.label.clone(),
        method: config.method.name().into(),
        seed: config.seed,
        clients: config.clients.count,
        full_params: fed.model().global_param_count() as u64,
    };
    let report = MetricsReport::new(info, records, dense_flops);
    let (model, server, clients, ledger) = fed.into_parts();
    Ok(Experiment {
        report,
        model,
        server,
        clients,
        ledger,
    })
}
