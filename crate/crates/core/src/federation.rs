//! Server and client roles of the three-step pipeline: agree on a scaler,
//! train the autoencoder, then train the classifier on per-feature
//! reconstruction errors.
//!
//! Everything the server and clients exchange goes through a
//! [`Transport`](crate::transport::Transport) as an [`FLMessage`]; client rows
//! stay inside [`ClientNode`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LossPoint;
use crate::fusion::{client_round, fed_avg, ClientCursor, FusionStrategy, LocalTrainer};
use crate::ingest::{FeatureSchema, FlowDataset};
use crate::matrix::Matrix;
use crate::nn::{
    cross_entropy_loss, mse_loss, reconstruction_error, write_checkpoint, Activation, DenseNet,
    OptimizerConfig, OptimizerState, ParamVector, Targets,
};
use crate::scaler::{init_scaler, ring_orchestrate, InitMode, MinMaxScaler, RingParticipant, SERVER_ID};
use crate::transport::{FLMessage, MessageKind, Payload, Phase, Transport};

/// Prefix for the derived per-feature error columns.
pub const ERROR_FEATURE_PREFIX: &str = "err:";

/// Schema of the classifier's input: one squared-error column per feature.
pub fn derived_schema(base: &FeatureSchema) -> FeatureSchema {
    FeatureSchema {
        column_names: base
            .feature_names()
            .iter()
            .map(|n| format!("{ERROR_FEATURE_PREFIX}{n}"))
            .collect(),
        dropped_columns: Vec::new(),
        label_column: base.label_column.clone(),
    }
}

/// Seeds the server's generator (global model initialisation, ring order).
pub fn server_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeds client `index`'s generator: the run seed on a client-specific stream.
pub fn client_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

const CLASSIFIER_STREAM: u64 = 1 << 63;

/// Client `index`'s generator for the classifier phase, independent of how
/// many draws the earlier phases made.
pub fn classifier_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = client_rng(seed, index);
    rng.set_stream(rng.get_stream() | CLASSIFIER_STREAM);
    rng
}

fn default_ae_layers() -> Vec<usize> {
    vec![75, 48, 16, 48, 75]
}
fn default_clf_layers() -> Vec<usize> {
    vec![75, 32, 16, 2]
}
fn default_hidden() -> Activation {
    Activation::Relu
}
fn default_ae_opt() -> OptimizerConfig {
    OptimizerConfig::rmsprop(1e-3)
}
fn default_clf_opt() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_ae_layers")]
    pub ae_layers: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub ae_hidden: Activation,
    #[serde(default = "default_ae_opt")]
    pub ae_optimizer: OptimizerConfig,
    #[serde(default = "default_clf_layers")]
    pub clf_layers: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub clf_hidden: Activation,
    #[serde(default = "default_clf_opt")]
    pub clf_optimizer: OptimizerConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            ae_layers: default_ae_layers(),
            ae_hidden: default_hidden(),
            ae_optimizer: default_ae_opt(),
            clf_layers: default_clf_layers(),
            clf_hidden: default_hidden(),
            clf_optimizer: default_clf_opt(),
        }
    }
}

impl ModelSpec {
    pub fn build_autoencoder<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DenseNet> {
        DenseNet::autoencoder(&self.ae_layers, self.ae_hidden, rng)
    }

    pub fn build_classifier<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DenseNet> {
        DenseNet::classifier(&self.clf_layers, self.clf_hidden, rng)
    }

    pub fn validate(&self, feature_count: usize) -> Result<()> {
        self.ae_optimizer.validate()?;
        self.clf_optimizer.validate()?;
        if self.ae_layers.first() != Some(&feature_count) {
            return Err(Error::config(format!(
                "autoencoder input width {:?} does not match {feature_count} features",
                self.ae_layers.first()
            )));
        }
        if self.clf_layers.first() != Some(&feature_count) {
            return Err(Error::config(format!(
                "classifier input width {:?} does not match {feature_count} error features",
                self.clf_layers.first()
            )));
        }
        let mut probe = ChaCha8Rng::seed_from_u64(0);
        self.build_autoencoder(&mut probe)?;
        self.build_classifier(&mut probe)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerScope {
    /// One scaler agreed through the ring pass.
    #[default]
    Global,
    /// Each client fits its own scaler on local data.
    Individual,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalerSpec {
    #[serde(default)]
    pub scope: ScalerScope,
    #[serde(default)]
    pub init: InitMode,
    /// Clamp scaled values to `[0, 1]`.
    #[serde(default)]
    pub clamp: bool,
}

fn default_eval_every() -> u32 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationPlan {
    pub ae_rounds: u32,
    pub clf_rounds: u32,
    pub strategy: FusionStrategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
    /// Keep optimizer moments across rounds instead of resetting them.
    #[serde(default)]
    pub persist_optimizer: bool,
    /// Train clients on separate threads between broadcast and fusion.
    #[serde(default)]
    pub parallel_clients: bool,
    /// Write global checkpoints every this many rounds (0: never).
    #[serde(default)]
    pub checkpoint_every: u32,
}

impl FederationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.ae_rounds == 0 || self.clf_rounds == 0 {
            return Err(Error::config("ae_rounds and clf_rounds must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        self.strategy.validate()
    }

    fn logs_round(&self, round: u32, last: u32) -> bool {
        round == 1 || round == last || round.is_multiple_of(self.eval_every)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Ae,
    Clf,
}

impl TrainPhase {
    pub fn name(self) -> &'static str {
        match self {
            TrainPhase::Ae => "ae",
            TrainPhase::Clf => "clf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub phase: TrainPhase,
    /// Global model's mean loss on the server's held-out set.
    pub global_eval_loss: f64,
    pub per_client_counts: BTreeMap<String, u64>,
}

pub fn loss_points(logs: &[RoundLog]) -> Vec<LossPoint> {
    logs.iter()
        .map(|l| LossPoint {
            round: l.round,
            phase: l.phase.name().into(),
            loss: l.global_eval_loss,
        })
        .collect()
}

/// Round log as CSV: `round,phase,loss` then one count column per client.
/// A client absent from a round (e.g. unlabeled in the classifier phase) has
/// an empty cell.
pub fn write_round_log(logs: &[RoundLog], path: &Path) -> Result<()> {
    let mut ids: Vec<&String> = logs.iter().flat_map(|l| l.per_client_counts.keys()).collect();
    ids.sort();
    ids.dedup();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let wrap = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    let mut header = vec!["round".to_string(), "phase".into(), "loss".into()];
    header.extend(ids.iter().map(|id| format!("count:{id}")));
    w.write_record(&header).map_err(wrap)?;
    for l in logs {
        let mut rec = vec![l.round.to_string(), l.phase.name().into(), format!("{:?}", l.global_eval_loss)];
        rec.extend(
            ids.iter()
                .map(|id| l.per_client_counts.get(*id).map(u64::to_string).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One simulated client. Holds its private rows and per-phase training state.
#[derive(Debug)]
pub struct ClientNode {
    pub id: String,
    pub ae_train: FlowDataset,
    pub clf_train: Option<FlowDataset>,
    pub scaler: Option<MinMaxScaler>,
    pub local_net: Option<DenseNet>,
    rng: ChaCha8Rng,
    clamp: bool,
    ae_inputs: Option<Matrix>,
    clf_inputs: Option<FlowDataset>,
    trainer: Option<LocalTrainer>,
}

impl ClientNode {
    pub fn new(
        id: impl Into<String>,
        ae_train: FlowDataset,
        clf_train: Option<FlowDataset>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let id = id.into();
        if ae_train.labels.as_ref().is_some_and(|l| l.iter().any(|&v| v != 0)) {
            return Err(Error::Schema(format!("{id}: autoencoder training rows must be benign")));
        }
        if ae_train.is_empty() {
            return Err(Error::EmptyInput(format!("{id}: no autoencoder training rows")));
        }
        if let Some(c) = &clf_train {
            if !c.is_labeled() {
                return Err(Error::Schema(format!("{id}: classifier training rows need labels")));
            }
            if c.width() != ae_train.width() {
                return Err(Error::Schema(format!("{id}: partitions differ in width")));
            }
        }
        Ok(Self {
            id,
            ae_train,
            clf_train,
            scaler: None,
            local_net: None,
            rng,
            clamp: false,
            ae_inputs: None,
            clf_inputs: None,
            trainer: None,
        })
    }

    pub fn participates_in_classifier(&self) -> bool {
        self.clf_train.is_some()
    }

    pub fn width(&self) -> usize {
        self.ae_train.width()
    }

    /// Installs the scaler and caches the scaled autoencoder inputs.
    fn install_scaler(&mut self, scaler: MinMaxScaler, clamp: bool) -> Result<()> {
        self.ae_inputs = Some(scaler.scale_matrix(&self.ae_train.features, clamp)?);
        self.scaler = Some(scaler);
        self.clamp = clamp;
        Ok(())
    }

    fn begin_phase(&mut self, phase: TrainPhase, template: &DenseNet, opt: &OptimizerConfig, plan: &FederationPlan) -> Result<()> {
        let rows = match phase {
            TrainPhase::Ae => self.ae_train.rows(),
            TrainPhase::Clf => self
                .clf_inputs
                .as_ref()
                .ok_or_else(|| Error::protocol("classifier phase", format!("{} has no error features", self.id)))?
                .rows(),
        };
        if phase == TrainPhase::Clf {
            let mut rng = ChaCha8Rng::from_seed(self.rng.get_seed());
            rng.set_stream(self.rng.get_stream() | CLASSIFIER_STREAM);
            self.rng = rng;
        }
        self.trainer = Some(LocalTrainer {
            cursor: ClientCursor::new(rows, &mut self.rng)?,
            optimizer: OptimizerState::new(*opt, template.param_count())?,
            persist_optimizer: plan.persist_optimizer,
        });
        self.local_net = Some(template.clone());
        Ok(())
    }

    fn receive_global(&mut self, params: &ParamVector) -> Result<()> {
        self.local_net
            .as_mut()
            .ok_or_else(|| Error::protocol("global model", format!("{} has no local model", self.id)))?
            .set_params(&params.values)
    }

    fn train_round(&mut self, phase: TrainPhase, strategy: &FusionStrategy) -> Result<ParamVector> {
        let net = self.local_net.as_mut().expect("phase started");
        let trainer = self.trainer.as_mut().expect("phase started");
        let out = match phase {
            TrainPhase::Ae => {
                let x = self.ae_inputs.as_ref().expect("scaler installed");
                client_round(net, strategy, x, Targets::Inputs, trainer, &mut self.rng)?
            }
            TrainPhase::Clf => {
                let d = self.clf_inputs.as_ref().expect("features generated");
                let labels = d.labels.as_deref().expect("labeled");
                client_round(net, strategy, &d.features, Targets::Labels(labels), trainer, &mut self.rng)?
            }
        };
        Ok(out.update)
    }
}

impl RingParticipant for ClientNode {
    fn id(&self) -> &str {
        &self.id
    }

    fn update_scaler(&mut self, mut scaler: MinMaxScaler) -> Result<MinMaxScaler> {
        scaler.widen(&self.ae_train.features)?;
        if let Some(c) = &self.clf_train {
            scaler.widen(&c.features)?;
        }
        Ok(scaler)
    }

    fn receive_scaler(&mut self, scaler: MinMaxScaler) {
        self.scaler = Some(scaler);
    }
}

/// Maps each classifier training row to its per-feature reconstruction error
/// under the global autoencoder. Row order and labels are preserved.
pub fn generate_classifier_features(client: &ClientNode, global_ae: &DenseNet) -> Result<FlowDataset> {
    let clf = client.clf_train.as_ref().ok_or_else(|| {
        Error::Participation(format!("{} has no labeled data for the classifier", client.id))
    })?;
    let scaler = client
        .scaler
        .as_ref()
        .ok_or_else(|| Error::protocol("feature generation", format!("{} has no scaler", client.id)))?;
    error_features(global_ae, scaler, clf, client.clamp)
}

/// Reconstruction-error features of a raw dataset.
pub fn error_features(ae: &DenseNet, scaler: &MinMaxScaler, raw: &FlowDataset, clamp: bool) -> Result<FlowDataset> {
    let mut data = Vec::with_capacity(raw.rows() * raw.width());
    for row in raw.features.iter_rows() {
        data.extend(reconstruction_error(ae, &scaler.scale_with(row, clamp)?)?);
    }
    FlowDataset::new(
        format!("{}/errors", raw.name),
        Matrix::new(data, raw.width())?,
        raw.labels.clone(),
        Arc::new(derived_schema(&raw.schema)),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ServerState {
    Registered,
    ScalerDone,
    AeDone,
    ClfDone,
}

/// The federation server: a phase state machine over a transport.
pub struct Server {
    state: ServerState,
    transport: Box<dyn Transport>,
    rng: ChaCha8Rng,
    eval_set: FlowDataset,
    eval_benign: Matrix,
    checkpoint_dir: Option<PathBuf>,
    pub scaler: Option<MinMaxScaler>,
    pub scaler_spec: ScalerSpec,
    pub retained_init_bounds: usize,
    pub ae: Option<DenseNet>,
    pub clf: Option<DenseNet>,
    pub logs: Vec<RoundLog>,
}

impl Server {
    /// `eval_set` is server-side held-out data used only for round logging.
    pub fn new(transport: Box<dyn Transport>, seed: u64, eval_set: FlowDataset) -> Result<Self> {
        let benign = eval_set.class_indices(0);
        if benign.is_empty() {
            return Err(Error::config("server evaluation set needs benign rows"));
        }
        let eval_benign = eval_set.features.select(&benign);
        Ok(Self {
            state: ServerState::Registered,
            transport,
            rng: server_rng(seed),
            eval_set,
            eval_benign,
            checkpoint_dir: None,
            scaler: None,
            scaler_spec: ScalerSpec::default(),
            retained_init_bounds: 0,
            ae: None,
            clf: None,
            logs: Vec::new(),
        })
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn expect_state(&self, want: ServerState, step: &str) -> Result<()> {
        if self.state != want {
            return Err(Error::protocol(step, format!("server is in state {:?}, expected {want:?}", self.state)));
        }
        Ok(())
    }

    fn announce(&mut self, clients: &[&mut ClientNode], phase: Phase, round: u32) -> Result<()> {
        for c in clients {
            let msg = FLMessage::new(MessageKind::PhaseAdvance, round, SERVER_ID, Payload::Phase(phase))?;
            self.transport.transmit(&c.id, msg)?;
        }
        Ok(())
    }

    /// Step 0: every client ends up holding the scaler it will scale with.
    pub fn run_scaler_phase(&mut self, clients: &mut [ClientNode], spec: ScalerSpec) -> Result<MinMaxScaler> {
        self.expect_state(ServerState::Registered, "scaler phase")?;
        let width = clients
            .first()
            .ok_or_else(|| Error::config("no clients registered"))?
            .width();
        if clients.iter().any(|c| c.width() != width) || self.eval_set.width() != width {
            return Err(Error::Schema("clients disagree on feature width".into()));
        }
        self.scaler_spec = spec;
        let scaler = match spec.scope {
            ScalerScope::Global => {
                let out = ring_orchestrate(clients, width, spec.init, &mut self.rng, self.transport.as_mut())?;
                for c in clients.iter_mut() {
                    let s = c.scaler.take().ok_or_else(|| Error::protocol("scaler broadcast", format!("{} missed the broadcast", c.id)))?;
                    c.install_scaler(s, spec.clamp)?;
                }
                self.retained_init_bounds = out.retained_init_bounds;
                out.scaler
            }
            ScalerScope::Individual => {
                for c in clients.iter_mut() {
                    let init = init_scaler(width, spec.init, &mut c.rng)?;
                    let s = c.update_scaler(init)?;
                    c.install_scaler(s, spec.clamp)?;
                }
                // no shared scaler exists; the server scales its own
                // held-out rows with one fitted the same way
                let mut s = init_scaler(width, spec.init, &mut self.rng)?;
                s.widen(&self.eval_set.features)?;
                s
            }
        };
        self.scaler = Some(scaler.clone());
        self.state = ServerState::ScalerDone;
        Ok(scaler)
    }

    fn scaled_eval_benign(&self) -> Result<Matrix> {
        self.scaler
            .as_ref()
            .expect("scaler phase done")
            .scale_matrix(&self.eval_benign, self.scaler_spec.clamp)
    }

    /// One synchronous round over `members`: broadcast, local training,
    /// collection, fusion. Returns the per-client example counts.
    fn round(
        &mut self,
        members: &mut [&mut ClientNode],
        global: &mut DenseNet,
        phase: TrainPhase,
        round: u32,
        plan: &FederationPlan,
    ) -> Result<BTreeMap<String, u64>> {
        let broadcast = global.flatten(0);
        for c in members.iter_mut() {
            let msg = FLMessage::new(MessageKind::GlobalModel, round, SERVER_ID, Payload::Params(broadcast.clone()))?;
            let got = self.transport.transmit(&c.id, msg)?;
            let params = got.into_params("global model")?;
            c.receive_global(&params)?;
        }
        let strategy = plan.strategy;
        let trained: Vec<Result<ParamVector>> = if plan.parallel_clients && members.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = members
                    .iter_mut()
                    .map(|c| s.spawn(move || c.train_round(phase, &strategy)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
            })
        } else {
            members.iter_mut().map(|c| c.train_round(phase, &strategy)).collect()
        };
        let mut updates = Vec::with_capacity(members.len());
        let mut counts = BTreeMap::new();
        for (c, update) in members.iter().zip(trained) {
            let msg = FLMessage::new(MessageKind::ClientUpdate, round, c.id.clone(), Payload::Params(update?))?;
            let got = self.transport.transmit(SERVER_ID, msg)?;
            let sender = got.sender.clone();
            let params = got.into_params("client update")?;
            if params.len() != global.param_count() {
                return Err(Error::protocol(
                    format!("{} round {round} update from {sender}", phase.name()),
                    format!("{} values, global model has {}", params.len(), global.param_count()),
                ));
            }
            counts.insert(sender, params.count);
            updates.push(params);
        }
        let fused = fed_avg(&updates)?;
        global.set_params(&fused.values)?;
        Ok(counts)
    }

    fn checkpoint(&self, net: &DenseNet, phase: TrainPhase, round: u32, plan: &FederationPlan) -> Result<()> {
        let (Some(dir), true) = (&self.checkpoint_dir, plan.checkpoint_every > 0 && round.is_multiple_of(plan.checkpoint_every.max(1))) else {
            return Ok(());
        };
        let path = dir.join(format!("{}-round-{round:05}.ckpt", phase.name()));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_checkpoint(net, std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))
    }

    /// Step 1: federated autoencoder training on scaled benign rows.
    pub fn run_ae_phase(&mut self, clients: &mut [ClientNode], plan: &FederationPlan, model: &ModelSpec) -> Result<DenseNet> {
        self.expect_state(ServerState::ScalerDone, "autoencoder phase")?;
        plan.validate()?;
        let mut global = model.build_autoencoder(&mut self.rng)?;
        let mut members: Vec<&mut ClientNode> = clients.iter_mut().collect();
        self.announce(&members, Phase::Autoencoder, 0)?;
        for c in members.iter_mut() {
            c.begin_phase(TrainPhase::Ae, &global, &model.ae_optimizer, plan)?;
        }
        let eval = self.scaled_eval_benign()?;
        for r in 1..=plan.ae_rounds {
            let counts = self.round(&mut members, &mut global, TrainPhase::Ae, r, plan)?;
            if plan.logs_round(r, plan.ae_rounds) {
                let loss = mean_reconstruction_loss(&global, &eval)?;
                log::debug!("ae round {r}: eval loss {loss:.6}");
                self.logs.push(RoundLog {
                    round: r,
                    phase: TrainPhase::Ae,
                    global_eval_loss: loss,
                    per_client_counts: counts,
                });
            }
            self.checkpoint(&global, TrainPhase::Ae, r, plan)?;
        }
        // final model goes to every client, unlabeled ones included
        let fin = global.flatten(0);
        for c in members.iter_mut() {
            let msg = FLMessage::new(MessageKind::GlobalModel, plan.ae_rounds, SERVER_ID, Payload::Params(fin.clone()))?;
            let p = self.transport.transmit(&c.id, msg)?.into_params("final autoencoder")?;
            c.receive_global(&p)?;
        }
        self.ae = Some(global.clone());
        self.state = ServerState::AeDone;
        Ok(global)
    }

    /// Steps 2 and 3: labeled clients derive error features with the global
    /// autoencoder, then train the classifier together. Unlabeled clients sit
    /// this phase out.
    pub fn run_clf_phase(&mut self, clients: &mut [ClientNode], plan: &FederationPlan, model: &ModelSpec) -> Result<DenseNet> {
        self.expect_state(ServerState::AeDone, "classifier phase")?;
        plan.validate()?;
        let mut members: Vec<&mut ClientNode> = clients.iter_mut().filter(|c| c.participates_in_classifier()).collect();
        if members.is_empty() {
            return Err(Error::config("no client has labeled data for the classifier phase"));
        }
        for c in members.iter_mut() {
            let ae = c.local_net.clone().expect("final autoencoder received");
            let features = generate_classifier_features(c, &ae)?;
            c.clf_inputs = Some(features);
        }
        let mut global = model.build_classifier(&mut self.rng)?;
        self.announce(&members, Phase::Classifier, 0)?;
        for c in members.iter_mut() {
            c.begin_phase(TrainPhase::Clf, &global, &model.clf_optimizer, plan)?;
        }
        let ae = self.ae.clone().expect("autoencoder phase done");
        let eval = if self.eval_set.is_labeled() {
            Some(error_features(&ae, self.scaler.as_ref().expect("scaler"), &self.eval_set, self.scaler_spec.clamp)?)
        } else {
            None
        };
        for r in 1..=plan.clf_rounds {
            let counts = self.round(&mut members, &mut global, TrainPhase::Clf, r, plan)?;
            if plan.logs_round(r, plan.clf_rounds) {
                let loss = match &eval {
                    Some(e) => mean_cross_entropy(&global, e)?,
                    None => f64::NAN,
                };
                log::debug!("clf round {r}: eval loss {loss:.6}");
                self.logs.push(RoundLog {
                    round: r,
                    phase: TrainPhase::Clf,
                    global_eval_loss: loss,
                    per_client_counts: counts,
                });
            }
            self.checkpoint(&global, TrainPhase::Clf, r, plan)?;
        }
        let all: Vec<&mut ClientNode> = clients.iter_mut().collect();
        self.announce(&all, Phase::Done, plan.clf_rounds)?;
        self.clf = Some(global.clone());
        self.state = ServerState::ClfDone;
        Ok(global)
    }

    pub fn is_done(&self) -> bool {
        self.state == ServerState::ClfDone
    }
}

pub fn mean_reconstruction_loss(ae: &DenseNet, scaled: &Matrix) -> Result<f64> {
    if scaled.rows() == 0 {
        return Err(Error::EmptyInput("no evaluation rows".into()));
    }
    let mut total = 0.0;
    for x in scaled.iter_rows() {
        total += mse_loss(x, &ae.forward(x)?)?;
    }
    Ok(total / scaled.rows() as f64)
}

pub fn mean_cross_entropy(clf: &DenseNet, features: &FlowDataset) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::EmptyInput("no evaluation rows".into()));
    }
    let mut total = 0.0;
    for (i, x) in features.features.iter_rows().enumerate() {
        total += cross_entropy_loss(&clf.forward(x)?, features.label(i))?;
    }
    Ok(total / features.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub probs: [f64; 2],
}

/// Scale, reconstruct, classify. A 0.5/0.5 tie is labeled benign.
pub fn predict(ae: &DenseNet, clf: &DenseNet, scaler: &MinMaxScaler, x_raw: &[f64], clamp: bool) -> Result<Prediction> {
    let x = scaler.scale_with(x_raw, clamp)?;
    let err = reconstruction_error(ae, &x)?;
    let p = clf.forward(&err)?;
    if p.len() != 2 {
        return Err(Error::shape(format!("classifier returned {} outputs", p.len())));
    }
    Ok(Prediction {
        label: u8::from(p[1] > p[0]),
        probs: [p[0], p[1]],
    })
}

/// Trained detector: scaler plus both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub scaler: MinMaxScaler,
    pub ae: DenseNet,
    pub clf: DenseNet,
    pub clamp: bool,
}

impl Pipeline {
    pub fn predict(&self, x_raw: &[f64]) -> Result<Prediction> {
        predict(&self.ae, &self.clf, &self.scaler, x_raw, self.clamp)
    }

    pub fn predict_labels(&self, rows: &Matrix) -> Result<Vec<u8>> {
        rows.iter_rows().map(|x| Ok(self.predict(x)?.label)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{train_epochs, OutputActivation};
    use crate::transport::{InProcess, SharedRecorder};

    fn schema() -> Arc<FeatureSchema> {
        Arc::new(FeatureSchema {
            column_names: vec!["a".into(), "b".into(), "c".into(), "d".into(), "Label".into()],
            dropped_columns: vec!["Label".into()],
            label_column: "Label".into(),
        })
    }

    fn tiny_model() -> ModelSpec {
        ModelSpec {
            ae_layers: vec![4, 2, 4],
            ae_hidden: Activation::Tanh,
            clf_layers: vec![4, 3, 2],
            clf_hidden: Activation::Tanh,
            ae_optimizer: OptimizerConfig::rmsprop(1e-2),
            clf_optimizer: OptimizerConfig::adam(1e-2),
        }
    }

    fn data(n: usize, attack: bool, seed: u64) -> FlowDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        for _ in 0..n {
            let t: f64 = rng.random_range(0.0..1.0);
            let row = if attack {
                [rng.random_range(2.0..3.0), -t, rng.random_range(-1.0..1.0), 5.0]
            } else {
                [t, 2.0 * t, 1.0 - t, t * t]
            };
            v.extend(row);
        }
        FlowDataset::new("d", Matrix::new(v, 4).unwrap(), Some(vec![u8::from(attack); n]), schema()).unwrap()
    }

    fn labeled(nb: usize, na: usize, seed: u64) -> FlowDataset {
        FlowDataset::concat(&[&data(nb, false, seed), &data(na, true, seed + 100)], "mix").unwrap()
    }

    fn plan(strategy: FusionStrategy, rounds: u32) -> FederationPlan {
        FederationPlan {
            ae_rounds: rounds,
            clf_rounds: rounds,
            strategy,
            seed: 7,
            eval_every: 5,
            persist_optimizer: true,
            parallel_clients: false,
            checkpoint_every: 0,
        }
    }

    fn clients(k: usize) -> Vec<ClientNode> {
        (0..k)
            .map(|i| {
                ClientNode::new(format!("c{i}"), data(40 + 10 * i, false, i as u64), Some(labeled(20, 20, 50 + i as u64)), client_rng(7, i))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn phases_must_run_in_order() {
        let mut cs = clients(2);
        let mut s = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        let p = plan(FusionStrategy::fedsam(10, 5), 2);
        assert!(matches!(s.run_clf_phase(&mut cs, &p, &tiny_model()), Err(Error::Protocol { .. })));
        assert!(matches!(s.run_ae_phase(&mut cs, &p, &tiny_model()), Err(Error::Protocol { .. })));
        s.run_scaler_phase(&mut cs, ScalerSpec::default()).unwrap();
        assert!(s.run_scaler_phase(&mut cs, ScalerSpec::default()).is_err());
    }

    #[test]
    fn broadcast_scalers_identical() {
        let mut cs = clients(3);
        let mut s = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        let g = s.run_scaler_phase(&mut cs, ScalerSpec { init: InitMode::Sentinel, ..Default::default() }).unwrap();
        for c in &cs {
            assert!(c.scaler.as_ref().unwrap().same_bounds(&g));
        }
        let mut cs = clients(3);
        let mut s = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        s.run_scaler_phase(&mut cs, ScalerSpec { scope: ScalerScope::Individual, init: InitMode::Sentinel, clamp: false }).unwrap();
        assert!(!cs[0].scaler.as_ref().unwrap().same_bounds(cs[1].scaler.as_ref().unwrap()));
    }

    #[test]
    fn single_client_matches_central_training() {
        let rounds = 4;
        let epochs = 2;
        let bs = 8;
        let model = tiny_model();
        let mut cs = clients(1);
        let mut s = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        let spec = ScalerSpec { init: InitMode::Sentinel, ..Default::default() };
        let scaler = s.run_scaler_phase(&mut cs, spec).unwrap();
        let fed = s.run_ae_phase(&mut cs, &plan(FusionStrategy::fedavg(epochs, bs), rounds), &model).unwrap();

        // central: same initial network, same client stream, all epochs at once
        let mut srv = server_rng(7);
        ring_order_draws(&mut srv, 1);
        let mut net = model.build_autoencoder(&mut srv).unwrap();
        let x = scaler.scale_matrix(&cs[0].ae_train.features, false).unwrap();
        let mut opt = OptimizerState::new(model.ae_optimizer, net.param_count()).unwrap();
        train_epochs(&mut net, &x, Targets::Inputs, rounds as usize * epochs, bs, &mut opt, &mut client_rng(7, 0)).unwrap();
        assert_eq!(net.params(), fed.params());

        let p = plan(FusionStrategy::fedavg(epochs, bs), rounds);
        let fed_clf = s.run_clf_phase(&mut cs, &p, &model).unwrap();
        let mut clf = model.build_classifier(&mut srv).unwrap();
        let f = error_features(&net, &scaler, cs[0].clf_train.as_ref().unwrap(), false).unwrap();
        let mut opt = OptimizerState::new(model.clf_optimizer, clf.param_count()).unwrap();
        let labels = f.labels.as_deref().unwrap();
        train_epochs(&mut clf, &f.features, Targets::Labels(labels), rounds as usize * epochs, bs, &mut opt, &mut classifier_rng(7, 0)).unwrap();
        assert_eq!(clf.params(), fed_clf.params());
    }

    /// Replays the server generator's draws for a sentinel ring over `k`
    /// clients: one `choose` per visit.
    fn ring_order_draws(rng: &mut ChaCha8Rng, k: usize) {
        use rand::seq::IndexedRandom;
        let mut pending: Vec<usize> = (0..k).collect();
        while let Some(&p) = pending.choose(rng) {
            pending.retain(|&x| x != p);
        }
    }

    #[test]
    fn full_pipeline_and_audit() {
        let mut cs = clients(3);
        // third client benign-only
        cs[2].clf_train = None;
        let (rec, log) = SharedRecorder::new(InProcess);
        let mut s = Server::new(Box::new(rec), 7, labeled(30, 30, 99)).unwrap();
        let p = plan(FusionStrategy::fedsam(16, 8), 20);
        s.run_scaler_phase(&mut cs, ScalerSpec::default()).unwrap();
        let ae = s.run_ae_phase(&mut cs, &p, &tiny_model()).unwrap();
        let clf = s.run_clf_phase(&mut cs, &p, &tiny_model()).unwrap();
        assert!(s.is_done());
        for l in &s.logs {
            assert!(l.per_client_counts.values().all(|&n| n == 16));
            match l.phase {
                TrainPhase::Ae => assert_eq!(l.per_client_counts.len(), 3),
                TrainPhase::Clf => assert!(!l.per_client_counts.contains_key("c2")),
            }
        }
        let ae_logged: Vec<u32> = s.logs.iter().filter(|l| l.phase == TrainPhase::Ae).map(|l| l.round).collect();
        assert_eq!(ae_logged, vec![1, 5, 10, 15, 20]);
        let log = log.lock().unwrap();
        assert!(log.iter().all(|m| !m.kind.carries_raw_rows()));
        assert!(log
            .iter()
            .filter(|m| matches!(m.kind, MessageKind::GlobalModel | MessageKind::ClientUpdate))
            .all(|m| m.payload_values == ae.param_count() || m.payload_values == clf.param_count()));
        assert!(log.iter().any(|m| m.kind == MessageKind::ScalerBroadcast));
    }

    #[test]
    fn unlabeled_client_cannot_make_features() {
        let mut c = clients(1).remove(0);
        c.clf_train = None;
        let ae = tiny_model().build_autoencoder(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(generate_classifier_features(&c, &ae), Err(Error::Participation(_))));
    }

    #[test]
    fn no_labeled_clients_is_config_error() {
        let mut cs = clients(2);
        cs.iter_mut().for_each(|c| c.clf_train = None);
        let mut s = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        let p = plan(FusionStrategy::fedsam(10, 5), 2);
        s.run_scaler_phase(&mut cs, ScalerSpec::default()).unwrap();
        s.run_ae_phase(&mut cs, &p, &tiny_model()).unwrap();
        assert!(matches!(s.run_clf_phase(&mut cs, &p, &tiny_model()), Err(Error::Config(_))));
    }

    #[test]
    fn identical_clients_fuse_to_one_update() {
        let mut cs: Vec<ClientNode> = (0..3)
            .map(|i| ClientNode::new(format!("c{i}"), data(30, false, 1), None, client_rng(7, 0)).unwrap())
            .collect();
        let mut single = vec![ClientNode::new("c0", data(30, false, 1), None, client_rng(7, 0)).unwrap()];
        let spec = ScalerSpec { init: InitMode::Sentinel, ..Default::default() };
        let p = plan(FusionStrategy::fedmmb(2, 5), 6);
        let mut a = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        a.run_scaler_phase(&mut cs, spec).unwrap();
        let ga = a.run_ae_phase(&mut cs, &p, &tiny_model()).unwrap();
        let mut b = Server::new(Box::new(InProcess), 7, labeled(10, 10, 99)).unwrap();
        // ring order draws differ with K, so align the server generator
        b.rng = {
            let mut r = server_rng(7);
            ring_order_draws(&mut r, 3);
            r
        };
        b.run_scaler_phase(&mut single, spec).unwrap();
        b.rng = {
            let mut r = server_rng(7);
            ring_order_draws(&mut r, 3);
            r
        };
        let gb = b.run_ae_phase(&mut single, &p, &tiny_model()).unwrap();
        assert_eq!(ga.params(), gb.params());
    }

    #[test]
    fn zero_classifier_gives_benign_tie() {
        let ae = tiny_model().build_autoencoder(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let clf = DenseNet::zeros(&[4, 3, 2], Activation::Relu, OutputActivation::Softmax).unwrap();
        let s = MinMaxScaler::from_bounds(vec![0.0; 4], vec![1.0; 4], false).unwrap();
        let p = predict(&ae, &clf, &s, &[0.1, 0.2, 0.3, 0.4], false).unwrap();
        assert_eq!(p.probs, [0.5, 0.5]);
        assert_eq!(p.label, 0);
        assert!(predict(&ae, &clf, &s, &[0.1], false).is_err());
    }

    #[test]
    fn round_log_csv_has_blank_for_absent_clients() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let logs = vec![
            RoundLog { round: 1, phase: TrainPhase::Ae, global_eval_loss: 0.5, per_client_counts: [("a".to_string(), 3), ("b".to_string(), 3)].into() },
            RoundLog { round: 1, phase: TrainPhase::Clf, global_eval_loss: 0.25, per_client_counts: [("a".to_string(), 3)].into() },
        ];
        write_round_log(&logs, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "round,phase,loss,count:a,count:b\n1,ae,0.5,3,3\n1,clf,0.25,3,\n"
        );
    }
}
