//! Config-driven experiment runs: load or synthesise client data, run the
//! federation, evaluate, and write every artifact into
//! `<output>/<name>/seed-<seed>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{class_report, confusion, emit_loss_curve, render_report, threshold_baseline, ClassReport};
use crate::federation::{
    client_rng, loss_points, write_round_log, ClientNode, FederationPlan, ModelSpec, Pipeline, RoundLog,
    ScalerScope, ScalerSpec, Server,
};
use crate::ingest::{
    load_flow_csv, split, synth_generate, AttackSpec, ClusterSpec, FeatureSchema, FlowDataset, ScalarOrVec,
    SplitSpec, SynthClientSpec, SynthConfig,
};
use crate::nn::{write_checkpoint, DenseNet};
use crate::scaler::MinMaxScaler;
use crate::transport::{InProcess, MessageRecord, SharedRecorder, Transport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Central,
    Federated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    InProcess,
    /// Framed byte protocol over a local socket pair.
    Socket,
}

/// Synthetic rows for one source, in the generator's terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub benign_rows: usize,
    #[serde(default)]
    pub attack_rows: usize,
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synth(SynthSource),
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub name: String,
    pub source: DataSource,
    pub split: SplitSpec,
    /// `false` for benign-only captures that train the autoencoder only.
    #[serde(default = "yes")]
    pub labeled: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TestSource {
    /// Union of the clients' test partitions.
    #[default]
    Clients,
    Csv { path: PathBuf },
    Synth(SynthSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Permits a federated run with a single client.
    #[serde(default)]
    pub allow_single_client: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub transport: TransportKind,
    /// Unit multiplier for synthetic features, shared by all sources.
    #[serde(default)]
    pub feature_scale: ScalarOrVec,
    pub clients: Vec<ClientConfig>,
    #[serde(default)]
    pub test: TestSource,
    #[serde(default)]
    pub scaler: ScalerSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub plan: FederationPlan,
    /// Also evaluate the reconstruction-threshold detector.
    #[serde(default)]
    pub threshold_baseline: bool,
    /// Also train every labeled client on its own and evaluate it on the
    /// same test set.
    #[serde(default)]
    pub individual_baselines: bool,
    /// Directory relative paths resolve against; set when loading a file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every rule the config breaks. Empty means runnable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            v.push(format!("name {:?} must be a plain directory name", self.name));
        }
        if self.clients.is_empty() {
            v.push("at least one client is required".into());
        }
        if self.mode == Mode::Federated && self.clients.len() == 1 && !self.allow_single_client {
            v.push("federated mode needs at least 2 clients (set allow_single_client for reduction runs)".into());
        }
        let mut names: Vec<&str> = self.clients.iter().map(|c| c.name.as_str()).collect();
        names.sort();
        for w in names.windows(2) {
            if w[0] == w[1] {
                v.push(format!("client name {:?} is used twice", w[0]));
            }
        }
        for c in &self.clients {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                v.push(format!("client name {:?} must be a plain identifier", c.name));
            }
            if !c.labeled {
                if self.mode == Mode::Central {
                    v.push(format!("client {}: unlabeled clients are only allowed in federated mode", c.name));
                }
                let s = &c.split;
                if s.clf_train_benign + s.clf_train_attack + s.test_benign + s.test_attack > 0 {
                    v.push(format!("client {}: unlabeled clients may only request ae_train_benign rows", c.name));
                }
            }
            if c.split.ae_train_benign == 0 {
                v.push(format!("client {}: ae_train_benign must be positive", c.name));
            }
            if c.labeled && (c.split.clf_train_benign == 0 || c.split.clf_train_attack == 0) {
                v.push(format!("client {}: labeled clients need classifier rows of both classes", c.name));
            }
            match &c.source {
                DataSource::Csv { path } => {
                    if !self.resolve(path).is_file() {
                        v.push(format!("client {}: data file {} not found", c.name, self.resolve(path).display()));
                    }
                }
                DataSource::Synth(s) => {
                    v.extend(synth_violations(&format!("client {}", c.name), s, c.labeled));
                    if s.benign_rows < c.split.benign_total() {
                        v.push(format!(
                            "client {}: split needs {} benign rows, source has {}",
                            c.name,
                            c.split.benign_total(),
                            s.benign_rows
                        ));
                    }
                    if s.attack_rows < c.split.attack_total() {
                        v.push(format!(
                            "client {}: split needs {} attack rows, source has {}",
                            c.name,
                            c.split.attack_total(),
                            s.attack_rows
                        ));
                    }
                }
            }
        }
        if self.clients.iter().all(|c| !c.labeled) && !self.clients.is_empty() {
            v.push("no labeled client: the classifier phase would have no participants".into());
        }
        match &self.test {
            TestSource::Clients => {
                let benign: usize = self.clients.iter().map(|c| c.split.test_benign).sum();
                let attack: usize = self.clients.iter().map(|c| c.split.test_attack).sum();
                if benign == 0 || attack == 0 {
                    v.push("test = clients needs test_benign and test_attack rows across the clients".into());
                }
            }
            TestSource::Csv { path } => {
                if !self.resolve(path).is_file() {
                    v.push(format!("test data file {} not found", self.resolve(path).display()));
                }
            }
            TestSource::Synth(s) => {
                v.extend(synth_violations("test", s, true));
                if s.benign_rows == 0 {
                    v.push("test: synthetic test set needs benign rows".into());
                }
            }
        }
        if let Err(e) = self.plan.validate() {
            v.push(format!("plan: {e}"));
        }
        let width = FeatureSchema::cic().feature_count();
        if let Err(e) = self.model.validate(width) {
            v.push(format!("model: {e}"));
        }
        if let Err(e) = crate::scaler::init_scaler(1, self.scaler.init, &mut ChaCha8Rng::seed_from_u64(0)) {
            v.push(format!("scaler: {e}"));
        }
        v
    }
}

fn synth_violations(what: &str, s: &SynthSource, labeled: bool) -> Vec<String> {
    let mut v = Vec::new();
    if s.clusters.is_empty() {
        v.push(format!("{what}: synthetic source needs at least one cluster"));
    }
    if s.attack_rows > 0 && s.attack.is_none() {
        v.push(format!("{what}: attack_rows without an attack spec"));
    }
    if !labeled && s.attack_rows > 0 {
        v.push(format!("{what}: unlabeled source cannot contain attack rows"));
    }
    v
}

/// Parses and checks a config file. Only a file that cannot be read or
/// parsed is an error; rule violations come back as a list.
pub fn validate_config(path: &Path) -> Result<Vec<String>> {
    Ok(ExperimentConfig::load(path)?.violations())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Which scaler the test rows went through: `global` or `client:<id>`.
    pub scaler: String,
    pub report: ClassReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub client: String,
    pub f1: f64,
    pub report: ClassReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub report: ClassReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportAudit {
    pub messages: usize,
    pub by_kind: BTreeMap<String, usize>,
    /// Messages whose kind can carry data rows. Always 0 by construction.
    pub raw_row_messages: usize,
}

impl TransportAudit {
    fn from_log(log: &[MessageRecord]) -> Self {
        let mut by_kind = BTreeMap::new();
        for m in log {
            *by_kind.entry(format!("{:?}", m.kind)).or_insert(0) += 1;
        }
        Self {
            messages: log.len(),
            by_kind,
            raw_row_messages: log.iter().filter(|m| m.kind.carries_raw_rows()).count(),
        }
    }
}

/// Everything the report files contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub scaler_scope: ScalerScope,
    pub scaler_retained_init_bounds: usize,
    pub clients: Vec<String>,
    pub classifier_clients: Vec<String>,
    pub test_rows: usize,
    /// Summary F1: mean over `evaluations` of the macro F1.
    pub f1: f64,
    pub evaluations: Vec<Evaluation>,
    #[serde(default)]
    pub threshold_baseline: Option<ThresholdResult>,
    #[serde(default)]
    pub individual_baselines: Vec<BaselineResult>,
    pub transport: TransportAudit,
}

/// In-memory outcome of a run.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub logs: Vec<RoundLog>,
    pub pipeline: Pipeline,
    /// Per-message audit of the federated run.
    pub messages: Vec<MessageRecord>,
    /// Set when artifacts were written.
    pub output_dir: Option<PathBuf>,
}

/// Loaded client data after splitting.
pub struct PreparedData {
    pub clients: Vec<(String, FlowDataset, Option<FlowDataset>)>,
    pub test: FlowDataset,
}

fn synth_spec(name: &str, s: &SynthSource, labeled: bool) -> SynthClientSpec {
    SynthClientSpec {
        name: name.into(),
        benign_rows: s.benign_rows,
        attack_rows: s.attack_rows,
        clusters: s.clusters.clone(),
        attack: s.attack.clone(),
        unlabeled: !labeled,
    }
}

/// Loads or generates every source and splits the clients' rows.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let schema = FeatureSchema::cic();
    let mut synth_specs = Vec::new();
    for c in &cfg.clients {
        if let DataSource::Synth(s) = &c.source {
            synth_specs.push(synth_spec(&c.name, s, c.labeled));
        }
    }
    if let TestSource::Synth(s) = &cfg.test {
        synth_specs.push(synth_spec("test", s, true));
    }
    let mut generated = if synth_specs.is_empty() {
        Vec::new()
    } else {
        synth_generate(
            &SynthConfig {
                feature_scale: cfg.feature_scale.clone(),
                clients: synth_specs,
            },
            seed,
        )?
    }
    .into_iter();

    let mut clients = Vec::with_capacity(cfg.clients.len());
    let mut test_parts = Vec::new();
    for (k, c) in cfg.clients.iter().enumerate() {
        let mut ds = match &c.source {
            DataSource::Csv { path } => {
                let path = cfg.resolve(path);
                let (ds, stats) = load_flow_csv(&path, &schema)?;
                if stats.dropped_non_finite + stats.dropped_unparseable > 0 {
                    log::warn!(
                        "{}: dropped {} non-finite and {} unparseable rows",
                        path.display(),
                        stats.dropped_non_finite,
                        stats.dropped_unparseable
                    );
                }
                ds
            }
            DataSource::Synth(_) => generated.next().expect("one generated set per synth source"),
        };
        if !c.labeled {
            ds.labels = None;
        }
        let spec = SplitSpec {
            seed: c.split.seed ^ seed.wrapping_add(k as u64),
            ..c.split
        };
        let parts = split(&ds, &spec)?;
        if let Some(t) = parts.test.filter(|t| !t.is_empty()) {
            test_parts.push(t);
        }
        let clf = if c.labeled { parts.clf_train } else { None };
        clients.push((c.name.clone(), parts.ae_train, clf));
    }
    let test = match &cfg.test {
        TestSource::Clients => {
            let refs: Vec<&FlowDataset> = test_parts.iter().collect();
            FlowDataset::concat(&refs, "test")?
        }
        TestSource::Csv { path } => load_flow_csv(&cfg.resolve(path), &schema)?.0,
        TestSource::Synth(_) => generated.next().expect("generated test set"),
    };
    Ok(PreparedData { clients, test })
}

fn build_transport(kind: TransportKind) -> Result<Box<dyn Transport>> {
    Ok(match kind {
        TransportKind::InProcess => Box::new(InProcess),
        #[cfg(unix)]
        TransportKind::Socket => Box::new(
            crate::transport::SocketLoopback::new().map_err(|e| Error::protocol("open socket transport", e.to_string()))?,
        ),
        #[cfg(not(unix))]
        TransportKind::Socket => return Err(Error::config("socket transport needs a unix platform")),
    })
}

struct FederatedRun {
    server: Server,
    clients: Vec<ClientNode>,
    ae: DenseNet,
    clf: DenseNet,
    messages: Vec<MessageRecord>,
}

fn federate(
    clients: Vec<ClientNode>,
    test: &FlowDataset,
    cfg: &ExperimentConfig,
    plan: &FederationPlan,
    checkpoints: Option<&Path>,
) -> Result<FederatedRun> {
    let (transport, log) = SharedRecorder::new(build_transport(cfg.transport)?);
    let mut server = Server::new(Box::new(transport), plan.seed, test.clone())?;
    if let Some(dir) = checkpoints {
        server = server.with_checkpoints(dir);
    }
    let mut clients = clients;
    server.run_scaler_phase(&mut clients, cfg.scaler)?;
    let ae = server.run_ae_phase(&mut clients, plan, &cfg.model)?;
    let clf = server.run_clf_phase(&mut clients, plan, &cfg.model)?;
    let messages = log.lock().expect("audit log").clone();
    Ok(FederatedRun {
        server,
        clients,
        ae,
        clf,
        messages,
    })
}

fn evaluate(pipeline: &Pipeline, test: &FlowDataset) -> Result<ClassReport> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::config("the test set must be labeled"))?;
    class_report(&confusion(&pipeline.predict_labels(&test.features)?, labels)?)
}

fn nodes_from(data: &PreparedData, seed: u64) -> Result<Vec<ClientNode>> {
    data.clients
        .iter()
        .enumerate()
        .map(|(k, (name, ae, clf))| ClientNode::new(name.clone(), ae.clone(), clf.clone(), client_rng(seed, k)))
        .collect()
}

/// Central mode pools every client's partitions into one client.
fn pooled(data: &PreparedData) -> Result<PreparedData> {
    let ae: Vec<&FlowDataset> = data.clients.iter().map(|c| &c.1).collect();
    let clf: Vec<&FlowDataset> = data.clients.iter().filter_map(|c| c.2.as_ref()).collect();
    Ok(PreparedData {
        clients: vec![(
            "central".into(),
            FlowDataset::concat(&ae, "central/ae_train")?,
            Some(FlowDataset::concat(&clf, "central/clf_train")?),
        )],
        test: data.test.clone(),
    })
}

/// Runs a config end to end. With `output_root` set, artifacts are written
/// to `<output_root>/<name>/seed-<seed>/`.
pub fn run_experiment(cfg: &ExperimentConfig, seed_override: Option<u64>, output_root: Option<&Path>) -> Result<ExperimentOutcome> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations.join("; ")));
    }
    let started = Instant::now();
    let seed = seed_override.unwrap_or(cfg.seed);
    let mut plan = cfg.plan.clone();
    plan.seed = seed;
    let mut resolved = cfg.clone();
    resolved.seed = seed;
    resolved.plan.seed = seed;

    let out_dir = output_root.map(|root| root.join(&cfg.name).join(format!("seed-{seed}")));
    let ckpt_dir = out_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut data = prepare_data(cfg, seed)?;
    if cfg.mode == Mode::Central {
        data = pooled(&data)?;
    }
    if !data.test.is_labeled() {
        return Err(Error::config("the test set must be labeled"));
    }
    log::info!(
        "{}: {} clients, {} test rows, seed {seed}",
        cfg.name,
        data.clients.len(),
        data.test.rows()
    );

    let run = federate(nodes_from(&data, seed)?, &data.test, cfg, &plan, ckpt_dir.as_deref())?;
    let clamp = cfg.scaler.clamp;
    let mut evaluations = Vec::new();
    match cfg.scaler.scope {
        ScalerScope::Global => {
            let p = Pipeline {
                scaler: run.server.scaler.clone().expect("scaler phase ran").without_log(),
                ae: run.ae.clone(),
                clf: run.clf.clone(),
                clamp,
            };
            evaluations.push(Evaluation {
                scaler: "global".into(),
                report: evaluate(&p, &data.test)?,
            });
        }
        ScalerScope::Individual => {
            for c in &run.clients {
                let p = Pipeline {
                    scaler: c.scaler.clone().expect("scaler installed"),
                    ae: run.ae.clone(),
                    clf: run.clf.clone(),
                    clamp,
                };
                evaluations.push(Evaluation {
                    scaler: format!("client:{}", c.id),
                    report: evaluate(&p, &data.test)?,
                });
            }
        }
    }
    let f1 = evaluations.iter().map(|e| e.report.macro_f1()).sum::<f64>() / evaluations.len() as f64;
    let pipeline = Pipeline {
        scaler: run.server.scaler.clone().expect("scaler").without_log(),
        ae: run.ae.clone(),
        clf: run.clf.clone(),
        clamp,
    };

    let threshold = if cfg.threshold_baseline {
        Some(run_threshold_baseline(&pipeline, &data.test, seed)?)
    } else {
        None
    };

    let mut individual = Vec::new();
    if cfg.individual_baselines {
        for (k, (name, ae, clf)) in data.clients.iter().enumerate() {
            if clf.is_none() {
                continue;
            }
            let node = ClientNode::new(name.clone(), ae.clone(), clf.clone(), client_rng(seed, k))?;
            let solo = federate(vec![node], &data.test, cfg, &plan, None)?;
            let p = Pipeline {
                scaler: solo.clients[0].scaler.clone().expect("scaler"),
                ae: solo.ae,
                clf: solo.clf,
                clamp,
            };
            let report = evaluate(&p, &data.test)?;
            individual.push(BaselineResult {
                client: name.clone(),
                f1: report.macro_f1(),
                report,
            });
        }
    }

    let report = ExperimentReport {
        name: cfg.name.clone(),
        mode: cfg.mode,
        seed,
        scaler_scope: cfg.scaler.scope,
        scaler_retained_init_bounds: run.server.retained_init_bounds,
        clients: run.clients.iter().map(|c| c.id.clone()).collect(),
        classifier_clients: run
            .clients
            .iter()
            .filter(|c| c.participates_in_classifier())
            .map(|c| c.id.clone())
            .collect(),
        test_rows: data.test.rows(),
        f1,
        evaluations,
        threshold_baseline: threshold,
        individual_baselines: individual,
        transport: TransportAudit::from_log(&run.messages),
    };
    let logs = run.server.logs.clone();

    if let Some(dir) = &out_dir {
        write_artifacts(dir, &resolved, &report, &logs, &run)?;
        let meta = serde_json::json!({
            "finished_unix_seconds": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default(),
            "elapsed_seconds": started.elapsed().as_secs_f64(),
            "crate_version": env!("CARGO_PKG_VERSION"),
        });
        write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta).expect("json").as_bytes())?;
    }
    Ok(ExperimentOutcome {
        report,
        logs,
        pipeline,
        messages: run.messages,
        output_dir: out_dir,
    })
}

/// Threshold detector: half of the test rows pick the threshold, the other
/// half is reported on.
fn run_threshold_baseline(pipeline: &Pipeline, test: &FlowDataset, seed: u64) -> Result<ThresholdResult> {
    let mut idx: Vec<usize> = (0..test.rows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7468_7265_7368));
    let (val, rest) = idx.split_at(idx.len() / 2);
    let val = test.subset(val, "validation");
    let rest = test.subset(rest, "threshold-test");
    let vb = val.features.select(&val.class_indices(0));
    let va = val.features.select(&val.class_indices(1));
    let (threshold, report) = threshold_baseline(
        &pipeline.ae,
        &pipeline.scaler,
        &vb,
        &va,
        &rest.features,
        rest.labels.as_deref().expect("labeled test"),
        pipeline.clamp,
    )?;
    Ok(ThresholdResult { threshold, report })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_scaler(path: &Path, scaler: &MinMaxScaler) -> Result<()> {
    let schema = FeatureSchema::cic();
    let mut buf = Vec::new();
    scaler.write_csv(&schema.feature_names(), &mut buf)?;
    write_file(path, &buf)
}

fn write_net(path: &Path, net: &DenseNet) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf).map_err(|e| Error::io(path, e))?;
    write_file(path, &buf)
}

fn write_artifacts(
    dir: &Path,
    resolved: &ExperimentConfig,
    report: &ExperimentReport,
    logs: &[RoundLog],
    run: &FederatedRun,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = toml::to_string(resolved).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("config.resolved.toml"), echo.as_bytes())?;
    write_scaler(&dir.join("scaler.csv"), run.server.scaler.as_ref().expect("scaler"))?;
    if report.scaler_scope == ScalerScope::Individual {
        let sub = dir.join("scalers");
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for c in &run.clients {
            write_scaler(&sub.join(format!("{}.csv", c.id)), c.scaler.as_ref().expect("scaler"))?;
        }
    }
    write_round_log(logs, &dir.join("rounds.csv"))?;
    emit_loss_curve(&loss_points(logs), &dir.join("loss_curve.csv"))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("report.json"), json.as_bytes())?;
    write_file(&dir.join("report.txt"), render_text(report).as_bytes())?;
    let ck = dir.join("checkpoints");
    write_net(&ck.join("ae-final.ckpt"), &run.ae)?;
    write_net(&ck.join("clf-final.ckpt"), &run.clf)?;
    Ok(())
}

pub fn render_text(r: &ExperimentReport) -> String {
    let mut s = format!(
        "experiment {} ({:?}, seed {})\nclients: {}\nclassifier clients: {}\nscaler: {:?}, {} bounds kept from init\ntest rows: {}\n\n",
        r.name,
        r.mode,
        r.seed,
        r.clients.join(", "),
        r.classifier_clients.join(", "),
        r.scaler_scope,
        r.scaler_retained_init_bounds,
        r.test_rows
    );
    for e in &r.evaluations {
        s.push_str(&render_report(&format!("test set, {} scaler", e.scaler), &e.report));
        s.push('\n');
    }
    s.push_str(&format!("summary f1 {:.4}\n", r.f1));
    if let Some(t) = &r.threshold_baseline {
        s.push('\n');
        s.push_str(&render_report(&format!("threshold baseline (threshold {:.6})", t.threshold), &t.report));
    }
    for b in &r.individual_baselines {
        s.push('\n');
        s.push_str(&render_report(&format!("client {} trained alone", b.client), &b.report));
    }
    s.push_str(&format!(
        "\ntransport: {} messages, {} carrying data rows\n",
        r.transport.messages, r.transport.raw_row_messages
    ));
    s
}

/// Helper for small programmatic configs: one Gaussian-cluster client.
pub fn simple_synth_client(name: &str, mean: f64, benign: usize, attack: usize, split: SplitSpec) -> ClientConfig {
    ClientConfig {
        name: name.into(),
        source: DataSource::Synth(SynthSource {
            benign_rows: benign,
            attack_rows: attack,
            clusters: vec![ClusterSpec {
                weight: 1.0,
                mean: ScalarOrVec::Scalar(mean),
                covariance: crate::ingest::CovarianceSpec::Diagonal {
                    std: ScalarOrVec::Scalar(1.0),
                },
            }],
            attack: (attack > 0).then(|| AttackSpec {
                offset: 3.0,
                features: Vec::new(),
                stretch: 1.0,
            }),
        }),
        split,
        labeled: attack > 0,
    }
}
