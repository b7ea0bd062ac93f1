//! Global min-max scaler built by passing one scaler object around the
//! clients in random order. Each client widens the bounds to cover its own
//! rows, so the server only ever sees the running extremes, never data.

use std::io::{Read, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FlowDataset;
use crate::matrix::Matrix;
use crate::transport::{FLMessage, MessageKind, Payload, Transport};

/// Sender id the orchestrator uses on the transport.
pub const SERVER_ID: &str = "server";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitMode {
    /// Each bound drawn from `U(low, high)`; the pair is swapped if needed.
    Random { low: f64, high: f64 },
    /// `+MAX` / `-MAX` placeholders that any client value replaces.
    Sentinel,
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Random {
            low: -1.0,
            high: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub initialized_randomly: bool,
    /// Visit order of the ring pass. Kept by the orchestrator only; copies
    /// sent to clients carry an empty log.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visit_log: Vec<String>,
}

fn is_placeholder(min: f64, max: f64) -> bool {
    min == f64::MAX && max == -f64::MAX
}

impl MinMaxScaler {
    pub fn from_bounds(mins: Vec<f64>, maxs: Vec<f64>, initialized_randomly: bool) -> Result<Self> {
        if mins.len() != maxs.len() {
            return Err(Error::shape(format!("{} mins, {} maxs", mins.len(), maxs.len())));
        }
        for (i, (&lo, &hi)) in mins.iter().zip(&maxs).enumerate() {
            if lo.is_nan() || hi.is_nan() || (lo > hi && !is_placeholder(lo, hi)) {
                return Err(Error::Schema(format!("feature {i}: invalid bounds ({lo}, {hi})")));
            }
        }
        Ok(Self {
            mins,
            maxs,
            initialized_randomly,
            visit_log: Vec::new(),
        })
    }

    fn sentinel(width: usize) -> Self {
        Self {
            mins: vec![f64::MAX; width],
            maxs: vec![-f64::MAX; width],
            initialized_randomly: false,
            visit_log: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.mins.len()
    }

    /// Bounds only, without the orchestrator's visit log.
    pub fn without_log(&self) -> Self {
        Self {
            visit_log: Vec::new(),
            ..self.clone()
        }
    }

    pub fn same_bounds(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.mins) == bits(&other.mins) && bits(&self.maxs) == bits(&other.maxs)
    }

    /// Fits exact column extremes of `rows`.
    pub fn fit(rows: &Matrix) -> Result<Self> {
        let mut s = Self::sentinel(rows.cols());
        s.widen(rows)?;
        Ok(s)
    }

    /// Widens the bounds to cover every row. Never tightens.
    pub fn widen(&mut self, rows: &Matrix) -> Result<()> {
        if rows.cols() != self.width() {
            return Err(Error::Schema(format!(
                "scaler has {} features, data has {}",
                self.width(),
                rows.cols()
            )));
        }
        for row in rows.iter_rows() {
            for (i, &v) in row.iter().enumerate() {
                if v < self.mins[i] {
                    self.mins[i] = v;
                }
                if v > self.maxs[i] {
                    self.maxs[i] = v;
                }
            }
        }
        Ok(())
    }

    /// `(x - min) / (max - min)` per feature; a degenerate feature maps to 0.
    /// Values outside the bounds are passed through unless `clamp` is set.
    pub fn scale_with(&self, x: &[f64], clamp: bool) -> Result<Vec<f64>> {
        if x.len() != self.width() {
            return Err(Error::Schema(format!(
                "scaler has {} features, input has {}",
                self.width(),
                x.len()
            )));
        }
        Ok(x.iter()
            .zip(self.mins.iter().zip(&self.maxs))
            .map(|(&v, (&lo, &hi))| {
                if hi <= lo {
                    return 0.0;
                }
                let s = (v - lo) / (hi - lo);
                if clamp {
                    s.clamp(0.0, 1.0)
                } else {
                    s
                }
            })
            .collect())
    }

    pub fn scale_matrix(&self, m: &Matrix, clamp: bool) -> Result<Matrix> {
        let mut data = Vec::with_capacity(m.as_slice().len());
        for row in m.iter_rows() {
            data.extend(self.scale_with(row, clamp)?);
        }
        Matrix::new(data, m.cols())
    }

    pub fn scale_dataset(&self, ds: &FlowDataset, clamp: bool) -> Result<FlowDataset> {
        FlowDataset::new(
            ds.name.clone(),
            self.scale_matrix(&ds.features, clamp)?,
            ds.labels.clone(),
            ds.schema.clone(),
        )
    }

    /// Writes `feature,min,max` records. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn write_csv<W: Write>(&self, names: &[&str], w: W) -> Result<()> {
        if names.len() != self.width() {
            return Err(Error::Schema(format!("{} names for {} features", names.len(), self.width())));
        }
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(["feature", "min", "max"]).map_err(to_err)?;
        for (name, (lo, hi)) in names.iter().zip(self.mins.iter().zip(&self.maxs)) {
            out.write_record([name.to_string(), format!("{lo:?}"), format!("{hi:?}")])
                .map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads a scaler file, returning the feature names with the scaler.
    pub fn read_csv<R: Read>(r: R) -> Result<(Vec<String>, Self)> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["feature", "min", "max"] {
            return Err(Error::Parse(format!("unexpected scaler header {header:?}")));
        }
        let (mut names, mut mins, mut maxs) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("scaler record {}: bad number", line + 1)))
            };
            names.push(rec.get(0).unwrap_or_default().to_string());
            mins.push(num(1)?);
            maxs.push(num(2)?);
        }
        Ok((names, Self::from_bounds(mins, maxs, false)?))
    }
}

pub fn init_scaler<R: Rng + ?Sized>(feature_count: usize, mode: InitMode, rng: &mut R) -> Result<MinMaxScaler> {
    if feature_count == 0 {
        return Err(Error::config("scaler needs at least one feature"));
    }
    match mode {
        InitMode::Sentinel => Ok(MinMaxScaler::sentinel(feature_count)),
        InitMode::Random { low, high } => {
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(Error::config(format!("invalid init distribution U({low}, {high})")));
            }
            let mut mins = Vec::with_capacity(feature_count);
            let mut maxs = Vec::with_capacity(feature_count);
            for _ in 0..feature_count {
                let a = rng.random_range(low..high);
                let b = rng.random_range(low..high);
                mins.push(a.min(b));
                maxs.push(a.max(b));
            }
            MinMaxScaler::from_bounds(mins, maxs, true)
        }
    }
}

/// One client's update. An empty dataset leaves the scaler unchanged.
pub fn client_update(scaler: &MinMaxScaler, local: &FlowDataset) -> Result<MinMaxScaler> {
    let mut s = scaler.clone();
    s.widen(&local.features)?;
    Ok(s)
}

/// A client in the ring pass.
pub trait RingParticipant {
    fn id(&self) -> &str;
    /// Widens the received scaler over local data and hands it back.
    fn update_scaler(&mut self, scaler: MinMaxScaler) -> Result<MinMaxScaler>;
    /// Stores the final broadcast scaler.
    fn receive_scaler(&mut self, scaler: MinMaxScaler);
}

/// Orchestrator-side state of an ongoing ring pass.
pub struct RingState<'r, R: Rng + ?Sized> {
    pub pending_clients: Vec<String>,
    pub rng: &'r mut R,
    pub current_scaler: MinMaxScaler,
}

impl<R: Rng + ?Sized> RingState<'_, R> {
    /// Picks and removes the next client id at random.
    fn next_client(&mut self) -> Option<String> {
        let pick = self.pending_clients.choose(self.rng)?.clone();
        self.pending_clients.retain(|c| *c != pick);
        Some(pick)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingOutcome {
    pub scaler: MinMaxScaler,
    /// Per-feature bounds still equal to their initial value. With random
    /// init these are bounds the data never reached.
    pub retained_init_bounds: usize,
}

/// Runs the ring pass: starts from `init_mode`, visits every client once in
/// random order, then broadcasts the result to all of them.
pub fn ring_orchestrate<P, R>(
    clients: &mut [P],
    feature_count: usize,
    init_mode: InitMode,
    rng: &mut R,
    transport: &mut dyn Transport,
) -> Result<RingOutcome>
where
    P: RingParticipant,
    R: Rng + ?Sized,
{
    if clients.is_empty() {
        return Err(Error::EmptyInput("ring pass needs at least one client".into()));
    }
    let init = init_scaler(feature_count, init_mode, rng)?;
    let mut ids: Vec<String> = clients.iter().map(|c| c.id().to_string()).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("duplicate client ids in ring"));
    }
    let mut state = RingState {
        pending_clients: ids,
        rng,
        current_scaler: init,
    };
    let mut order = Vec::with_capacity(clients.len());
    while let Some(id) = state.next_client() {
        order.push(clients.iter().position(|c| c.id() == id).expect("id from client list"));
    }
    ring_pass_in_order(clients, &order, state.current_scaler, transport)
}

/// The ring pass with a fixed visit order (indices into `clients`).
pub fn ring_pass_in_order<P: RingParticipant>(
    clients: &mut [P],
    order: &[usize],
    init: MinMaxScaler,
    transport: &mut dyn Transport,
) -> Result<RingOutcome> {
    let feature_count = init.width();
    let mut current = init.without_log();
    let mut visit_log = Vec::with_capacity(order.len());
    for &k in order {
        let client = clients
            .get_mut(k)
            .ok_or_else(|| Error::config(format!("visit order names client {k}")))?;
        let id = client.id().to_string();
        let step = format!("scaler pass {} to {id}", visit_log.len() + 1);
        let out = FLMessage::new(MessageKind::ScalerPass, 0, SERVER_ID, Payload::Scaler(current))?;
        let received = transport.transmit(&id, out)?.into_scaler(&step)?;
        let updated = client.update_scaler(received)?;
        let back = FLMessage::new(MessageKind::ScalerPass, 0, id.clone(), Payload::Scaler(updated))?;
        let returned = transport.transmit(SERVER_ID, back)?.into_scaler(&step)?;
        if returned.width() != feature_count {
            return Err(Error::protocol(step, "client returned a scaler of the wrong width"));
        }
        current = returned;
        visit_log.push(id);
    }
    let mut seen: Vec<&str> = visit_log.iter().map(String::as_str).collect();
    seen.sort();
    seen.dedup();
    if seen.len() != clients.len() || visit_log.len() != clients.len() {
        return Err(Error::protocol("scaler ring", "every client must be visited exactly once"));
    }
    for client in clients.iter_mut() {
        let msg = FLMessage::new(MessageKind::ScalerBroadcast, 0, SERVER_ID, Payload::Scaler(current.clone()))?;
        let s = transport
            .transmit(client.id(), msg)?
            .into_scaler("scaler broadcast")?;
        client.receive_scaler(s);
    }
    let retained_init_bounds = current
        .mins
        .iter()
        .zip(&init.mins)
        .chain(current.maxs.iter().zip(&init.maxs))
        .filter(|(a, b)| a.to_bits() == b.to_bits())
        .count();
    current.visit_log = visit_log;
    Ok(RingOutcome {
        scaler: current,
        retained_init_bounds,
    })
}

/// Minimal participant over a borrowed dataset; used by tests, the demo and
/// the ablation tooling.
pub struct DataHolder<'a> {
    pub id: String,
    pub data: &'a Matrix,
    pub received: Option<MinMaxScaler>,
}

impl<'a> DataHolder<'a> {
    pub fn new(id: impl Into<String>, data: &'a Matrix) -> Self {
        Self {
            id: id.into(),
            data,
            received: None,
        }
    }
}

impl RingParticipant for DataHolder<'_> {
    fn id(&self) -> &str {
        &self.id
    }
    fn update_scaler(&mut self, mut scaler: MinMaxScaler) -> Result<MinMaxScaler> {
        scaler.widen(self.data)?;
        Ok(scaler)
    }
    fn receive_scaler(&mut self, scaler: MinMaxScaler) {
        self.received = Some(scaler);
    }
}
