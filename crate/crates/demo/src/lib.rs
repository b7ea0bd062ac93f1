//! wasm-bindgen exports for the static page in `www/`. Each export wraps a
//! plain function returning `Result<String, String>` so the logic is
//! testable natively.

use fedids::eval::{class_report, render_report, ConfusionMatrix};
use fedids::federation::{client_rng, server_rng};
use fedids::fusion::{fedmmb_select, fedsam_sample, ClientCursor};
use fedids::matrix::Matrix;
use fedids::scaler::{ring_orchestrate, DataHolder, InitMode, MinMaxScaler, RingParticipant};
use fedids::transport::InProcess;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Parses blank-line separated blocks of comma separated rows.
pub fn parse_clients(text: &str) -> Result<Vec<Matrix>, String> {
    let mut out = Vec::new();
    let mut width = None;
    for (b, block) in text.split("\n\n").filter(|b| !b.trim().is_empty()).enumerate() {
        let mut rows = Vec::new();
        for line in block.lines().filter(|l| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("client {}: {v:?}: {e}", b + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(format!("client {}: rows must all have {} values", b + 1, width.unwrap()));
            }
            rows.push(row);
        }
        out.push(Matrix::from_rows(rows, width.unwrap_or(0)).map_err(|e| e.to_string())?);
    }
    if out.is_empty() {
        return Err("enter at least one client block".into());
    }
    Ok(out)
}

/// Records the bounds each client hands back.
struct Traced<'a> {
    inner: DataHolder<'a>,
    after: Option<MinMaxScaler>,
}

impl RingParticipant for Traced<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn update_scaler(&mut self, scaler: MinMaxScaler) -> fedids::Result<MinMaxScaler> {
        let s = self.inner.update_scaler(scaler)?;
        self.after = Some(s.clone());
        Ok(s)
    }

    fn receive_scaler(&mut self, scaler: MinMaxScaler) {
        self.inner.receive_scaler(scaler)
    }
}

fn bounds(s: &MinMaxScaler) -> serde_json::Value {
    json!({ "mins": s.mins, "maxs": s.maxs })
}

pub fn ring_pass_json(clients: &str, seed: u64, random_init: bool) -> Result<String, String> {
    let data = parse_clients(clients)?;
    let width = data[0].cols();
    let mut holders: Vec<Traced> = data
        .iter()
        .enumerate()
        .map(|(k, m)| Traced { inner: DataHolder::new(format!("client-{}", k + 1), m), after: None })
        .collect();
    let mode = if random_init { InitMode::default() } else { InitMode::Sentinel };
    let out = ring_orchestrate(&mut holders, width, mode, &mut server_rng(seed), &mut InProcess).map_err(|e| e.to_string())?;
    let log = out.scaler.visit_log.clone();
    let visits: Vec<_> = log
        .iter()
        .map(|id| {
            let h = holders.iter().find(|h| h.id() == id).expect("visited client");
            json!({ "client": id, "bounds": bounds(h.after.as_ref().expect("updated")) })
        })
        .collect();
    Ok(json!({
        "visits": visits,
        "final": bounds(&out.scaler),
        "retained_init_bounds": out.retained_init_bounds,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn ring_pass(clients: &str, seed: u64, random_init: bool) -> Result<String, JsValue> {
    js(ring_pass_json(clients, seed, random_init))
}

/// Rows each client contributes per round under both strategies, without
/// training anything.
pub fn contribution_json(sizes: &str, sample_size: usize, batch_size: usize, rounds: usize, seed: u64) -> Result<String, String> {
    let sizes: Vec<usize> = sizes
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad client size {s:?}")))
        .collect::<Result<_, _>>()?;
    if batch_size == 0 || !sample_size.is_multiple_of(batch_size) {
        return Err("sample size must be a positive multiple of the batch size".into());
    }
    let batch_count = sample_size / batch_size;
    let mut clients = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let mut rng = client_rng(seed, k);
        let mut cursor = ClientCursor::new(n, &mut rng).map_err(|e| e.to_string())?;
        let mut mmb = Vec::with_capacity(rounds);
        let mut sam = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let used: usize = fedmmb_select(&mut cursor, batch_size, batch_count, &mut rng)
                .map_err(|e| e.to_string())?
                .iter()
                .map(Vec::len)
                .sum();
            mmb.push(used);
            sam.push(fedsam_sample(n, sample_size, &mut rng).map_err(|e| e.to_string())?.len());
        }
        let consumed: usize = mmb.iter().sum();
        clients.push(json!({
            "rows": n,
            "fedmmb": mmb,
            "fedsam": sam,
            "fedmmb_epochs": consumed as f64 / n as f64,
            "fedsam_epochs": (sample_size * rounds) as f64 / n as f64,
        }));
    }
    Ok(json!({ "clients": clients }).to_string())
}

#[wasm_bindgen]
pub fn contribution(sizes: &str, sample_size: usize, batch_size: usize, rounds: usize, seed: u64) -> Result<String, JsValue> {
    js(contribution_json(sizes, sample_size, batch_size, rounds, seed))
}

pub fn report_text(tn: u64, fp: u64, fn_: u64, tp: u64) -> Result<String, String> {
    let r = class_report(&ConfusionMatrix::from_rows([tn, fp], [fn_, tp])).map_err(|e| e.to_string())?;
    Ok(render_report("confusion matrix", &r))
}

#[wasm_bindgen]
pub fn report(tn: u64, fp: u64, fn_: u64, tp: u64) -> Result<String, JsValue> {
    js(report_text(tn, fp, fn_, tp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_trace_ends_at_extremes() {
        let text = "1, 5\n2, 9\n\n-3, 4\n\n0, 12\n";
        let v: serde_json::Value = serde_json::from_str(&ring_pass_json(text, 1, false).unwrap()).unwrap();
        assert_eq!(v["visits"].as_array().unwrap().len(), 3);
        assert_eq!(v["final"]["mins"], json!([-3.0, 4.0]));
        assert_eq!(v["final"]["maxs"], json!([2.0, 12.0]));
        assert_eq!(v["retained_init_bounds"], 0);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(ring_pass_json("1,2\n3\n", 0, false).unwrap_err().contains("rows must all have 2"));
        assert!(ring_pass_json("x", 0, false).is_err());
    }

    #[test]
    fn fedsam_counts_flat() {
        let v: serde_json::Value = serde_json::from_str(&contribution_json("1000, 90", 40, 20, 12, 3).unwrap()).unwrap();
        for c in v["clients"].as_array().unwrap() {
            assert!(c["fedsam"].as_array().unwrap().iter().all(|n| n == 40));
        }
        // 90 rows in batches of 20: the fifth batch of each epoch has 10
        assert!(v["clients"][1]["fedmmb"].as_array().unwrap().iter().any(|n| n == 30));
        assert!(contribution_json("10", 30, 20, 1, 0).is_err());
    }

    #[test]
    fn report_renders() {
        let t = report_text(16985, 7015, 7509, 16500).unwrap();
        assert!(t.contains("0.6934"), "{t}");
    }
}
