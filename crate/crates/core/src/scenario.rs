//! Flat `key = value` scenario files.
//!
//! Keys are the [`ScenarioConfig`] field names; nested fields use a dotted
//! prefix (`traffic.packets_per_source`, `buffer_policy.mode`). `#` starts a
//! comment. Missing keys keep their default values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::model::{NodeId, ScenarioConfig};
use crate::topology::{BufferMode, BufferSelection, Placement};
use crate::traffic::{RateLevel, SourceSelection, VbrMode};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: key `{key}` given more than once")]
    DuplicateKey { line: usize, key: String },
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

pub const KEYS: [&str; 25] = [
    "area_m2",
    "node_count",
    "comm_range_m",
    "packet_size_bytes",
    "node_energy_j",
    "link_rate_bps",
    "per_hop_latency_us",
    "sink_playout_delay_us",
    "energy_tx_j_per_bit",
    "energy_rx_j_per_bit",
    "placement",
    "rng_seed",
    "sim_duration_us",
    "traffic.source_ids",
    "traffic.mean_bit_rate_bps",
    "traffic.vbr_rate_levels",
    "traffic.vbr_mode",
    "traffic.cbr_out_interval_us",
    "traffic.packets_per_source",
    "traffic.high_priority_fraction",
    "traffic.lifetime_budget_us",
    "traffic.shape_at_source",
    "buffer_policy.mode",
    "buffer_policy.proportionality_k",
    "buffer_policy.selection",
];

/// Resolves a key, also accepting the bare name of a nested field
/// (`packets_per_source` for `traffic.packets_per_source`).
pub fn canonical_key(key: &str) -> Option<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Some(k);
    }
    let mut hits = KEYS.iter().filter(|k| k.split_once('.').is_some_and(|(_, field)| field == key));
    match (hits.next(), hits.next()) {
        (Some(k), None) => Some(k),
        _ => None,
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ScenarioError {
    ScenarioError::BadValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ScenarioError>
where
    T::Err: std::fmt::Display,
{
    value.replace('_', "").parse::<T>().map_err(|e| bad(key, value, e))
}

fn id_list(key: &str, value: &str) -> Result<Vec<NodeId>, ScenarioError> {
    value.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn levels(key: &str, value: &str) -> Result<Vec<RateLevel>, ScenarioError> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (rate, dwell) = item.split_once(':').ok_or_else(|| bad(key, value, "expected rate:dwell pairs"))?;
            Ok(RateLevel { rate_bps: num(key, rate.trim())?, dwell_us: num(key, dwell.trim())? })
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

/// Sets one field from its textual value.
pub fn set_key(cfg: &mut ScenarioConfig, key: &str, value: &str) -> Result<(), ScenarioError> {
    let canon = canonical_key(key).ok_or_else(|| ScenarioError::UnknownKey(key.into()))?;
    let v = value.trim();
    let lower = v.to_ascii_lowercase();
    let t = &mut cfg.traffic;
    let b = &mut cfg.buffer_policy;
    match canon {
        "area_m2" => cfg.area_m2 = num(canon, v)?,
        "node_count" => cfg.node_count = num(canon, v)?,
        "comm_range_m" => cfg.comm_range_m = num(canon, v)?,
        "packet_size_bytes" => cfg.packet_size_bytes = num(canon, v)?,
        "node_energy_j" => cfg.node_energy_j = num(canon, v)?,
        "link_rate_bps" => cfg.link_rate_bps = num(canon, v)?,
        "per_hop_latency_us" => cfg.per_hop_latency_us = num(canon, v)?,
        "sink_playout_delay_us" => cfg.sink_playout_delay_us = num(canon, v)?,
        "energy_tx_j_per_bit" => cfg.energy_tx_j_per_bit = num(canon, v)?,
        "energy_rx_j_per_bit" => cfg.energy_rx_j_per_bit = num(canon, v)?,
        "placement" => {
            cfg.placement = match lower.as_str() {
                "uniform" => Placement::Uniform,
                "incremental" => Placement::Incremental,
                _ => return Err(bad(canon, v, "expected uniform or incremental")),
            }
        }
        "rng_seed" => cfg.rng_seed = num(canon, v)?,
        "sim_duration_us" => cfg.sim_duration_us = num(canon, v)?,
        "traffic.source_ids" => {
            t.source_ids = match lower.as_str() {
                "deepest" => SourceSelection::Deepest,
                "all" => SourceSelection::All,
                _ => SourceSelection::Ids(id_list(canon, v)?),
            }
        }
        "traffic.mean_bit_rate_bps" => t.mean_bit_rate_bps = num(canon, v)?,
        "traffic.vbr_rate_levels" => t.vbr_rate_levels = levels(canon, v)?,
        "traffic.vbr_mode" => {
            t.vbr_mode = match lower.as_str() {
                "cycle" => VbrMode::Cycle,
                "sample" => VbrMode::Sample,
                _ => return Err(bad(canon, v, "expected cycle or sample")),
            }
        }
        "traffic.cbr_out_interval_us" => t.cbr_out_interval_us = num(canon, v)?,
        "traffic.packets_per_source" => t.packets_per_source = num(canon, v)?,
        "traffic.high_priority_fraction" => t.high_priority_fraction = num(canon, v)?,
        "traffic.lifetime_budget_us" => t.lifetime_budget_us = num(canon, v)?,
        "traffic.shape_at_source" => t.shape_at_source = num(canon, &lower)?,
        "buffer_policy.mode" => {
            b.mode = match lower.as_str() {
                "none" => BufferMode::None,
                "eq1" => BufferMode::Eq1,
                _ => return Err(bad(canon, v, "expected none or eq1")),
            }
        }
        "buffer_policy.proportionality_k" => b.proportionality_k = num(canon, v)?,
        "buffer_policy.selection" => {
            b.selection = match lower.as_str() {
                "all_inner_layers" => BufferSelection::AllInnerLayers,
                _ => BufferSelection::ExplicitList(id_list(canon, v)?),
            }
        }
        other => unreachable!("key {other} has no setter"),
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = ScenarioConfig::default();
    let mut seen: Vec<&'static str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| ScenarioError::Syntax { line: i + 1, text: raw.trim().into() })?;
        let key = key.trim();
        let canon = *KEYS.iter().find(|k| **k == key).ok_or_else(|| ScenarioError::UnknownKey(key.into()))?;
        if seen.contains(&canon) {
            return Err(ScenarioError::DuplicateKey { line: i + 1, key: key.into() });
        }
        seen.push(canon);
        set_key(&mut cfg, canon, value)?;
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse(&text)
}

/// Writes every field; `parse(&to_text(c)) == c`.
pub fn to_text(cfg: &ScenarioConfig) -> String {
    let t = &cfg.traffic;
    let b = &cfg.buffer_policy;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("area_m2", cfg.area_m2.to_string());
    kv("node_count", cfg.node_count.to_string());
    kv("comm_range_m", cfg.comm_range_m.to_string());
    kv("packet_size_bytes", cfg.packet_size_bytes.to_string());
    kv("node_energy_j", cfg.node_energy_j.to_string());
    kv("link_rate_bps", cfg.link_rate_bps.to_string());
    kv("per_hop_latency_us", cfg.per_hop_latency_us.to_string());
    kv("sink_playout_delay_us", cfg.sink_playout_delay_us.to_string());
    kv("energy_tx_j_per_bit", cfg.energy_tx_j_per_bit.to_string());
    kv("energy_rx_j_per_bit", cfg.energy_rx_j_per_bit.to_string());
    kv(
        "placement",
        match cfg.placement {
            Placement::Uniform => "uniform",
            Placement::Incremental => "incremental",
        }
        .into(),
    );
    kv("rng_seed", cfg.rng_seed.to_string());
    kv("sim_duration_us", cfg.sim_duration_us.to_string());
    kv(
        "traffic.source_ids",
        match &t.source_ids {
            SourceSelection::Deepest => "deepest".into(),
            SourceSelection::All => "all".into(),
            SourceSelection::Ids(ids) => join(ids),
        },
    );
    kv("traffic.mean_bit_rate_bps", t.mean_bit_rate_bps.to_string());
    kv(
        "traffic.vbr_rate_levels",
        join(&t.vbr_rate_levels.iter().map(|l| format!("{}:{}", l.rate_bps, l.dwell_us)).collect::<Vec<_>>()),
    );
    kv(
        "traffic.vbr_mode",
        match t.vbr_mode {
            VbrMode::Cycle => "cycle",
            VbrMode::Sample => "sample",
        }
        .into(),
    );
    kv("traffic.cbr_out_interval_us", t.cbr_out_interval_us.to_string());
    kv("traffic.packets_per_source", t.packets_per_source.to_string());
    kv("traffic.high_priority_fraction", t.high_priority_fraction.to_string());
    kv("traffic.lifetime_budget_us", t.lifetime_budget_us.to_string());
    kv("traffic.shape_at_source", t.shape_at_source.to_string());
    kv(
        "buffer_policy.mode",
        match b.mode {
            BufferMode::None => "none",
            BufferMode::Eq1 => "eq1",
        }
        .into(),
    );
    kv("buffer_policy.proportionality_k", b.proportionality_k.to_string());
    kv(
        "buffer_policy.selection",
        match &b.selection {
            BufferSelection::AllInnerLayers => "all_inner_layers".into(),
            BufferSelection::ExplicitList(ids) => join(ids),
        },
    );
    s
}
