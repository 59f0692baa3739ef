#![allow(dead_code)]

use std::path::PathBuf;

use dcmg_roa_core::netmodel::{load_network, parse_network, NetworkSpec};
use rand::Rng;
use serde_json::json;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn one_bus() -> NetworkSpec {
    load_network(&fixture("one_bus.json")).unwrap()
}

pub fn ieee14() -> NetworkSpec {
    load_network(&fixture("ieee14.json")).unwrap()
}

/// One-bus circuit with a different box and CPL.
pub fn one_bus_case(current: f64, voltage: f64, p: f64) -> NetworkSpec {
    let mut s = one_bus();
    s.operating_halfwidth = dcmg_roa_core::netmodel::HalfWidth::Uniform { current, voltage };
    s.buses[0].cpl_power = Some(p);
    s
}

/// Random radial (plus at most one chord) network with 2–6 buses and at most
/// 12 states, 100 V / 1 kW base.
pub fn random_network(rng: &mut impl Rng) -> NetworkSpec {
    let nb = rng.random_range(2..=6usize);
    let mut lines = Vec::new();
    for k in 1..nb {
        let parent = rng.random_range(0..k);
        lines.push((parent, k));
    }
    if nb >= 3 && rng.random_bool(0.3) {
        let a = rng.random_range(0..nb);
        let b = rng.random_range(0..nb);
        if a != b
            && !lines
                .iter()
                .any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
        {
            lines.push((a, b));
        }
    }
    let mut n_states = nb + lines.len();
    let n_src = rng.random_range(1..=nb.min(3));
    let mut order: Vec<usize> = (0..nb).collect();
    for i in (1..nb).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let sources = &order[..n_src];
    let mut has_cpl: Vec<bool> = (0..nb).map(|_| rng.random_bool(0.7)).collect();
    if !has_cpl.iter().any(|&c| c) {
        has_cpl[order[nb - 1]] = true;
    }
    let buses: Vec<_> = (0..nb)
        .map(|k| {
            let mut b = json!({
                "id": format!("b{k}"),
                "has_source": sources.contains(&k),
                "has_cpl": has_cpl[k],
                "capacitance": rng.random_range(0.5e-3..3e-3),
                "voltage_bounds": [80.0, 130.0],
            });
            if sources.contains(&k) {
                b["source_resistance"] = json!(rng.random_range(0.05..0.5));
                if n_states < 12 && rng.random_bool(0.25) {
                    b["source_inductance"] = json!(rng.random_range(0.2e-3..2e-3));
                    n_states += 1;
                }
            }
            if has_cpl[k] {
                b["cpl_power"] = json!(-rng.random_range(50.0..400.0));
            }
            if rng.random_bool(0.3) {
                b["shunt_resistance"] = json!(rng.random_range(50.0..500.0));
            }
            b
        })
        .collect();
    let lines: Vec<_> = lines
        .iter()
        .map(|&(a, b)| {
            json!({
                "from": format!("b{a}"), "to": format!("b{b}"),
                "resistance": rng.random_range(0.05..0.3),
                "inductance": rng.random_range(0.2e-3..2e-3),
            })
        })
        .collect();
    let doc = json!({
        "name": "random",
        "buses": buses,
        "lines": lines,
        "base": {"voltage": 100.0, "power": 1000.0},
        "bounds": {"setpoint": [80.0, 140.0], "generation": [-1e6, 1e6]},
        "operating_halfwidth": {"current": 1.0, "voltage": 5.0},
        "per_unit": rng.random_bool(0.5),
    });
    parse_network(&doc.to_string()).unwrap()
}
