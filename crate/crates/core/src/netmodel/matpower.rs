//! Import adapter for matrix-style (`mpc.bus = [...]`) case files.
//!
//! Generators receive sequential ids in file order. The generator on the
//! bus of type 3 becomes the reference. Droop gains assume a 10% droop on
//! the dispatched power, ramps default to half the rating per step, and
//! bus voltage limits are left unset so study bounds apply.

use std::collections::HashMap;

use super::{Bases, Branch, Bus, CaseError, Generator, LoadModel, LoadRecord, Network, FORMAT_VERSION};

const DROOP: f64 = 0.1;

pub fn parse_matpower(text: &str) -> Result<Network, CaseError> {
    let mut scalars: HashMap<String, f64> = HashMap::new();
    let mut tables: HashMap<String, Vec<(usize, Vec<f64>)>> = HashMap::new();
    let mut open: Option<(String, usize, Vec<(usize, Vec<f64>)>)> = None;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('%').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((name, _, rows)) = open.as_mut() {
            let (body, closes) = match line.find(']') {
                Some(i) => (&line[..i], true),
                None => (line, false),
            };
            for chunk in body.split(';') {
                let chunk = chunk.trim();
                if chunk.is_empty() {
                    continue;
                }
                rows.push((line_no, parse_row(chunk, line_no)?));
            }
            if closes {
                let (name, rows) = (name.clone(), std::mem::take(rows));
                tables.insert(name, rows);
                open = None;
            }
            continue;
        }
        let Some(rest) = line.strip_prefix("mpc.") else { continue };
        let Some((key, value)) = rest.split_once('=') else { continue };
        let key = key.trim().to_string();
        let value = value.trim();
        if let Some(body) = value.strip_prefix('[') {
            let mut rows = Vec::new();
            let (body, closes) = match body.find(']') {
                Some(i) => (&body[..i], true),
                None => (body, false),
            };
            for chunk in body.split(';').map(str::trim).filter(|c| !c.is_empty()) {
                rows.push((line_no, parse_row(chunk, line_no)?));
            }
            if closes {
                tables.insert(key, rows);
            } else {
                open = Some((key, line_no, rows));
            }
        } else if let Ok(v) = value.trim_end_matches(';').trim().parse::<f64>() {
            scalars.insert(key, v);
        }
    }
    if let Some((name, start, _)) = open {
        return Err(CaseError::Parse { line: start, message: format!("unterminated matrix mpc.{name}") });
    }

    let base = scalars.get("baseMVA").copied().unwrap_or(100.0);
    let table = |name: &str| tables.get(name).map(Vec::as_slice).unwrap_or(&[]);

    let bus_rows = table("bus");
    let mut buses = Vec::new();
    let mut loads = Vec::new();
    let mut ref_bus = None;
    for (line, r) in bus_rows {
        need(r, 10, *line, "bus")?;
        let id = r[0] as u32;
        let mut bus = Bus::new(id, r[9]);
        bus.g_shunt = r[4] / base;
        bus.b_shunt = r[5] / base;
        buses.push(bus);
        if r[1] as i64 == 3 {
            ref_bus = Some(id);
        }
        if r[2] != 0.0 || r[3] != 0.0 {
            loads.push(LoadRecord {
                bus: id,
                energized: false,
                model: LoadModel::ConstantPower { p_d: r[2] / base, q_d: r[3] / base },
            });
        }
    }

    let gen_rows = table("gen");
    let mut generators = Vec::new();
    for (line, r) in gen_rows {
        need(r, 10, *line, "gen")?;
        if r[7] <= 0.0 {
            continue;
        }
        let p_set = r[1] / base;
        let p_max = (r[8] / base).max(p_set);
        let p_min = (r[9] / base).min(p_set);
        generators.push(Generator {
            id: generators.len() as u32 + 1,
            bus: r[0] as u32,
            p_set,
            q_set: r[2] / base,
            p_min,
            p_max,
            q_min: r[4] / base,
            q_max: r[3] / base,
            droop_gain: p_set.max(0.0) / (DROOP * 60.0),
            v_set: r[5],
            ramp_min: -0.5 * p_max.abs(),
            ramp_max: 0.5 * p_max.abs(),
            participates_in_sync: false,
            is_reference: Some(r[0] as u32) == ref_bus,
            energized: false,
            p_crank: None,
        });
    }

    let br_rows = table("branch");
    let mut branches = Vec::new();
    for (line, r) in br_rows {
        need(r, 11, *line, "branch")?;
        branches.push(Branch {
            from: r[0] as u32,
            to: r[1] as u32,
            r: r[2],
            x: r[3],
            b: r[4],
            tap: if r[8] == 0.0 { 1.0 } else { r[8] },
            status: r[10] != 0.0,
        });
    }

    Ok(Network {
        format_version: FORMAT_VERSION,
        name: text
            .lines()
            .find_map(|l| l.trim().strip_prefix("function").and_then(|r| r.split('=').nth(1)).map(|n| n.trim().to_string()))
            .unwrap_or_default(),
        bases: Bases { mva: base, frequency_hz: 60.0 },
        buses,
        branches,
        generators,
        loads,
        applied_steps: Vec::new(),
        delta_f: 0.0,
    })
}

fn parse_row(chunk: &str, line: usize) -> Result<Vec<f64>, CaseError> {
    chunk
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| CaseError::Parse { line, message: format!("bad number {t:?}") }))
        .collect()
}

fn need(r: &[f64], cols: usize, line: usize, table: &str) -> Result<(), CaseError> {
    if r.len() < cols {
        return Err(CaseError::Parse { line, message: format!("mpc.{table} row has {} columns, need {cols}", r.len()) });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "function mpc = tiny
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
\t2\t1\t50\t10\t0\t5\t1\t1\t0\t345\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t80\t0\t50\t-50\t1.02\t100\t1\t100\t0;
];
mpc.branch = [ 1 2 0.01 0.1 0.02 0 0 0 0 0 1 ];
";

    #[test]
    fn parses_small_case() {
        let net = parse_matpower(SMALL).unwrap();
        assert_eq!(net.name, "tiny");
        assert_eq!(net.buses.len(), 2);
        assert_eq!(net.buses[1].b_shunt, 0.05);
        assert_eq!(net.loads[0].model, LoadModel::ConstantPower { p_d: 0.5, q_d: 0.1 });
        let g = &net.generators[0];
        assert!(g.is_reference);
        assert_eq!((g.p_set, g.p_max, g.q_min), (0.8, 1.0, -0.5));
        assert!((g.droop_gain - 0.8 / 6.0).abs() < 1e-15);
        assert_eq!(net.branches[0].tap, 1.0);
        net.validate().unwrap();
    }

    #[test]
    fn short_row_reports_line() {
        let bad = SMALL.replace("\t1\t80\t0\t50", "\t1\t80");
        assert!(matches!(parse_matpower(&bad), Err(CaseError::Parse { line: 8, .. })));
    }
}
