//! Line-delimited record files.
//!
//! A trajectory file is CSV with header `t,q1..qK,g1..gK,d1..dK,a1..aK,reward`.
//! Line `t` holds the state at slot `t`, the action taken in it, and the
//! reward it earned; the final line holds the last state with empty action
//! and reward fields. `N` transitions therefore take `N + 1` lines, and an
//! empty dataset is a bare header.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::bayes::{PosteriorModel, TransitionRecord};
use crate::env::{reward, DeviceObservation, JointAction, SystemConfig, SystemState};
use crate::error::{Error, Result};

pub fn trajectory_header(num_devices: usize) -> Vec<String> {
    let mut header = vec!["t".to_string()];
    for prefix in ["q", "g", "d", "a"] {
        header.extend((1..=num_devices).map(|k| format!("{prefix}{k}")));
    }
    header.push("reward".into());
    header
}

fn state_fields(state: &SystemState) -> Vec<String> {
    let mut fields: Vec<String> = state.devices().iter().map(|o| o.q.to_string()).collect();
    fields.extend(state.devices().iter().map(|o| u8::from(o.g).to_string()));
    fields.extend(state.devices().iter().map(|o| u8::from(o.d).to_string()));
    fields
}

/// Writes a chained dataset whose first record is at slot `start`.
pub fn write_trajectory<W: Write>(
    writer: W,
    records: &[TransitionRecord],
    start: usize,
    config: &SystemConfig,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(trajectory_header(config.num_devices))?;
    for (i, r) in records.iter().enumerate() {
        let mut fields = vec![(start + i).to_string()];
        fields.extend(state_fields(&r.state));
        fields.extend(r.action.0.iter().map(|&a| u8::from(a).to_string()));
        fields.push(format!("{:?}", reward(&r.state, &r.action, &r.next_state, config)));
        out.write_record(&fields)?;
    }
    if let Some(last) = records.last() {
        let mut fields = vec![(start + records.len()).to_string()];
        fields.extend(state_fields(&last.next_state));
        fields.extend(std::iter::repeat_n(String::new(), config.num_devices + 1));
        out.write_record(&fields)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_bit(field: &str, line: usize) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::MalformedRecord {
            index: line,
            reason: format!("expected 0 or 1, got {field:?}"),
        }),
    }
}

/// Reads a trajectory file back into chained records and the slot of the
/// first record. Every record is checked against `config`.
pub fn read_trajectory<R: Read>(reader: R, config: &SystemConfig) -> Result<(Vec<TransitionRecord>, usize)> {
    let k = config.num_devices;
    let mut input = csv::Reader::from_reader(reader);
    let header: Vec<String> = input.headers()?.iter().map(str::to_string).collect();
    if header != trajectory_header(k) {
        return Err(Error::MalformedRecord {
            index: 0,
            reason: format!("header does not match {k} devices"),
        });
    }
    let mut rows: Vec<(usize, SystemState, Option<JointAction>)> = Vec::new();
    for (line, row) in input.records().enumerate() {
        let row = row?;
        let bad = |reason: String| Error::MalformedRecord { index: line, reason };
        let t: usize = row[0].parse().map_err(|_| bad(format!("bad slot {:?}", &row[0])))?;
        let mut obs = Vec::with_capacity(k);
        for dev in 0..k {
            let q: u32 = row[1 + dev].parse().map_err(|_| bad(format!("bad buffer {:?}", &row[1 + dev])))?;
            obs.push(DeviceObservation {
                q,
                g: parse_bit(&row[1 + k + dev], line)?,
                d: parse_bit(&row[1 + 2 * k + dev], line)?,
            });
        }
        let action_fields: Vec<&str> = (0..k).map(|dev| &row[1 + 3 * k + dev]).collect();
        let action = if action_fields.iter().all(|f| f.is_empty()) {
            None
        } else {
            Some(JointAction(
                action_fields
                    .iter()
                    .map(|f| parse_bit(f, line))
                    .collect::<Result<_>>()?,
            ))
        };
        if let Some((prev, _, _)) = rows.last() {
            if t != prev + 1 {
                return Err(bad(format!("slot {t} does not follow {prev}")));
            }
        }
        rows.push((t, SystemState(obs), action));
    }
    let start = rows.first().map_or(0, |r| r.0);
    let mut records = Vec::with_capacity(rows.len().saturating_sub(1));
    for (i, pair) in rows.windows(2).enumerate() {
        let action = pair[0].2.clone().ok_or_else(|| Error::MalformedRecord {
            index: i,
            reason: "missing action before the last line".into(),
        })?;
        let record = TransitionRecord {
            state: pair[0].1.clone(),
            action,
            next_state: pair[1].1.clone(),
        };
        record
            .validate(config)
            .map_err(|reason| Error::MalformedRecord { index: i, reason })?;
        records.push(record);
    }
    Ok((records, start))
}

pub fn save_trajectory(path: &Path, records: &[TransitionRecord], start: usize, config: &SystemConfig) -> Result<()> {
    write_trajectory(std::fs::File::create(path)?, records, start, config)
}

pub fn load_trajectory(path: &Path, config: &SystemConfig) -> Result<(Vec<TransitionRecord>, usize)> {
    read_trajectory(std::fs::File::open(path)?, config)
}

/// Any serializable rows as CSV with a header.
pub fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_rows(std::fs::File::create(path)?, rows)
}

pub fn posterior_to_toml(posterior: &PosteriorModel) -> Result<String> {
    toml::to_string(posterior).map_err(|e| Error::Config(e.to_string()))
}

pub fn posterior_from_toml(text: &str) -> Result<PosteriorModel> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn save_posterior(path: &Path, posterior: &PosteriorModel) -> Result<()> {
    std::fs::write(path, posterior_to_toml(posterior)?)?;
    Ok(())
}

pub fn load_posterior(path: &Path) -> Result<PosteriorModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    posterior_from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{init_prior, update_posterior};
    use crate::env::initial_state;
    use crate::policy::{AccessPolicy, ExplorationPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize) -> Vec<TransitionRecord> {
        let config = SystemConfig::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = initial_state(&config.dynamics, &config, &mut rng);
        let mut out = Vec::new();
        for t in 0..n {
            let (action, _) = ExplorationPolicy::default().sample_action(&state, t, &mut rng);
            let next = crate::env::step_ground_truth(&state, &action, &config, &mut rng).unwrap().next_state;
            out.push(TransitionRecord {
                state,
                action,
                next_state: next.clone(),
            });
            state = next;
        }
        out
    }

    #[test]
    fn trajectory_round_trip() {
        let config = SystemConfig::reference();
        for n in [0, 1, 30] {
            let records = dataset(n);
            let mut buf = Vec::new();
            write_trajectory(&mut buf, &records, 5, &config).unwrap();
            let (back, start) = read_trajectory(buf.as_slice(), &config).unwrap();
            assert_eq!(back, records);
            if n > 0 {
                assert_eq!(start, 5);
            }
        }
    }

    #[test]
    fn header_and_last_line_layout() {
        let config = SystemConfig::reference();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &dataset(1), 0, &config).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,q1,q2,q3,q4,g1,g2,g3,g4,d1,d2,d3,d4,a1,a2,a3,a4,reward");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",,,,,"));
    }

    #[test]
    fn inconsistent_lines_are_rejected() {
        let config = SystemConfig::reference();
        let bad = "t,q1,q2,q3,q4,g1,g2,g3,g4,d1,d2,d3,d4,a1,a2,a3,a4,reward\n\
                   0,0,0,0,0,0,0,0,0,0,0,0,0,1,0,0,0,-4.0\n\
                   1,0,0,0,0,0,0,0,0,0,0,0,0,,,,,\n";
        // Device 1 transmits from an empty buffer.
        assert!(matches!(
            read_trajectory(bad.as_bytes(), &config),
            Err(Error::MalformedRecord { index: 0, .. })
        ));
        let gap = bad.replace("\n1,", "\n2,");
        assert!(read_trajectory(gap.as_bytes(), &config).is_err());
        let short = "t,q1,reward\n";
        assert!(read_trajectory(short.as_bytes(), &config).is_err());
    }

    #[test]
    fn posterior_round_trip() {
        let config = SystemConfig::reference();
        let posterior = update_posterior(&init_prior(&config, 0.01).unwrap(), &dataset(40), &config).unwrap();
        let text = posterior_to_toml(&posterior).unwrap();
        assert_eq!(posterior_from_toml(&text).unwrap(), posterior);
    }
}
