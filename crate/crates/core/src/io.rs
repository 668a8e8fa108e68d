//! CSV and JSON formats.
//!
//! * population: `unit_id,cluster,y0,y1`
//! * observed data: `unit_id,cluster,z,y`
//! * release: `unit_id,cluster,z,y_tilde` plus a JSON sidecar with the
//!   parameters, priors and debias rows of every (cluster, arm) cell.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Design, MechanismParams, OutcomeSpace, PopulationDataset, PrivatizedRelease, ProjectedPrior, RawUnit, ReleasedUnit,
    Violation,
};

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?;
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != expected {
        return Err(parse_err(1, format!("expected header {}, found {}", expected.join(","), found.join(","))));
    }
    Ok(())
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize, name: &str) -> Result<&'r str> {
    record
        .get(idx)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| parse_err(line_of(record), format!("missing {name}")))
}

fn number(record: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let raw = field(record, idx, name)?;
    raw.parse::<f64>().map_err(|_| parse_err(line_of(record), format!("{name} {raw:?} is not a number")))
}

fn arm(record: &csv::StringRecord, idx: usize) -> Result<bool> {
    match field(record, idx, "z")? {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(parse_err(line_of(record), format!("z must be 0 or 1, found {other:?}"))),
    }
}

fn outcome_in(space: &OutcomeSpace, record: &csv::StringRecord, value: f64) -> Result<usize> {
    space.index_of(value).ok_or_else(|| parse_err(line_of(record), format!("outcome outside space: {value}")))
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input)
}

/// Reads and validates a population file.
pub fn read_population_csv<R: Read>(input: R, space: &OutcomeSpace) -> Result<PopulationDataset> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &["unit_id", "cluster", "y0", "y1"])?;
    let mut units = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(parse_err(line_of(&record), format!("expected 4 fields, found {}", record.len())));
        }
        let unit = RawUnit {
            unit_id: field(&record, 0, "unit_id")?.to_string(),
            cluster: field(&record, 1, "cluster")?.to_string(),
            y0: number(&record, 2, "y0")?,
            y1: number(&record, 3, "y1")?,
        };
        outcome_in(space, &record, unit.y0)?;
        outcome_in(space, &record, unit.y1)?;
        if !seen.insert(unit.unit_id.clone()) {
            return Err(parse_err(line_of(&record), format!("duplicate unit {}", unit.unit_id)));
        }
        units.push(unit);
    }
    PopulationDataset::from_raw(&units, space.clone())
}

/// Writes a population file.
pub fn write_population_csv<W: Write>(pop: &PopulationDataset, output: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["unit_id", "cluster", "y0", "y1"])?;
    for i in 0..pop.len() {
        w.write_record([
            pop.unit_ids()[i].as_str(),
            pop.cluster_labels()[pop.clusters()[i]].as_str(),
            &pop.outcome_value(i, 0).to_string(),
            &pop.outcome_value(i, 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads observed data `unit_id,cluster,z,y`.
///
/// Only the observed outcome is known, so it is stored as both potential
/// outcomes; the mechanisms and estimators read nothing else.
pub fn read_observed_csv<R: Read>(input: R, space: &OutcomeSpace) -> Result<(PopulationDataset, Design)> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &["unit_id", "cluster", "z", "y"])?;
    let mut units = Vec::new();
    let mut assignment = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(parse_err(line_of(&record), format!("expected 4 fields, found {}", record.len())));
        }
        let y = number(&record, 3, "y")?;
        outcome_in(space, &record, y)?;
        let unit_id = field(&record, 0, "unit_id")?.to_string();
        if !seen.insert(unit_id.clone()) {
            return Err(parse_err(line_of(&record), format!("duplicate unit {unit_id}")));
        }
        assignment.push(arm(&record, 2)?);
        units.push(RawUnit { unit_id, cluster: field(&record, 1, "cluster")?.to_string(), y0: y, y1: y });
    }
    let pop = PopulationDataset::from_raw(&units, space.clone())?;
    let design = Design::from_assignment(&pop, assignment)?;
    Ok((pop, design))
}

/// Writes observed data for a population under a design.
pub fn write_observed_csv<W: Write>(pop: &PopulationDataset, design: &Design, output: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["unit_id", "cluster", "z", "y"])?;
    for i in 0..pop.len() {
        let arm = design.arm_of(i);
        w.write_record([
            pop.unit_ids()[i].as_str(),
            pop.cluster_labels()[pop.clusters()[i]].as_str(),
            if arm == 1 { "1" } else { "0" },
            &pop.outcome_value(i, arm).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One (cluster, arm) cell of a release sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarCell {
    pub cluster: String,
    pub arm: u8,
    pub prior: Vec<f64>,
    pub debias_row: Vec<f64>,
}

/// JSON companion of a release CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseSidecar {
    pub params: MechanismParams,
    pub outcome_values: OutcomeSpace,
    pub clusters: Vec<String>,
    pub cells: Vec<SidecarCell>,
}

impl ReleaseSidecar {
    pub fn from_release(release: &PrivatizedRelease) -> Self {
        let mut cells = Vec::with_capacity(2 * release.cluster_labels.len());
        for (c, label) in release.cluster_labels.iter().enumerate() {
            for arm in 0..2u8 {
                cells.push(SidecarCell {
                    cluster: label.clone(),
                    arm,
                    prior: release.prior.get(c, arm).to_vec(),
                    debias_row: release.debias.get(c).map(|d| d[arm as usize].clone()).unwrap_or_default(),
                });
            }
        }
        Self {
            params: release.params,
            outcome_values: release.space.clone(),
            clusters: release.cluster_labels.clone(),
            cells,
        }
    }
}

/// Writes the release CSV and its JSON sidecar.
pub fn write_release<W: Write, J: Write>(release: &PrivatizedRelease, csv_out: W, mut json_out: J) -> Result<()> {
    let mut w = csv::Writer::from_writer(csv_out);
    w.write_record(["unit_id", "cluster", "z", "y_tilde"])?;
    for u in &release.units {
        w.write_record([
            u.unit_id.as_str(),
            release.cluster_labels[u.cluster].as_str(),
            if u.treated { "1" } else { "0" },
            &release.space.value(u.y_tilde).to_string(),
        ])?;
    }
    w.flush()?;
    serde_json::to_writer_pretty(&mut json_out, &ReleaseSidecar::from_release(release))?;
    json_out.write_all(b"\n")?;
    Ok(())
}

/// Reads a release back from its CSV and sidecar.
pub fn read_release<R: Read, J: Read>(csv_in: R, json_in: J) -> Result<PrivatizedRelease> {
    let sidecar: ReleaseSidecar = serde_json::from_reader(json_in)?;
    let space = sidecar.outcome_values.clone();
    let slot: HashMap<&str, usize> = sidecar.clusters.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let c = sidecar.clusters.len();
    let k = space.len();
    let mut priors = vec![[vec![0.0; k], vec![0.0; k]]; c];
    let mut debias: Vec<[Vec<f64>; 2]> = vec![Default::default(); c];
    for cell in &sidecar.cells {
        let idx = *slot
            .get(cell.cluster.as_str())
            .ok_or_else(|| Error::InvalidParams(format!("sidecar cell for unknown cluster {:?}", cell.cluster)))?;
        if cell.arm > 1 || cell.prior.len() != k {
            return Err(Error::InvalidParams(format!("malformed sidecar cell for cluster {:?}", cell.cluster)));
        }
        priors[idx][cell.arm as usize] = cell.prior.clone();
        debias[idx][cell.arm as usize] = cell.debias_row.clone();
    }

    let mut reader = csv_reader(csv_in);
    check_header(&mut reader, &["unit_id", "cluster", "z", "y_tilde"])?;
    let mut units = Vec::new();
    for record in reader.records() {
        let record = record?;
        let label = field(&record, 1, "cluster")?;
        let cluster = *slot
            .get(label)
            .ok_or_else(|| parse_err(line_of(&record), format!("cluster {label:?} missing from sidecar")))?;
        let y = number(&record, 3, "y_tilde")?;
        units.push(ReleasedUnit {
            unit_id: field(&record, 0, "unit_id")?.to_string(),
            cluster,
            treated: arm(&record, 2)?,
            y_tilde: outcome_in(&space, &record, y)?,
        });
    }
    Ok(PrivatizedRelease {
        space,
        cluster_labels: sidecar.clusters,
        units,
        debias,
        prior: ProjectedPrior { gamma: sidecar.params.gamma, priors },
        params: sidecar.params,
    })
}

/// Formats validation violations one per line.
pub fn format_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::tau_q;
    use crate::mechanisms::cluster_dp;
    use crate::model::{draw_design, DesignCounts, Extended};
    use crate::rng::{SeedTree, Stream};

    fn space() -> OutcomeSpace {
        OutcomeSpace::new(vec![0.0, 1.0, 2.0]).unwrap()
    }

    const GOOD: &str = "unit_id,cluster,y0,y1\na,x,0,1\nb,x,1,2\nc,y,0,0\nd,y,2,2\ne,y,1,2\nf,x,0,1\n";

    #[test]
    fn reads_well_formed_population() {
        let pop = read_population_csv(GOOD.as_bytes(), &space()).unwrap();
        assert_eq!(pop.len(), 6);
        assert_eq!(pop.cluster_sizes(), vec![3, 3]);
    }

    #[test]
    fn outcome_outside_space_names_line() {
        let bad = GOOD.replace("d,y,2,2", "d,y,7,2");
        let err = read_population_csv(bad.as_bytes(), &space()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");
        assert!(err.to_string().contains("outcome outside space"));
    }

    #[test]
    fn duplicate_unit_rejected() {
        let bad = GOOD.replace("e,y,1,2", "a,y,1,2");
        let err = read_population_csv(bad.as_bytes(), &space()).unwrap_err();
        assert!(err.to_string().contains("duplicate unit"), "{err}");
    }

    #[test]
    fn malformed_and_small_clusters() {
        let bad = GOOD.replace("b,x,1,2", "b,x,one,2");
        assert!(matches!(read_population_csv(bad.as_bytes(), &space()), Err(Error::Parse { line: 3, .. })));
        let lonely = "unit_id,cluster,y0,y1\na,x,0,1\nb,y,0,1\nc,y,1,1\n";
        let err = read_population_csv(lonely.as_bytes(), &space()).unwrap_err();
        assert!(err.to_string().contains("cluster below minimum size 2"));
        let header = "id,cluster,y0,y1\na,x,0,1\n";
        assert!(read_population_csv(header.as_bytes(), &space()).is_err());
    }

    #[test]
    fn population_round_trip() {
        let pop = read_population_csv(GOOD.as_bytes(), &space()).unwrap();
        let mut buf = Vec::new();
        write_population_csv(&pop, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), GOOD);
        assert_eq!(read_population_csv(buf.as_slice(), &space()).unwrap(), pop);
    }

    #[test]
    fn observed_round_trip() {
        let pop = read_population_csv(GOOD.as_bytes(), &space()).unwrap();
        let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
        let design = draw_design(&pop, &counts, &mut SeedTree::new(1).stream(Stream::Assignment, 0)).unwrap();
        let mut buf = Vec::new();
        write_observed_csv(&pop, &design, &mut buf).unwrap();
        let (obs, d2) = read_observed_csv(buf.as_slice(), &space()).unwrap();
        assert_eq!(d2.assignment(), design.assignment());
        for i in 0..pop.len() {
            assert_eq!(obs.outcome(i, d2.arm_of(i)), design.observed(&pop, i));
        }
    }

    #[test]
    fn release_round_trip_is_exact() {
        let pop = read_population_csv(GOOD.as_bytes(), &space()).unwrap();
        let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
        let tree = SeedTree::new(2);
        let design = draw_design(&pop, &counts, &mut tree.stream(Stream::Assignment, 0)).unwrap();
        let params = MechanismParams::cluster_dp(0.1, Extended::Finite(2.0), 0.6);
        let (_, release) = cluster_dp(
            &pop,
            &design,
            &params,
            &mut tree.stream(Stream::Laplace, 0),
            &mut tree.stream(Stream::Resampling, 0),
        )
        .unwrap();
        let (mut csv_buf, mut json_buf) = (Vec::new(), Vec::new());
        write_release(&release, &mut csv_buf, &mut json_buf).unwrap();
        let back = read_release(csv_buf.as_slice(), json_buf.as_slice()).unwrap();
        assert_eq!(back, release);
        assert_eq!(tau_q(&back).unwrap(), tau_q(&release).unwrap());
    }
}
