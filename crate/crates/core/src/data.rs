//! Deployment ingestion and aggregation into the model's response.
//!
//! Raw input is one CSV row per (site, year, station, species) with the MaxN
//! count for that species. Aggregation sums the counts of the configured
//! indicator species per deployment; a species missing from a deployment is
//! an observed zero.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of a deployment CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub site: String,
    pub year: i32,
    pub station_id: String,
    pub species_code: String,
    pub count: u64,
    pub usable: bool,
}

/// Maps the logical columns onto header names in the input file.
///
/// Loaded from a JSON sidecar; any field left out keeps its default name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub site: String,
    pub year: String,
    pub station_id: String,
    pub species_code: String,
    pub maxn: String,
    pub usable: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            site: "site".into(),
            year: "year".into(),
            station_id: "station_id".into(),
            species_code: "species_code".into(),
            maxn: "maxn".into(),
            usable: "usable".into(),
        }
    }
}

impl ColumnMap {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(file)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorSpecies {
    pub species_code: String,
    pub common_name: String,
    pub local_name: String,
}

/// The species whose counts are summed into the abundance response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndicatorList {
    entries: Vec<IndicatorSpecies>,
}

impl IndicatorList {
    pub fn new(entries: Vec<IndicatorSpecies>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Indicators("list is empty".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.species_code.as_str()) {
                return Err(Error::Indicators(format!(
                    "species code `{}` listed twice",
                    e.species_code
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Convenience for tests and synthetic data: codes double as names.
    pub fn from_codes<S: AsRef<str>>(codes: &[S]) -> Result<Self> {
        Self::new(
            codes
                .iter()
                .map(|c| IndicatorSpecies {
                    species_code: c.as_ref().to_string(),
                    common_name: c.as_ref().to_string(),
                    local_name: c.as_ref().to_string(),
                })
                .collect(),
        )
    }

    pub fn from_json_reader(reader: impl Read) -> Result<Self> {
        let entries: Vec<IndicatorSpecies> = serde_json::from_reader(reader)?;
        Self::new(entries)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_reader(file)
    }

    pub fn entries(&self) -> &[IndicatorSpecies] {
        &self.entries
    }

    pub fn contains(&self, species_code: &str) -> bool {
        self.entries.iter().any(|e| e.species_code == species_code)
    }
}

pub fn parse_deployments(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<Vec<DeploymentRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_deployments_from_reader(file, schema)
}

/// Parses deployment rows. Row numbers in errors are 1-based data rows
/// (the header is row 0).
pub fn parse_deployments_from_reader(reader: impl Read, schema: &ColumnMap) -> Result<Vec<DeploymentRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let site = column(&schema.site)?;
    let year = column(&schema.year)?;
    let station = column(&schema.station_id)?;
    let species = column(&schema.species_code)?;
    let maxn = column(&schema.maxn)?;
    let usable = headers.iter().position(|h| h == schema.usable);

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let year_val: i32 = field(year).parse().map_err(|_| Error::Row {
            row: row_no,
            message: format!("year `{}` is not an integer", field(year)),
        })?;
        let count: u64 = field(maxn).parse().map_err(|_| Error::Row {
            row: row_no,
            message: format!("count `{}` is not a non-negative integer", field(maxn)),
        })?;
        let usable_val = match usable {
            None => true,
            Some(idx) => parse_flag(field(idx)).ok_or_else(|| Error::Row {
                row: row_no,
                message: format!("usable flag `{}` is not a boolean", field(idx)),
            })?,
        };
        out.push(DeploymentRecord {
            site: field(site).to_string(),
            year: year_val,
            station_id: field(station).to_string(),
            species_code: field(species).to_string(),
            count,
            usable: usable_val,
        });
    }
    Ok(out)
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "" | "true" | "t" | "1" | "yes" | "y" => Some(true),
        "false" | "f" | "0" | "no" | "n" => Some(false),
        _ => None,
    }
}

/// Summed indicator abundance for one deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedObservation {
    pub site: String,
    pub year: i32,
    pub station_id: String,
    #[serde(rename = "A")]
    pub a: u64,
}

/// Positions of one observation in each grouping index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignIndex {
    pub site: usize,
    pub year: usize,
    pub station: usize,
    pub site_year: usize,
}

/// Aggregated observations with sorted, duplicate-free grouping indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    observations: Vec<AggregatedObservation>,
    sites: Vec<String>,
    years: Vec<i32>,
    stations: Vec<String>,
    site_year_pairs: Vec<(String, i32)>,
    design: Vec<DesignIndex>,
}

impl ObservationTable {
    /// Builds the table and its indices. Observations are sorted by
    /// (site, year, station) so the result does not depend on input order.
    /// An empty table is allowed here (it carries prior-only models);
    /// [`aggregate`] rejects it.
    pub fn from_observations(mut observations: Vec<AggregatedObservation>) -> Result<Self> {
        observations.sort_by(|a, b| {
            (&a.site, a.year, &a.station_id).cmp(&(&b.site, b.year, &b.station_id))
        });
        for w in observations.windows(2) {
            if (&w[0].site, w[0].year, &w[0].station_id) == (&w[1].site, w[1].year, &w[1].station_id) {
                return Err(Error::DuplicateRecord {
                    site: w[0].site.clone(),
                    year: w[0].year,
                    station: w[0].station_id.clone(),
                    species: String::new(),
                });
            }
        }
        let sites: Vec<String> = observations
            .iter()
            .map(|o| o.site.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let years: Vec<i32> = observations
            .iter()
            .map(|o| o.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let stations: Vec<String> = observations
            .iter()
            .map(|o| o.station_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let site_year_pairs: Vec<(String, i32)> = observations
            .iter()
            .map(|o| (o.site.clone(), o.year))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let design = observations
            .iter()
            .map(|o| DesignIndex {
                site: sites.binary_search(&o.site).unwrap(),
                year: years.binary_search(&o.year).unwrap(),
                station: stations.binary_search(&o.station_id).unwrap(),
                site_year: site_year_pairs
                    .binary_search(&(o.site.clone(), o.year))
                    .unwrap(),
            })
            .collect();
        Ok(Self {
            observations,
            sites,
            years,
            stations,
            site_year_pairs,
            design,
        })
    }

    pub fn observations(&self) -> &[AggregatedObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn stations(&self) -> &[String] {
        &self.stations
    }

    pub fn site_year_pairs(&self) -> &[(String, i32)] {
        &self.site_year_pairs
    }

    pub fn design(&self) -> &[DesignIndex] {
        &self.design
    }

    pub fn responses(&self) -> impl ExactSizeIterator<Item = u64> + '_ {
        self.observations.iter().map(|o| o.a)
    }

    pub fn site_index(&self, site: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == site)
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }

    pub fn site_year_index(&self, site: &str, year: i32) -> Option<usize> {
        self.site_year_pairs
            .iter()
            .position(|(s, y)| s == site && *y == year)
    }

    /// Same design, responses replaced in observation order.
    pub fn with_responses(&self, responses: &[u64]) -> Self {
        assert_eq!(responses.len(), self.len(), "response length mismatch");
        let mut out = self.clone();
        for (o, &a) in out.observations.iter_mut().zip(responses) {
            o.a = a;
        }
        out
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for o in &self.observations {
            w.serialize(o)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let obs = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<AggregatedObservation>, _>>()?;
        Self::from_observations(obs)
    }
}

/// Sums indicator counts per usable deployment.
///
/// A deployment is identified by (site, year, station). If any of its rows is
/// flagged unusable the whole deployment is dropped.
pub fn aggregate(records: &[DeploymentRecord], indicators: &IndicatorList) -> Result<ObservationTable> {
    let mut seen = HashSet::new();
    let mut deployments: BTreeMap<(&str, i32, &str), (u64, bool)> = BTreeMap::new();
    for r in records {
        if !seen.insert((&r.site, r.year, &r.station_id, &r.species_code)) {
            return Err(Error::DuplicateRecord {
                site: r.site.clone(),
                year: r.year,
                station: r.station_id.clone(),
                species: r.species_code.clone(),
            });
        }
        let entry = deployments
            .entry((r.site.as_str(), r.year, r.station_id.as_str()))
            .or_insert((0, true));
        entry.1 &= r.usable;
        if indicators.contains(&r.species_code) {
            entry.0 += r.count;
        }
    }
    let observations: Vec<_> = deployments
        .into_iter()
        .filter(|(_, (_, usable))| *usable)
        .map(|((site, year, station), (a, _))| AggregatedObservation {
            site: site.to_string(),
            year,
            station_id: station.to_string(),
            a,
        })
        .collect();
    if observations.is_empty() {
        return Err(Error::EmptyTable);
    }
    ObservationTable::from_observations(observations)
}
