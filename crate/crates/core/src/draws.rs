//! Retained posterior draws and their on-disk form.
//!
//! A draws directory holds one `draws_chain<k>.csv` per chain (named
//! parameter columns followed by sampler diagnostics) and a `meta.json`
//! with the sampler configuration, parameter layout and divergence totals.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParameters, ParameterLayout};
use crate::sampler::SamplerConfig;

/// Per-draw sampler diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawDiagnostics {
    pub divergent: bool,
    pub treedepth: u32,
    pub n_leapfrog: u64,
    pub accept_stat: f64,
    pub energy: f64,
    pub step_size: f64,
}

const DIAGNOSTIC_COLUMNS: [&str; 6] = [
    "divergent__",
    "treedepth__",
    "n_leapfrog__",
    "accept_stat__",
    "energy__",
    "stepsize__",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainDraws {
    /// Constrained-space rows ordered like [`PosteriorDraws::names`].
    pub rows: Vec<Vec<f64>>,
    pub diagnostics: Vec<DrawDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    pub config: SamplerConfig,
    /// Present when the draws come from the multilevel model.
    pub layout: Option<ParameterLayout>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: SamplerConfig,
    seed: u64,
    names: Vec<String>,
    layout: Option<ParameterLayout>,
    chains: usize,
    draws_per_chain: Vec<usize>,
    divergences: usize,
    divergences_per_chain: Vec<usize>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.rows.len()).sum()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// One vector per chain for the named column.
    pub fn chain_columns(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let k = self.position(name)?;
        Ok(self.chains.iter().map(|c| c.rows.iter().map(|r| r[k]).collect()).collect())
    }

    /// The named column pooled across chains, chain-major.
    pub fn pooled(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.position(name)?;
        Ok(self.rows().map(|r| r[k]).collect())
    }

    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> + '_ {
        self.chains.iter().flat_map(|c| c.rows.iter())
    }

    pub fn diagnostics(&self) -> impl Iterator<Item = &DrawDiagnostics> + '_ {
        self.chains.iter().flat_map(|c| c.diagnostics.iter())
    }

    pub fn divergences(&self) -> usize {
        self.diagnostics().filter(|d| d.divergent).count()
    }

    pub fn layout(&self) -> Result<&ParameterLayout> {
        self.layout
            .as_ref()
            .ok_or_else(|| Error::Config("draws carry no model parameter layout".into()))
    }

    /// Parameters of the `i`-th pooled draw.
    pub fn params(&self, i: usize) -> Result<ModelParameters> {
        let layout = self.layout()?;
        let row = self.rows().nth(i).ok_or(Error::TooFewDraws {
            needed: i + 1,
            got: self.n_draws(),
        })?;
        Ok(layout.params_from_row(row))
    }

    pub fn iter_params(&self) -> Result<impl Iterator<Item = ModelParameters> + '_> {
        let layout = self.layout()?;
        Ok(self.rows().map(move |r| layout.params_from_row(r)))
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, chain) in self.chains.iter().enumerate() {
            let path = dir.join(format!("draws_chain{k}.csv"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            w.write_record(self.names.iter().map(String::as_str).chain(DIAGNOSTIC_COLUMNS))?;
            for (row, d) in chain.rows.iter().zip(&chain.diagnostics) {
                let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                rec.push(u8::from(d.divergent).to_string());
                rec.push(d.treedepth.to_string());
                rec.push(d.n_leapfrog.to_string());
                rec.push(d.accept_stat.to_string());
                rec.push(d.energy.to_string());
                rec.push(d.step_size.to_string());
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let meta = Meta {
            config: self.config.clone(),
            seed: self.config.seed,
            names: self.names.clone(),
            layout: self.layout.clone(),
            chains: self.chains.len(),
            draws_per_chain: self.chains.iter().map(|c| c.rows.len()).collect(),
            divergences: self.divergences(),
            divergences_per_chain: self
                .chains
                .iter()
                .map(|c| c.diagnostics.iter().filter(|d| d.divergent).count())
                .collect(),
        };
        let path = dir.join("meta.json");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &meta)?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Meta = serde_json::from_reader(file)?;
        let mut chains = Vec::with_capacity(meta.chains);
        for k in 0..meta.chains {
            let path = dir.join(format!("draws_chain{k}.csv"));
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut rdr = csv::Reader::from_reader(file);
            let header = rdr.headers()?.clone();
            let np = meta.names.len();
            if header.len() != np + DIAGNOSTIC_COLUMNS.len()
                || header.iter().take(np).ne(meta.names.iter().map(String::as_str))
            {
                return Err(Error::Config(format!("{} header does not match meta.json", path.display())));
            }
            let mut chain = ChainDraws::default();
            for (i, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let num = |j: usize| -> Result<f64> {
                    rec.get(j).unwrap_or("").parse::<f64>().map_err(|_| Error::Row {
                        row: i + 1,
                        message: format!("non-numeric value in column {}", header.get(j).unwrap_or("?")),
                    })
                };
                let row = (0..np).map(num).collect::<Result<Vec<_>>>()?;
                chain.diagnostics.push(DrawDiagnostics {
                    divergent: num(np)? != 0.0,
                    treedepth: num(np + 1)? as u32,
                    n_leapfrog: num(np + 2)? as u64,
                    accept_stat: num(np + 3)?,
                    energy: num(np + 4)?,
                    step_size: num(np + 5)?,
                });
                chain.rows.push(row);
            }
            chains.push(chain);
        }
        Ok(Self {
            names: meta.names,
            chains,
            config: meta.config,
            layout: meta.layout,
        })
    }
}
