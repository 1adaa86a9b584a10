//! Datasets on disk, per-sample evaluation of every scheduler and the ratio
//! metrics used to compare them.
//!
//! A dataset file is one JSON header line followed by a binary body. In
//! seeds mode the body is one little-endian `u64` stream id per sample and
//! samples are regenerated on load; in tensors mode each sample stores its
//! gain tensor, index order `(m, r, n, l)`, then its feature tensor, index
//! order `(i, j, k)`, as little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{exhaustive_search_with_budget, greedy_nosched, DEFAULT_BUDGET};
use crate::channel::{Codebook, EffectiveGains, SimConfig};
use crate::error::{Error, Result};
use crate::gblinks::{self, ModelParams};
use crate::graph::GraphFeatures;
use crate::problem::{round_policy, selection_wsr, BinarySelection};
use crate::rng::RngState;
use crate::sample::Sample;
use crate::sca::{self, ScaConfig};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BEAMGRAPH_THREADS";

/// Largest lifted-variable count `n^2 nr nt` the SCA method accepts.
pub const SCA_VARIABLE_BUDGET: u128 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageMode {
    Seeds,
    Tensors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub config: SimConfig,
    pub master_seed: u64,
    pub sample_count: usize,
    pub storage_mode: StorageMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Parses a thread cap; `None` means no cap.
pub fn parse_thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    value
        .map(|v| {
            v.trim()
                .parse()
                .ok()
                .filter(|t: &usize| *t > 0)
                .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))
        })
        .transpose()
}

/// Runs `f` on a pool sized by [`THREADS_ENV`] when it is set, on the
/// global pool otherwise.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let var = std::env::var(THREADS_ENV).ok();
    match parse_thread_cap(var.as_deref())? {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn generate_one(config: &SimConfig, codebook: &Codebook, master_seed: u64, id: u64) -> Result<Sample> {
    Sample::generate(config, codebook, &mut RngState::seed_from(master_seed, id))
}

/// Sample `i` is drawn from stream `i` of `master_seed`.
pub fn gen_dataset(config: &SimConfig, count: usize, master_seed: u64, mode: StorageMode) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    config.validate()?;
    let codebook = Codebook::dft(config.nt, config.nr);
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_one(config, &codebook, master_seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            config: config.clone(),
            master_seed,
            sample_count: count,
            storage_mode: mode,
        },
        samples,
    })
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.into(),
    }
}

fn read_f64s(reader: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    reader
        .read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated tensor body"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Dataset {
    pub fn config(&self) -> &SimConfig {
        &self.header.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, &self.header)?;
        out.write_all(b"\n")?;
        match self.header.storage_mode {
            StorageMode::Seeds => {
                for i in 0..self.samples.len() as u64 {
                    out.write_all(&i.to_le_bytes())?;
                }
            }
            StorageMode::Tensors => {
                for s in &self.samples {
                    for x in s.gains.as_slice().iter().chain(s.features.as_slice()) {
                        out.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| format_err(path, format!("bad header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(format_err(
                path,
                format!("unsupported dataset version {}", header.format_version),
            ));
        }
        let cfg = &header.config;
        let codebook = Codebook::dft(cfg.nt, cfg.nr);
        let samples = match header.storage_mode {
            StorageMode::Seeds => {
                let ids = (0..header.sample_count)
                    .map(|_| {
                        let mut b = [0u8; 8];
                        reader
                            .read_exact(&mut b)
                            .map_err(|_| format_err(path, "truncated seed list"))?;
                        Ok(u64::from_le_bytes(b))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ids.into_par_iter()
                    .map(|id| generate_one(cfg, &codebook, header.master_seed, id))
                    .collect::<Result<Vec<_>>>()?
            }
            StorageMode::Tensors => {
                let len = cfg.n * cfg.n * cfg.nr * cfg.nt;
                (0..header.sample_count)
                    .map(|_| {
                        let gains = EffectiveGains::from_raw(cfg.n, cfg.nr, cfg.nt, read_f64s(&mut reader, len, path)?)?;
                        let features =
                            GraphFeatures::from_raw(cfg.n, cfg.nr, cfg.nt, read_f64s(&mut reader, len, path)?)?;
                        Ok(Sample { gains, features })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(format_err(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, samples })
    }
}

/// Scheduler names accepted by [`Method::from_str`].
pub const METHOD_NAMES: [&str; 4] = ["gblinks", "greedy", "exhaustive", "sca"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Gblinks,
    Greedy,
    Exhaustive,
    Sca,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gblinks => "gblinks",
            Method::Greedy => "greedy",
            Method::Exhaustive => "exhaustive",
            Method::Sca => "sca",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gblinks" => Ok(Method::Gblinks),
            "greedy" => Ok(Method::Greedy),
            "exhaustive" => Ok(Method::Exhaustive),
            "sca" => Ok(Method::Sca),
            _ => Err(Error::invalid(format!(
                "unknown method {s:?}; allowed: {}",
                METHOD_NAMES.join(", ")
            ))),
        }
    }
}

/// Everything a method may need besides the sample.
#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub model: Option<&'a ModelParams>,
    pub round_threshold: f64,
    pub exhaustive_budget: u128,
    pub sca: ScaConfig,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            model: None,
            round_threshold: 0.5,
            exhaustive_budget: DEFAULT_BUDGET,
            sca: ScaConfig::default(),
        }
    }
}

/// One method on one sample. `wsr` and `active_pairs` are `None` when the
/// method refused or failed on the sample; `error` then says why.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub sample_id: usize,
    pub method: String,
    pub wsr: Option<f64>,
    pub active_pairs: Option<usize>,
    pub runtime_ms: f64,
    pub ra: Option<f64>,
    pub error: Option<String>,
}

/// Schedule chosen by `method` on one sample.
pub fn solve(sample: &Sample, config: &SimConfig, method: Method, opts: &EvalOptions) -> Result<BinarySelection> {
    match method {
        Method::Greedy => Ok(greedy_nosched(&sample.gains)),
        Method::Exhaustive => Ok(exhaustive_search_with_budget(&sample.gains, config, opts.exhaustive_budget)?.0),
        Method::Gblinks => {
            let model = opts
                .model
                .ok_or_else(|| Error::invalid("method gblinks needs a model"))?;
            let init = gblinks::default_init(config.n, config.nr, config.nt);
            let policy = gblinks::forward(model, &sample.features, &init)?;
            Ok(round_policy(&policy, opts.round_threshold))
        }
        Method::Sca => {
            let options = (config.n * config.n * config.nr * config.nt) as u128;
            if options > SCA_VARIABLE_BUDGET {
                return Err(Error::TooLarge {
                    options,
                    budget: SCA_VARIABLE_BUDGET,
                });
            }
            Ok(sca::run(&sample.gains, config, &opts.sca)?.selection)
        }
    }
}

/// Runs `method` on every sample, in parallel, rows in sample order.
/// Per-sample failures become rows without a rate; a missing model or a
/// model that does not fit the dataset fails the whole call.
pub fn evaluate(dataset: &Dataset, method: Method, opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    let config = dataset.config();
    if method == Method::Gblinks {
        let model = opts
            .model
            .ok_or_else(|| Error::invalid("method gblinks needs a model"))?;
        let spec = model.spec();
        if (spec.nt, spec.nr) != (config.nt, config.nr) {
            return Err(Error::invalid(format!(
                "model built for nt={}, nr={} but dataset has nt={}, nr={}",
                spec.nt, spec.nr, config.nt, config.nr
            )));
        }
    }
    with_thread_cap(|| {
        dataset
            .samples
            .par_iter()
            .enumerate()
            .map(|(id, sample)| {
                let start = Instant::now();
                let outcome = solve(sample, config, method, opts);
                let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
                let (wsr, active_pairs, error) = match outcome {
                    Ok(sel) => (
                        Some(selection_wsr(&sample.gains, &sel, config)),
                        Some(sel.active_count()),
                        None,
                    ),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                MetricsRow {
                    sample_id: id,
                    method: method.name().to_string(),
                    wsr,
                    active_pairs,
                    runtime_ms,
                    ra: None,
                    error,
                }
            })
            .collect()
    })
}

/// Per-sample ratios with their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioReport {
    /// `None` marks a sample whose ratio is undefined: a zero denominator
    /// with a nonzero numerator, or a missing rate on either side.
    pub ratios: Vec<(usize, Option<f64>)>,
}

impl RatioReport {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.ratios.iter().filter_map(|(_, r)| *r)
    }

    /// Mean over defined ratios; NaN when there are none.
    pub fn mean(&self) -> f64 {
        let (sum, count) = self.defined().fold((0.0, 0usize), |(s, c), r| (s + r, c + 1));
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    }

    /// Share of all samples whose ratio is defined and at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        if self.ratios.is_empty() {
            return f64::NAN;
        }
        self.defined().filter(|r| *r >= threshold).count() as f64 / self.ratios.len() as f64
    }

    pub fn flagged(&self) -> usize {
        self.ratios.iter().filter(|(_, r)| r.is_none()).count()
    }
}

/// `numerator wsr / denominator wsr` per sample; `0 / 0` counts as 1.
pub fn compute_ratios(numerator: &[MetricsRow], denominator: &[MetricsRow]) -> Result<RatioReport> {
    if numerator.len() != denominator.len() {
        return Err(Error::invalid(format!(
            "row counts differ: {} vs {}",
            numerator.len(),
            denominator.len()
        )));
    }
    let ratios = numerator
        .iter()
        .zip(denominator)
        .map(|(a, b)| {
            if a.sample_id != b.sample_id {
                return Err(Error::invalid(format!(
                    "sample ids differ: {} vs {}",
                    a.sample_id, b.sample_id
                )));
            }
            let ratio = match (a.wsr, b.wsr) {
                (Some(x), Some(y)) if y > 0.0 => Some(x / y),
                (Some(x), Some(_)) if x == 0.0 => Some(1.0),
                _ => None,
            };
            Ok((a.sample_id, ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioReport { ratios })
}

fn opt_field<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Header `sample_id,method,wsr,active_pairs,runtime_ms`, plus `ra` when any
/// row carries a ratio. Missing values are written as `NA`.
pub fn write_metrics_csv(rows: &[MetricsRow], out: &mut impl Write) -> std::io::Result<()> {
    let with_ra = rows.iter().any(|r| r.ra.is_some());
    write!(out, "sample_id,method,wsr,active_pairs,runtime_ms")?;
    writeln!(out, "{}", if with_ra { ",ra" } else { "" })?;
    for r in rows {
        write!(
            out,
            "{},{},{},{},{}",
            r.sample_id,
            r.method,
            opt_field(r.wsr),
            opt_field(r.active_pairs),
            r.runtime_ms
        )?;
        if with_ra {
            write!(out, ",{}", r.ra.map_or_else(String::new, |x| x.to_string()))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_metrics_csv(rows, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Rows of the first method carry `ra` against the second; rows of the
/// second follow unchanged.
pub fn join_with_ratios(first: Vec<MetricsRow>, second: Vec<MetricsRow>) -> Result<(Vec<MetricsRow>, RatioReport)> {
    let report = compute_ratios(&first, &second)?;
    let mut rows: Vec<MetricsRow> = first
        .into_iter()
        .zip(&report.ratios)
        .map(|(row, (_, ra))| MetricsRow { ra: *ra, ..row })
        .collect();
    rows.extend(second);
    Ok((rows, report))
}
