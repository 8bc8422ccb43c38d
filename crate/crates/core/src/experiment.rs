//! Experiment configuration (TOML) and the end-to-end protocol run:
//! train at `train_res`, pick a test resolution on val, fine-tune there,
//! report on test_A and test_B.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_harness::{
    self, emit_frontier, emit_table, resolution_sweep, run_protocol, FrontierRecord, GapReport, GapRow,
    ProtocolEntry, SplitName, SplitProtocol, SweepCurve, TableRecord, Variant,
};
use crate::fixres::{self, FinetuneConfig, TrainConfig, TrainLog};
use crate::image_pipeline::{read_dataset, synth_dataset, DatasetSpec, TestPreproc};
use crate::model::{build_model, MicroNet, ModelConfig};
use crate::rng::splitmix64;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    File { path: PathBuf },
    Synthetic(DatasetSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(DatasetSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_a_size: usize,
    pub test_b_size: usize,
    pub seeds: Vec<u64>,
    /// Resolutions swept for selection; derived from `train_res` when absent.
    pub grid: Option<Vec<usize>>,
    pub select_on: SplitName,
    pub allow_test_a_selection: bool,
    /// When set, also compares selecting on val against selecting on
    /// test_A over this grid.
    pub peek_grid: Option<Vec<usize>>,
    /// Relative enlargement of object scales in test_B (synthetic data only).
    pub test_b_scale_shift: f64,
    pub crop_ratio: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train_size: 8000,
            val_size: 1000,
            test_a_size: 1000,
            test_b_size: 1000,
            seeds: vec![0, 1, 2],
            grid: None,
            select_on: SplitName::Val,
            allow_test_a_selection: false,
            peek_grid: None,
            test_b_scale_shift: 0.0,
            crop_ratio: TestPreproc::default().crop_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    /// `augment.out_size` is taken from `model.train_res`.
    pub train: TrainConfig,
    /// `augment.out_size` follows `target_res`, which protocol runs replace
    /// with the selected resolution.
    pub finetune: FinetuneConfig,
    pub protocol: ProtocolConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            protocol: ProtocolConfig::default(),
            output_dir: PathBuf::from("fixres-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.augment.out_size = cfg.model.train_res;
        cfg.finetune.augment.out_size = cfg.finetune.target_res;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Vec<usize> {
        self.protocol
            .grid
            .clone()
            .unwrap_or_else(|| fixres::default_grid(self.model.train_res))
    }

    pub fn preproc(&self) -> TestPreproc {
        TestPreproc {
            crop_ratio: self.protocol.crop_ratio,
            out_size: self.model.train_res,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.augment.out_size != self.model.train_res {
            return Err(Error::invalid("train.augment.out_size must equal model.train_res"));
        }
        let p = &self.protocol;
        if p.seeds.is_empty() {
            return Err(Error::invalid("protocol.seeds is empty"));
        }
        match p.select_on {
            SplitName::Val => {}
            SplitName::TestA if p.allow_test_a_selection => {}
            other => {
                return Err(Error::ProtocolViolation(format!(
                    "protocol.select_on = {other} is not an allowed selection split"
                )))
            }
        }
        for (name, n) in [
            ("train_size", p.train_size),
            ("val_size", p.val_size),
            ("test_a_size", p.test_a_size),
            ("test_b_size", p.test_b_size),
        ] {
            if n == 0 {
                return Err(Error::invalid(format!("protocol.{name} must be positive")));
            }
        }
        if !(p.test_b_scale_shift > -1.0 && p.test_b_scale_shift.is_finite()) {
            return Err(Error::invalid("protocol.test_b_scale_shift must be > -1"));
        }
        self.preproc().validate()?;
        let mut grids = vec![self.grid()];
        grids.extend(p.peek_grid.clone());
        for g in &grids {
            if g.is_empty() {
                return Err(Error::invalid("resolution grid is empty"));
            }
            for &r in g {
                self.model.check_resolution(r)?;
            }
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.num_classes != self.model.num_classes {
                return Err(Error::invalid(format!(
                    "dataset has {} classes, model expects {}",
                    spec.num_classes, self.model.num_classes
                )));
            }
            let needed = p.train_size + p.val_size + p.test_a_size;
            if spec.count() < needed {
                return Err(Error::invalid(format!(
                    "split sizes need {needed} samples, dataset spec provides {}",
                    spec.count()
                )));
            }
            let largest = grids.iter().flatten().copied().max().unwrap_or(0);
            spec.check_resolution_for(largest.max(self.model.train_res))?;
        }
        Ok(())
    }
}

fn derive_seed(base: u64, seed: u64, purpose: u64) -> u64 {
    splitmix64(base ^ splitmix64(seed) ^ splitmix64(purpose.wrapping_add(0x5eed)))
}

/// Builds the split protocol for one experiment seed.
pub fn build_protocol(cfg: &ExperimentConfig, seed: u64) -> Result<SplitProtocol> {
    let p = &cfg.protocol;
    let (pool, test_b, needed) = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => {
            let pool_spec = DatasetSpec {
                seed: derive_seed(spec.seed, seed, 0),
                ..spec.clone()
            };
            let (lo, hi) = spec.object_scale_range;
            let k = 1.0 + p.test_b_scale_shift;
            let b_spec = DatasetSpec {
                samples_per_class: p.test_b_size.div_ceil(spec.num_classes),
                object_scale_range: ((lo * k).min(1.0), (hi * k).min(1.0)),
                seed: derive_seed(spec.seed, seed, 1),
                ..spec.clone()
            };
            let test_b = synth_dataset(&b_spec)?;
            let test_b = test_b.subset(&(0..p.test_b_size).collect::<Vec<_>>())?;
            (synth_dataset(&pool_spec)?, Some(test_b), p.train_size + p.val_size + p.test_a_size)
        }
        DatasetSource::File { path } => (
            read_dataset(path)?,
            None,
            p.train_size + p.val_size + p.test_a_size + p.test_b_size,
        ),
    };
    if pool.len() < needed {
        return Err(Error::invalid(format!(
            "split sizes need {needed} samples, dataset has {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut crate::rng::stream(derive_seed(0, seed, 2), 0));
    let mut take = {
        let mut at = 0;
        move |n: usize| {
            let s = order[at..at + n].to_vec();
            at += n;
            s
        }
    };
    let train = take(p.train_size);
    let val = take(p.val_size);
    let test_a = take(p.test_a_size);
    let test_b = match test_b {
        Some(b) => b,
        None => pool.subset(&take(p.test_b_size))?,
    };
    SplitProtocol::new(&pool, train, val, test_a, test_b)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseSeconds {
    pub data: f64,
    pub train: f64,
    pub select: f64,
    pub finetune: f64,
    pub report: f64,
    pub peek: f64,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome<T> {
    pub seed: u64,
    pub params: usize,
    pub train_log: TrainLog,
    pub val_curve: SweepCurve,
    pub selected_res: usize,
    /// Rows: baseline at train_res, baseline at the selected resolution,
    /// fine-tuned model at the selected resolution, then the val-selected
    /// and test_A-selected rows when peeking is configured.
    pub report: GapReport,
    pub table: Vec<TableRecord>,
    pub baseline: MicroNet<T>,
    pub fixres: MicroNet<T>,
    pub seconds: PhaseSeconds,
}

impl<T> SeedOutcome<T> {
    fn row(&self, suffix: &str) -> Option<&GapRow> {
        self.report.rows.iter().find(|r| r.model.ends_with(suffix))
    }

    pub fn baseline_at_train(&self) -> &GapRow {
        self.row("/baseline@train").expect("row always present")
    }

    pub fn baseline_at_selected(&self) -> &GapRow {
        self.row("/baseline@selected").expect("row always present")
    }

    pub fn fixres_row(&self) -> &GapRow {
        self.row("/fixres").expect("row always present")
    }

    /// `(selected on val, selected on test_A)` when peeking was configured.
    pub fn peek_rows(&self) -> Option<(&GapRow, &GapRow)> {
        Some((self.row("/select-val")?, self.row("/select-test_a")?))
    }
}

fn phase<R>(slot: &mut f64, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let t = Instant::now();
    let out = f();
    *slot = t.elapsed().as_secs_f64();
    out
}

/// Runs the full pipeline for one seed.
pub fn run_seed<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome<T>> {
    cfg.validate()?;
    let mut secs = PhaseSeconds::default();
    let mut protocol = phase(&mut secs.data, || build_protocol(cfg, seed))?;
    let preproc = cfg.preproc();
    let train_res = cfg.model.train_res;

    let mut baseline: MicroNet<T> = build_model(&cfg.model, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let train_log = phase(&mut secs.train, || fixres::train(&mut baseline, protocol.train(), &train_cfg))?;

    let selection = protocol.selection_split(cfg.protocol.select_on)?;
    let val_curve = phase(&mut secs.select, || {
        resolution_sweep(&baseline, selection, &cfg.grid(), &preproc)
    })?;
    let selected_res = val_curve.argmax();
    info!("seed {seed}: selected test resolution {selected_res} on {}", cfg.protocol.select_on);

    let mut tuned = baseline.clone();
    let ft_cfg = FinetuneConfig {
        seed,
        ..cfg.finetune.clone().with_target_res(selected_res)
    };
    phase(&mut secs.finetune, || fixres::finetune_fixres(&mut tuned, protocol.train(), &ft_cfg))?;

    let name = |what: &str| format!("s{seed}/{what}");
    let mut rows = Vec::new();
    let mut table = Vec::new();
    phase(&mut secs.report, || {
        for (what, model, res) in [
            ("baseline@train", &baseline, train_res),
            ("baseline@selected", &baseline, selected_res),
            ("fixres", &tuned, selected_res),
        ] {
            let entry = ProtocolEntry {
                name: name(what),
                model,
                select_on: SplitName::Val,
            };
            rows.extend(run_protocol(&[entry], &protocol, &[res], &preproc)?.rows);
        }
        for (variant, model, res) in [(Variant::Baseline, &baseline, train_res), (Variant::Fixres, &tuned, selected_res)] {
            let m = eval_harness::evaluate(model, protocol.test_a(), res, &preproc)?;
            table.push(TableRecord {
                model: format!("micronet-s{seed}"),
                params: model.num_params(),
                train_res,
                test_res: res,
                top1: 100.0 * m.top1,
                top5: 100.0 * m.top5,
                variant,
            });
        }
        Ok(())
    })?;

    if let Some(peek_grid) = &cfg.protocol.peek_grid {
        phase(&mut secs.peek, || {
            protocol.set_allow_test_a_selection(true);
            let entries = [
                ProtocolEntry {
                    name: name("select-val"),
                    model: &baseline,
                    select_on: SplitName::Val,
                },
                ProtocolEntry {
                    name: name("select-test_a"),
                    model: &baseline,
                    select_on: SplitName::TestA,
                },
            ];
            let peek = run_protocol(&entries, &protocol, peek_grid, &preproc);
            protocol.set_allow_test_a_selection(cfg.protocol.allow_test_a_selection);
            rows.extend(peek?.rows);
            Ok(())
        })?;
    }

    Ok(SeedOutcome {
        seed,
        params: baseline.num_params(),
        train_log,
        val_curve,
        selected_res,
        report: GapReport { rows },
        table,
        baseline,
        fixres: tuned,
        seconds: secs,
    })
}

/// Runs every configured seed in order.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome<T>>> {
    cfg.validate()?;
    cfg.protocol.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

/// File names written by [`write_artifacts`].
pub const GAP_CSV: &str = "gap.csv";
pub const TABLE_MD: &str = "table.md";
pub const TABLE_CSV: &str = "table.csv";
pub const FRONTIER_CSV: &str = "frontier.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Writes the gap CSV, the results table (Markdown and CSV), the frontier
/// CSV and the val sweeps into `dir`.
pub fn write_artifacts<T>(outcomes: &[SeedOutcome<T>], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let gap = GapReport {
        rows: outcomes.iter().flat_map(|o| o.report.rows.clone()).collect(),
    };
    let mut gap_bytes = Vec::new();
    gap.write_csv(&mut gap_bytes)?;

    let records: Vec<TableRecord> = outcomes.iter().flat_map(|o| o.table.clone()).collect();
    let (md, table_csv) = emit_table(&records)?;

    let frontier: Vec<FrontierRecord> = records
        .iter()
        .map(|r| FrontierRecord {
            name: format!("{}-{}", r.model, format!("{:?}", r.variant).to_lowercase()),
            params: r.params,
            top1: r.top1 / 100.0,
        })
        .collect();

    let mut sweep = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        o.val_curve.write_csv(&format!("s{}/baseline", o.seed), &mut sweep, i == 0)?;
    }
    Ok(vec![
        write(GAP_CSV, &gap_bytes)?,
        write(TABLE_MD, md.as_bytes())?,
        write(TABLE_CSV, table_csv.as_bytes())?,
        write(FRONTIER_CSV, emit_frontier(&frontier)?.as_bytes())?,
        write(SWEEP_CSV, &sweep)?,
    ])
}
