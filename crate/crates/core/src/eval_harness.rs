//! Single-crop evaluation, resolution sweeps, the split protocol with its
//! test_B guard, and CSV / Markdown report emitters.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixres::choose_resolution;
use crate::image_pipeline::{center_crop_preproc, LabeledDataset, TestPreproc};
use crate::model::{batch_from_images, MicroNet};
use crate::scalar::Scalar;
use crate::tensor_core::Tensor;

const EVAL_BATCH: usize = 100;

/// Worker threads for evaluation, from `FIXRES_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("FIXRES_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
    pub top1_hits: usize,
    pub top5_hits: usize,
}

impl Metrics {
    pub fn from_counts(top1_hits: usize, top5_hits: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyBatch { op: "metrics" });
        }
        if top1_hits > top5_hits || top5_hits > n {
            return Err(Error::invalid(format!(
                "inconsistent hit counts: top1 {top1_hits}, top5 {top5_hits}, n {n}"
            )));
        }
        Ok(Self {
            top1: top1_hits as f64 / n as f64,
            top5: top5_hits as f64 / n as f64,
            n,
            top1_hits,
            top5_hits,
        })
    }
}

/// Rank of `label` in `row`: how many classes beat it. Equal logits are
/// ordered by class index, lower first.
pub fn label_rank<T: PartialOrd>(row: &[T], label: usize) -> usize {
    let target = &row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, v)| v > target || (v == target && j < label))
        .count()
}

/// Top-1 and top-5 hits of an `N x K` logit matrix.
pub fn score_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Metrics> {
    let &[n, k] = logits.shape() else {
        return Err(Error::ShapeMismatch {
            op: "score_logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len(), 0],
        });
    };
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "score_logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len(), k],
        });
    }
    let (mut h1, mut h5) = (0, 0);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
        }
        let rank = label_rank(row, label);
        h1 += (rank < 1) as usize;
        h5 += (rank < 5) as usize;
    }
    Metrics::from_counts(h1, h5, n)
}

fn eval_chunk<T: Scalar>(
    model: &MicroNet<T>,
    split: &LabeledDataset,
    indices: &[usize],
    preproc: &TestPreproc,
) -> Result<(usize, usize)> {
    let mut crops = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let (im, label) = split.get(i);
        crops.push(center_crop_preproc(im, preproc)?);
        labels.push(label);
    }
    let logits = model.predict(batch_from_images(&crops)?)?;
    let m = score_logits(&logits, &labels)?;
    Ok((m.top1_hits, m.top5_hits))
}

/// Single center crop per image at `test_res` (the crop ratio comes from
/// `preproc`), eval-mode forward, top-1/top-5.
pub fn evaluate<T: Scalar>(
    model: &MicroNet<T>,
    split: &LabeledDataset,
    test_res: usize,
    preproc: &TestPreproc,
) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::EmptyBatch { op: "evaluate" });
    }
    model.config().check_resolution(test_res)?;
    let preproc = TestPreproc {
        out_size: test_res,
        ..*preproc
    };
    preproc.validate()?;
    let indices: Vec<usize> = (0..split.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let threads = worker_threads().min(chunks.len());
    let counts: Vec<Result<(usize, usize)>> = if threads <= 1 {
        chunks.iter().map(|c| eval_chunk(model, split, c, &preproc)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let chunks = &chunks;
                    let preproc = &preproc;
                    s.spawn(move || {
                        chunks
                            .iter()
                            .skip(t)
                            .step_by(threads)
                            .map(|c| eval_chunk(model, split, c, preproc))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let (mut h1, mut h5) = (0, 0);
    for c in counts {
        let (a, b) = c?;
        h1 += a;
        h5 += b;
    }
    Metrics::from_counts(h1, h5, split.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    points: Vec<(usize, Metrics)>,
}

impl SweepCurve {
    pub fn new(points: Vec<(usize, Metrics)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("sweep curve needs at least one point"));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("sweep resolutions must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, Metrics)] {
        &self.points
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn at(&self, res: usize) -> Option<&Metrics> {
        self.points.iter().find(|p| p.0 == res).map(|p| &p.1)
    }

    /// Resolution with the best top-1, smaller on ties.
    pub fn argmax(&self) -> usize {
        choose_resolution(&self.points).expect("curve is non-empty")
    }

    /// `model,test_res,top1,top5,n` rows, without header when `header` is false.
    pub fn write_csv<W: Write>(&self, model: &str, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(["model", "test_res", "top1", "top5", "n"])?;
        }
        for (res, m) in &self.points {
            w.write_record([
                model.to_owned(),
                res.to_string(),
                format!("{:.4}", m.top1),
                format!("{:.4}", m.top5),
                m.n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Evaluates at each grid point; the grid must be strictly increasing.
pub fn resolution_sweep<T: Scalar>(
    model: &MicroNet<T>,
    split: &LabeledDataset,
    grid: &[usize],
    preproc: &TestPreproc,
) -> Result<SweepCurve> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("resolution grid must be strictly increasing, got {grid:?}")));
    }
    for &r in grid {
        model.config().check_resolution(r)?;
    }
    let points = grid
        .iter()
        .map(|&r| Ok((r, evaluate(model, split, r, preproc)?)))
        .collect::<Result<Vec<_>>>()?;
    SweepCurve::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    TestA,
    TestB,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::TestA => "test_a",
            SplitName::TestB => "test_b",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test_a" => Ok(SplitName::TestA),
            "test_b" => Ok(SplitName::TestB),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (expected train, val, test_a or test_b)"
            ))),
        }
    }
}

/// Train / val / test_A carved from one pool by disjoint index sets, plus
/// an independently generated test_B. test_B can be read once per model
/// name; a second read is a protocol violation.
#[derive(Debug)]
pub struct SplitProtocol {
    train: LabeledDataset,
    val: LabeledDataset,
    test_a: LabeledDataset,
    test_b: LabeledDataset,
    indices: [Vec<usize>; 3],
    allow_test_a_selection: bool,
    test_b_reads: Mutex<HashMap<String, usize>>,
}

impl SplitProtocol {
    /// Partitions `pool` by the given index sets, which must be pairwise
    /// disjoint and in range.
    pub fn new(
        pool: &LabeledDataset,
        train: Vec<usize>,
        val: Vec<usize>,
        test_a: Vec<usize>,
        test_b: LabeledDataset,
    ) -> Result<Self> {
        let mut seen = vec![false; pool.len()];
        for (name, set) in [("train", &train), ("val", &val), ("test_a", &test_a)] {
            if set.is_empty() {
                return Err(Error::invalid(format!("split {name} is empty")));
            }
            for &i in set {
                if i >= pool.len() {
                    return Err(Error::invalid(format!("split {name} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::ProtocolViolation(format!(
                        "sample {i} appears in more than one split (found again in {name})"
                    )));
                }
            }
        }
        if test_b.is_empty() {
            return Err(Error::invalid("split test_b is empty"));
        }
        if (test_b.height(), test_b.width(), test_b.channels(), test_b.num_classes())
            != (pool.height(), pool.width(), pool.channels(), pool.num_classes())
        {
            return Err(Error::invalid("test_b geometry or classes differ from the pool"));
        }
        Ok(Self {
            train: pool.subset(&train)?,
            val: pool.subset(&val)?,
            test_a: pool.subset(&test_a)?,
            test_b,
            indices: [train, val, test_a],
            allow_test_a_selection: false,
            test_b_reads: Mutex::new(HashMap::new()),
        })
    }

    /// Permits resolution selection on test_A. This is the deliberate
    /// misuse that the overfitting-gap experiment measures.
    pub fn set_allow_test_a_selection(&mut self, allow: bool) {
        self.allow_test_a_selection = allow;
    }

    pub fn pool_indices(&self, name: SplitName) -> Option<&[usize]> {
        match name {
            SplitName::Train => Some(&self.indices[0]),
            SplitName::Val => Some(&self.indices[1]),
            SplitName::TestA => Some(&self.indices[2]),
            SplitName::TestB => None,
        }
    }

    pub fn train(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn val(&self) -> &LabeledDataset {
        &self.val
    }

    pub fn test_a(&self) -> &LabeledDataset {
        &self.test_a
    }

    /// A split usable for choosing the test resolution.
    pub fn selection_split(&self, name: SplitName) -> Result<&LabeledDataset> {
        match name {
            SplitName::Val => Ok(&self.val),
            SplitName::TestA if self.allow_test_a_selection => Ok(&self.test_a),
            SplitName::TestA => Err(Error::ProtocolViolation(
                "selecting on test_a requires explicitly allowing it".into(),
            )),
            SplitName::TestB => Err(Error::ProtocolViolation(
                "test_b is the reporting split and cannot be used for selection".into(),
            )),
            SplitName::Train => Err(Error::ProtocolViolation(
                "selection on the training split is not allowed".into(),
            )),
        }
    }

    /// Hands out test_B for `model`; fails on the second request.
    pub fn read_test_b(&self, model: &str) -> Result<&LabeledDataset> {
        let mut reads = self.test_b_reads.lock().expect("test_b counter poisoned");
        let count = reads.entry(model.to_owned()).or_insert(0);
        *count += 1;
        if *count > 1 {
            return Err(Error::ProtocolViolation(format!(
                "test_b read {} times for model `{model}`",
                *count
            )));
        }
        Ok(&self.test_b)
    }

    pub fn test_b_reads(&self, model: &str) -> usize {
        self.test_b_reads
            .lock()
            .expect("test_b counter poisoned")
            .get(model)
            .copied()
            .unwrap_or(0)
    }
}

pub struct ProtocolEntry<'a, T> {
    pub name: String,
    pub model: &'a MicroNet<T>,
    pub select_on: SplitName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub model: String,
    pub params: usize,
    pub test_res: usize,
    #[serde(rename = "top1_A")]
    pub top1_a: f64,
    #[serde(rename = "top1_B")]
    pub top1_b: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
}

impl GapReport {
    /// `(top1_A, top1_B)` points.
    pub fn scatter(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.top1_a, r.top1_b)).collect()
    }

    /// `model,params,top1_A,top1_B,gap`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "params", "top1_A", "top1_B", "gap"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.params.to_string(),
                format!("{:.4}", r.top1_a),
                format!("{:.4}", r.top1_b),
                format!("{:.4}", r.gap),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// For each model: pick the resolution on its selection split, then report
/// test_A and test_B at that one resolution.
pub fn run_protocol<T: Scalar>(
    entries: &[ProtocolEntry<'_, T>],
    protocol: &SplitProtocol,
    grid: &[usize],
    preproc: &TestPreproc,
) -> Result<GapReport> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let selection = protocol.selection_split(e.select_on)?;
        let curve = resolution_sweep(e.model, selection, grid, preproc)?;
        let res = curve.argmax();
        let top1_a = match e.select_on {
            SplitName::TestA => curve.at(res).expect("argmax is on the curve").top1,
            _ => evaluate(e.model, protocol.test_a(), res, preproc)?.top1,
        };
        let top1_b = evaluate(e.model, protocol.read_test_b(&e.name)?, res, preproc)?.top1;
        rows.push(GapRow {
            model: e.name.clone(),
            params: e.model.num_params(),
            test_res: res,
            top1_a,
            top1_b,
            gap: top1_a - top1_b,
        });
    }
    Ok(GapReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Fixres,
}

/// One results-table row; accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub model: String,
    pub params: usize,
    pub train_res: usize,
    pub test_res: usize,
    pub top1: f64,
    pub top5: f64,
    pub variant: Variant,
}

/// One decimal, halves rounded away from zero.
pub fn format_percent(v: f64) -> String {
    format!("{:.1}", (v * 10.0).round() / 10.0)
}

/// Compact parameter count: `5.3M`, `12M`, `31K`.
pub fn format_params(n: usize) -> String {
    let (value, suffix) = match n {
        n if n >= 1_000_000 => (n as f64 / 1e6, "M"),
        n if n >= 1_000 => (n as f64 / 1e3, "K"),
        n => return n.to_string(),
    };
    if value < 10.0 {
        let s = format_percent(value);
        format!("{}{suffix}", s.strip_suffix(".0").unwrap_or(&s))
    } else {
        format!("{}{suffix}", value.round())
    }
}

/// Markdown table and CSV for the given rows.
pub fn emit_table(records: &[TableRecord]) -> Result<(String, String)> {
    let mut md = String::from(
        "| Model | #params | train res | test res | Top-1 (%) | Top-5 (%) | Variant |\n\
         |---|---:|---:|---:|---:|---:|---|\n",
    );
    for r in records {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.model,
            format_params(r.params),
            r.train_res,
            r.test_res,
            format_percent(r.top1),
            format_percent(r.top5),
            match r.variant {
                Variant::Baseline => "baseline",
                Variant::Fixres => "fixres",
            }
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "params", "train_res", "test_res", "top1", "top5", "variant"])?;
    for r in records {
        w.write_record([
            r.model.clone(),
            r.params.to_string(),
            r.train_res.to_string(),
            r.test_res.to_string(),
            format_percent(r.top1),
            format_percent(r.top5),
            format!("{:?}", r.variant).to_lowercase(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok((md, String::from_utf8(bytes).expect("csv output is utf-8")))
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRecord {
    pub name: String,
    pub params: usize,
    pub top1: f64,
}

/// `name,params,top1` rows sorted by parameter count, then name.
pub fn emit_frontier(records: &[FrontierRecord]) -> Result<String> {
    let mut rows: Vec<&FrontierRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.params.cmp(&b.params).then_with(|| a.name.cmp(&b.name)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "params", "top1"])?;
    for r in rows {
        w.write_record([r.name.clone(), r.params.to_string(), format!("{:.4}", r.top1)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_pipeline::{synth_dataset, DatasetSpec};
    use crate::model::{build_model, ModelConfig};

    fn sort_oracle(row: &[f64], label: usize, k: usize) -> bool {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        idx[..k.min(row.len())].contains(&label)
    }

    #[test]
    fn hand_built_logits() {
        #[rustfmt::skip]
        let rows = vec![
            5.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            3.0, 3.0, 1.0, 2.0, 0.5, 0.1,
        ];
        let labels = [0, 0, 5, 1];
        let t = Tensor::new(vec![4, 6], rows.clone()).unwrap();
        let m = score_logits(&t, &labels).unwrap();
        let mut h1 = 0;
        let mut h5 = 0;
        for (row, &l) in rows.chunks(6).zip(&labels) {
            h1 += sort_oracle(row, l, 1) as usize;
            h5 += sort_oracle(row, l, 5) as usize;
        }
        assert_eq!((m.top1_hits, m.top5_hits), (h1, h5));
        assert_eq!((m.top1_hits, m.top5_hits), (1, 2));
    }

    #[test]
    fn five_classes_top5_is_one() {
        let t = Tensor::new(vec![2, 5], vec![0.0, 1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(score_logits(&t, &[0, 4]).unwrap().top5, 1.0);
    }

    #[test]
    fn one_hot_truth_scores_perfectly() {
        let labels = [2usize, 0, 1, 2];
        let mut data = vec![0.0f32; 12];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 3 + l] = 1.0;
        }
        let m = score_logits(&Tensor::new(vec![4, 3], data).unwrap(), &labels).unwrap();
        assert_eq!((m.top1, m.top5), (1.0, 1.0));
    }

    fn tiny() -> (MicroNet<f32>, LabeledDataset) {
        let cfg = ModelConfig {
            base_channels: 2,
            num_stages: 2,
            num_classes: 3,
            train_res: 16,
            ..ModelConfig::default()
        };
        let ds = synth_dataset(&DatasetSpec {
            num_classes: 3,
            samples_per_class: 40,
            base_resolution: 32,
            ..DatasetSpec::default()
        })
        .unwrap();
        (build_model(&cfg, 0).unwrap(), ds)
    }

    #[test]
    fn single_point_sweep_equals_evaluate() {
        let (m, ds) = tiny();
        let pre = TestPreproc::default();
        let curve = resolution_sweep(&m, &ds, &[16], &pre).unwrap();
        assert_eq!(curve.points(), &[(16, evaluate(&m, &ds, 16, &pre).unwrap())]);
        assert!(resolution_sweep(&m, &ds, &[24, 16], &pre).is_err());
        assert!(matches!(
            evaluate(&m, &ds, 4, &pre),
            Err(Error::UnsupportedResolution { .. })
        ));
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let (m, ds) = tiny();
        let pre = TestPreproc::default();
        let serial = evaluate(&m, &ds, 24, &pre).unwrap();
        let chunks: Vec<usize> = (0..ds.len()).collect();
        let (mut h1, mut h5) = (0, 0);
        for c in chunks.chunks(7) {
            let (a, b) = eval_chunk(&m, &ds, c, &TestPreproc { out_size: 24, ..pre }).unwrap();
            h1 += a;
            h5 += b;
        }
        assert_eq!((serial.top1_hits, serial.top5_hits), (h1, h5));
    }

    fn protocol(ds: &LabeledDataset) -> SplitProtocol {
        let b = ds.subset(&(90..120).collect::<Vec<_>>()).unwrap();
        SplitProtocol::new(
            ds,
            (0..60).collect(),
            (60..75).collect(),
            (75..90).collect(),
            b,
        )
        .unwrap()
    }

    #[test]
    fn protocol_guards() {
        let (m, ds) = tiny();
        assert!(matches!(
            SplitProtocol::new(&ds, vec![0, 1], vec![1], vec![2], ds.clone()),
            Err(Error::ProtocolViolation(_))
        ));
        let p = protocol(&ds);
        let entry = |name: &str, select_on| ProtocolEntry {
            name: name.into(),
            model: &m,
            select_on,
        };
        let pre = TestPreproc::default();
        let err = run_protocol(&[entry("m", SplitName::TestB)], &p, &[16], &pre).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
        assert!(run_protocol(&[entry("m", SplitName::TestA)], &p, &[16], &pre).is_err());
        let report = run_protocol(&[entry("a", SplitName::Val), entry("b", SplitName::Val)], &p, &[16, 24], &pre).unwrap();
        assert_eq!(report.rows[0].top1_a, report.rows[1].top1_a);
        assert_eq!(report.rows[0].gap - report.rows[1].gap, 0.0);
        assert_eq!(p.test_b_reads("a"), 1);
        let again = run_protocol(&[entry("a", SplitName::Val)], &p, &[16], &pre).unwrap_err();
        assert!(matches!(again, Error::ProtocolViolation(_)));
        let r = &report.rows[0];
        assert_eq!(r.gap, r.top1_a - r.top1_b);
    }

    #[test]
    fn table_row_layout() {
        let rec = TableRecord {
            model: "B0".into(),
            params: 5_300_000,
            train_res: 224,
            test_res: 320,
            top1: 80.2,
            top5: 95.4,
            variant: Variant::Fixres,
        };
        let (md, csv) = emit_table(std::slice::from_ref(&rec)).unwrap();
        assert!(md.lines().nth(2).unwrap().starts_with("| B0 | 5.3M | 224 | 320 | 80.2 | 95.4 |"));
        assert_eq!(parse_table_csv(&csv).unwrap(), vec![rec]);
        let (md, csv) = emit_table(&[]).unwrap();
        assert_eq!(md.lines().count(), 2);
        assert_eq!(csv.trim(), "model,params,train_res,test_res,top1,top5,variant");
    }

    #[test]
    fn number_formats() {
        assert_eq!(format_params(12_000_000), "12M");
        assert_eq!(format_params(7_800_000), "7.8M");
        assert_eq!(format_params(31_234), "31K");
        assert_eq!(format_params(512), "512");
        assert_eq!(format_percent(0.25), "0.3");
        assert_eq!(format_percent(-0.25), "-0.3");
        assert_eq!(format_percent(79.34), "79.3");
    }

    #[test]
    fn frontier_sorted_by_params_then_name() {
        let r = |name: &str, params, top1| FrontierRecord {
            name: name.into(),
            params,
            top1,
        };
        let out = emit_frontier(&[r("c", 30, 0.7), r("b", 10, 0.6), r("a", 30, 0.8)]).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "name,params,top1");
        assert_eq!(&lines[1..], &["b,10,0.6000", "a,30,0.8000", "c,30,0.7000"]);
    }
}
