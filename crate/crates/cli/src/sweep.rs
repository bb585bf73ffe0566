//! Single runs and (method, alpha, seed) sweeps. The coordinator owns the
//! CSV writer; workers send finished rows over a channel, so rows land in
//! completion order and a failed run never aborts the sweep.

use crate::config::{DatasetConfig, RunConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparsemdl_core::data::{
    gen_teacher_student, load_csv_regression, load_mnist_idx, split, split_equal_train_test,
    LabeledDataset, Targets,
};
use sparsemdl_core::loss::{
    compression_rate, data_nll_bits, error_increase, model_byte_size, DataView, LossKind,
};
use sparsemdl_core::model::{MaskedModel, MlpSpec};
use sparsemdl_core::pruning::{PruneOutcome, TamadeMode};
use sparsemdl_core::regularizer::Method;
use sparsemdl_core::training::{bare_loss, train_pmmp, train_three_phase, LossTrace, TrainSet};
use std::io::Write;
use std::sync::mpsc;
use std::time::Instant;

/// One line of the sweep CSV. Field order is the schema; a golden-header
/// test guards it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub dataset_size: usize,
    pub sigma: f64,
    pub loss_kind: String,
    pub epochs_run: usize,
    pub converged_epoch: Option<usize>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub nnz: usize,
    pub model_bytes: u64,
    pub data_nll_bits: f64,
    pub description_length_bytes: f64,
    pub ei: f64,
    pub cr: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
    pub error: String,
}

pub const CSV_HEADER: &str = "method,alpha,seed,dataset_size,sigma,loss_kind,epochs_run,converged_epoch,train_loss,val_loss,test_loss,test_accuracy,nnz,model_bytes,data_nll_bits,description_length_bytes,ei,cr,wall_time_s,config_hash,error";

impl SweepRow {
    /// NaN-sentinel row for a failed run; binning skips non-finite metrics.
    pub fn failure(cfg: &RunConfig, err: String) -> Self {
        SweepRow {
            method: method_name(cfg.regularizer.method).into(),
            alpha: cfg.regularizer.alpha,
            seed: cfg.plan.seed,
            dataset_size: 0,
            sigma: cfg.dataset.sigma(),
            loss_kind: loss_name(cfg.loss_kind).into(),
            epochs_run: 0,
            converged_epoch: None,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            test_loss: f64::NAN,
            test_accuracy: f64::NAN,
            nnz: 0,
            model_bytes: 0,
            data_nll_bits: f64::NAN,
            description_length_bytes: f64::NAN,
            ei: f64::NAN,
            cr: f64::NAN,
            wall_time_s: 0.0,
            config_hash: cfg.hash(),
            error: err,
        }
    }

    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Pmmp => "pmmp",
        Method::Drr => "drr",
        Method::Rl1 => "rl1",
        Method::None => "none",
    }
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "pmmp" => Ok(Method::Pmmp),
        "drr" => Ok(Method::Drr),
        "rl1" => Ok(Method::Rl1),
        "none" => Ok(Method::None),
        other => Err(format!("unknown method '{other}' (expected pmmp|drr|rl1|none)")),
    }
}

pub fn loss_name(k: LossKind) -> &'static str {
    match k {
        LossKind::Mse => "mse",
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::Gauss => "gauss",
    }
}

/// Dataset realized into train/val/test tensors.
pub struct BuiltData {
    pub train: TrainSet,
    pub val: TrainSet,
    pub test: TrainSet,
}

fn to_train_set(ds: &LabeledDataset, idx: &[usize]) -> TrainSet {
    match &ds.targets {
        Targets::Regression(_) => {
            let (x, y) = ds.regression_split(idx);
            TrainSet { x, targets: Targets::Regression(y) }
        }
        Targets::Classes(_) => {
            let (x, labels) = ds.classification_split(idx);
            TrainSet { x, targets: Targets::Classes(labels) }
        }
    }
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<BuiltData, String> {
    let mut ds = match cfg {
        DatasetConfig::Teacher { dims, sigma, n, seed, input_low, input_high, .. } => {
            let (_, ds) = gen_teacher_student(dims, *sigma, *n, *seed, (*input_low, *input_high))
                .map_err(|e| e.to_string())?;
            ds
        }
        DatasetConfig::MnistIdx { images, labels, .. } => {
            load_mnist_idx(images, labels).map_err(|e| e.to_string())?
        }
        DatasetConfig::CsvFile { path, d_in, d_out, .. } => {
            let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
            load_csv_regression(file, *d_in, *d_out).map_err(|e| e.to_string())?
        }
    };
    match cfg {
        DatasetConfig::Teacher { equal_train_test: Some(k), seed, .. } => {
            split_equal_train_test(&mut ds, *k, seed.wrapping_add(1)).map_err(|e| e.to_string())?;
        }
        DatasetConfig::Teacher { fractions: Some(f), seed, .. }
        | DatasetConfig::MnistIdx { fractions: f, seed, .. }
        | DatasetConfig::CsvFile { fractions: f, seed, .. } => {
            split(&mut ds, *f, seed.wrapping_add(1)).map_err(|e| e.to_string())?;
        }
        _ => return Err("dataset config has no split directive".into()),
    }
    for (name, idx) in
        [("train", &ds.splits.train), ("val", &ds.splits.val), ("test", &ds.splits.test)]
    {
        if idx.is_empty() {
            return Err(format!("{name} split is empty"));
        }
    }
    Ok(BuiltData {
        train: to_train_set(&ds, &ds.splits.train),
        val: to_train_set(&ds, &ds.splits.val),
        test: to_train_set(&ds, &ds.splits.test),
    })
}

pub struct RunResult {
    pub row: SweepRow,
    pub model: MaskedModel,
    pub trace: LossTrace,
    pub outcome: PruneOutcome,
}

/// Executes one config end-to-end and assembles the metrics row.
pub fn run(cfg: &RunConfig) -> Result<RunResult, String> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(errs.join("; "));
    }
    let start = Instant::now();
    let data = build_dataset(&cfg.dataset)?;
    let spec = MlpSpec::new(cfg.model_dims.clone(), cfg.activation, cfg.output_head)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.plan.seed);
    let model = MaskedModel::init(spec, &mut rng, cfg.plan.seed);

    let trained = match cfg.regularizer.method {
        Method::Pmmp => {
            train_pmmp(model, &data.train, &data.val, cfg.loss_kind, &cfg.regularizer, &cfg.plan)
        }
        _ => train_three_phase(
            model,
            &data.train,
            &data.val,
            cfg.loss_kind,
            &cfg.regularizer,
            &cfg.plan,
        ),
    };
    let (model, trace, outcome) = trained.map_err(|e| e.to_string())?;

    let train_loss = bare_loss(&model, &data.train, cfg.loss_kind).map_err(|e| e.to_string())?;
    let val_loss = bare_loss(&model, &data.val, cfg.loss_kind).map_err(|e| e.to_string())?;
    let test_loss = bare_loss(&model, &data.test, cfg.loss_kind).map_err(|e| e.to_string())?;

    // Description length is accounted over train+test, matching how the
    // result tables report it.
    let (nll, test_accuracy, ei) = match (&data.train.targets, &data.test.targets) {
        (Targets::Regression(ytr), Targets::Regression(yte)) => {
            let x = vstack(&data.train.x, &data.test.x);
            let y = vstack(ytr, yte);
            let nll = data_nll_bits(&model, &DataView::Regression { x: &x, y: &y }, cfg.loss_kind)
                .map_err(|e| e.to_string())?;
            (nll, f64::NAN, f64::NAN)
        }
        (Targets::Classes(ltr), Targets::Classes(lte)) => {
            let x = vstack(&data.train.x, &data.test.x);
            let mut labels = ltr.clone();
            labels.extend_from_slice(lte);
            let nll = data_nll_bits(
                &model,
                &DataView::Classification { x: &x, labels: &labels },
                cfg.loss_kind,
            )
            .map_err(|e| e.to_string())?;
            let acc = model.accuracy(&data.test.x, lte).map_err(|e| e.to_string())?;
            let ei = match cfg.plan.tamade.mode {
                TamadeMode::AccAbsolute => error_increase(outcome.pre_metric, outcome.post_metric),
                TamadeMode::LossRelative => f64::NAN,
            };
            (nll, acc, ei)
        }
        _ => return Err("train and test targets disagree in kind".into()),
    };

    let model_bytes = model_byte_size(&model, cfg.byte_scheme);
    let nnz = model.nonzero_count();
    let row = SweepRow {
        method: method_name(cfg.regularizer.method).into(),
        alpha: cfg.regularizer.alpha,
        seed: cfg.plan.seed,
        dataset_size: data.train.len(),
        sigma: cfg.dataset.sigma(),
        loss_kind: loss_name(cfg.loss_kind).into(),
        epochs_run: trace.epochs.len(),
        converged_epoch: trace.converged_at,
        train_loss,
        val_loss,
        test_loss,
        test_accuracy,
        nnz,
        model_bytes,
        data_nll_bits: nll,
        description_length_bytes: (model_bytes as f64 + nll / 8.0).ceil(),
        ei,
        cr: compression_rate(model.param_count(), nnz),
        wall_time_s: start.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
        error: String::new(),
    };
    Ok(RunResult { row, model, trace, outcome })
}

fn vstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.dim().0 + b.dim().0, a.dim().1));
    out.slice_mut(ndarray::s![..a.dim().0, ..]).assign(a);
    out.slice_mut(ndarray::s![a.dim().0.., ..]).assign(b);
    out
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub parallelism: usize,
}

/// All (method, alpha, seed) configs of a sweep. The seed reseeds both
/// the dataset and the training plan, so different seeds see different
/// data realizations as well as different initializations.
pub fn sweep_jobs(template: &RunConfig, spec: &SweepSpec) -> Vec<RunConfig> {
    let mut jobs = Vec::new();
    for &method in &spec.methods {
        for &alpha in &spec.alphas {
            for &seed in &spec.seeds {
                let mut cfg = template.clone();
                cfg.regularizer.method = method;
                cfg.regularizer.alpha = alpha;
                for phase in &mut cfg.plan.phases {
                    if phase.kind == sparsemdl_core::training::PhaseKind::Regularized {
                        phase.alpha = alpha;
                    }
                }
                cfg.plan.seed = seed;
                cfg.dataset.set_seed(seed);
                jobs.push(cfg);
            }
        }
    }
    jobs
}

/// Runs every job on at most `parallelism` workers, writing rows in
/// completion order and ending with the manifest comment. Returns the
/// completed rows and the number of failures.
pub fn sweep<W: Write>(
    template: &RunConfig,
    spec: &SweepSpec,
    out: &mut W,
) -> std::io::Result<(Vec<SweepRow>, usize)> {
    assert!(spec.parallelism >= 1);
    let jobs = sweep_jobs(template, spec);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .expect("thread pool");

    let mut rows = Vec::with_capacity(jobs.len());
    let (tx, rx) = mpsc::channel::<SweepRow>();
    for job in jobs {
        let tx = tx.clone();
        pool.spawn(move || {
            let row = match run(&job) {
                Ok(result) => result.row,
                Err(e) => SweepRow::failure(&job, e),
            };
            let _ = tx.send(row);
        });
    }
    drop(tx);
    // Coordinator: single owner of the writer, rows in completion order.
    {
        let mut writer = csv::Writer::from_writer(&mut *out);
        for row in rx {
            if writer.serialize(&row).is_ok() {
                let _ = writer.flush();
            }
            rows.push(row);
        }
    }
    writeln!(out, "# config_hash={}", template.hash())?;
    let failures = rows.iter().filter(|r| r.failed()).count();
    Ok((rows, failures))
}

/// Reads a sweep CSV (ignoring the trailing manifest comment) back into rows.
pub fn read_rows<R: std::io::Read>(reader: R) -> Result<Vec<SweepRow>, String> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    rdr.deserialize().collect::<Result<Vec<SweepRow>, _>>().map_err(|e| e.to_string())
}

/// Per-epoch loss trace as CSV (epoch, train_loss, val_loss).
pub fn write_trace<W: Write>(trace: &LossTrace, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss")?;
    for i in 0..trace.epochs.len() {
        writeln!(out, "{},{},{}", trace.epochs[i], trace.train_loss[i], trace.val_loss[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;
    use sparsemdl_core::loss::ByteScheme;
    use sparsemdl_core::model::{Activation, OutputHead};
    use sparsemdl_core::regularizer::RegularizerSpec;
    use sparsemdl_core::training::TrainPlan;

    fn small_config() -> RunConfig {
        // Enough epochs that the student actually fits the teacher;
        // TAMADE on an untrained model would prune everything for free.
        let mut plan = TrainPlan::standard(0.0, 400, 0, 100, 5);
        plan.rgp_trials = 2;
        RunConfig {
            dataset: DatasetConfig::Teacher {
                dims: vec![2, 3, 1],
                sigma: 0.05,
                n: 90,
                seed: 5,
                input_low: -1.0,
                input_high: 1.0,
                equal_train_test: Some(30),
                fractions: None,
            },
            model_dims: vec![2, 6, 1],
            activation: Activation::Tanh,
            output_head: OutputHead::Linear,
            loss_kind: LossKind::Mse,
            regularizer: RegularizerSpec::none(),
            plan,
            byte_scheme: ByteScheme::Min,
        }
    }

    #[test]
    fn golden_csv_header() {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.serialize(SweepRow::failure(&small_config(), "x".into())).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn equal_train_test_split_sizes() {
        let data = build_dataset(&small_config().dataset).unwrap();
        assert_eq!(data.train.len(), 30);
        assert_eq!(data.test.len(), 30);
        assert_eq!(data.val.len(), 30);
    }

    #[test]
    fn identical_configs_give_identical_rows_except_wall_time() {
        let cfg = small_config();
        let a = run(&cfg).unwrap().row;
        let b = run(&cfg).unwrap().row;
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.val_loss, b.val_loss);
        assert_eq!(a.test_loss, b.test_loss);
        assert_eq!(a.nnz, b.nnz);
        assert_eq!(a.model_bytes, b.model_bytes);
        assert_eq!(a.data_nll_bits, b.data_nll_bits);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn none_method_keeps_compression_near_one() {
        let cfg = small_config();
        let row = run(&cfg).unwrap().row;
        assert!(row.error.is_empty());
        // Only RGP/TAMADE-at-no-cost pruning; the model stays near-dense.
        assert!(row.cr < 2.0, "cr = {}", row.cr);
    }

    #[test]
    fn sweep_cardinality_rows_and_manifest() {
        let cfg = small_config();
        let spec = SweepSpec {
            methods: vec![Method::Rl1],
            alphas: vec![1e-4, 1e-3, 1e-2],
            seeds: vec![5, 6],
            parallelism: 2,
        };
        let mut buf = Vec::new();
        let (rows, failures) = sweep(&cfg, &spec, &mut buf).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(failures, 0);
        let text = String::from_utf8(buf).unwrap();
        let last = text.lines().last().unwrap();
        assert_eq!(last, format!("# config_hash={}", cfg.hash()));
        let parsed = read_rows(text.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 6);
    }

    #[test]
    fn failed_runs_become_nan_rows_not_errors() {
        let mut cfg = small_config();
        // Teacher dims of length 1 fail validation inside the worker.
        cfg.dataset = DatasetConfig::Teacher {
            dims: vec![2],
            sigma: 0.05,
            n: 90,
            seed: 5,
            input_low: -1.0,
            input_high: 1.0,
            equal_train_test: Some(30),
            fractions: None,
        };
        let spec = SweepSpec {
            methods: vec![Method::None],
            alphas: vec![0.0],
            seeds: vec![5],
            parallelism: 1,
        };
        let mut buf = Vec::new();
        let (rows, failures) = sweep(&cfg, &spec, &mut buf).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(failures, 1);
        assert!(rows[0].failed());
        assert!(rows[0].train_loss.is_nan());
        let parsed = read_rows(buf.as_slice()).unwrap();
        assert!(parsed[0].failed());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let cfg = small_config();
        let result = run(&cfg).unwrap();
        let mut buf = Vec::new();
        write_trace(&result.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss");
        assert_eq!(lines.count(), result.trace.epochs.len());
    }
}
