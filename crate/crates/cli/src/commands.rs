use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use cvae::acquisition::{information_curve, IcConfig};
use cvae::dataio::{load_csv, read_mask_csv, split as split_rows, write_csv, write_mask_csv, Dataset, ScaleInfo};
use cvae::evalkit::{eval_rng, impute_jobs, mcar_rng, neg_expected_llh, rmse_missing, test_elbo, MetricsRecord};
use cvae::missingness::{sample_mcar_mask, self_censoring_mask, MaskPattern};
use cvae::model::Checkpoint;
use cvae::numcore::Tensor;
use cvae::trainer::{config_hash, train_with};
use cvae::Error;
use serde_json::json;

use crate::config::RunConfigFile;
use crate::svg;
use crate::{DataArgs, EvalArgs, GenmaskArgs, IcArgs, ImputeArgs, Mechanism, ModelArgs, SplitArgs, TrainArgs};

/// Exit codes: 2 for usage, configuration and data problems, 3 for numeric
/// failures.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::NonFiniteGradient(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("CVAE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("CVAE_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or(flag: Option<u64>, fallback: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

fn provenance(hash: &str, seed: u64) -> String {
    format!("config_hash={hash} seed={seed}")
}

fn load_data(a: &DataArgs) -> Result<Dataset> {
    Ok(load_csv(&a.data, !a.no_header)?)
}

/// The cells both the mask file (if any) and the data mark as observed.
fn observed(ds: &Dataset, mask: Option<&Path>) -> Result<MaskPattern> {
    match mask {
        None => Ok(ds.observed.clone()),
        Some(p) => {
            let m = read_mask_csv(p)?;
            m.check_shape(ds.rows(), ds.cols(), "mask file")?;
            Ok(MaskPattern::from_fn(ds.rows(), ds.cols(), |i, j| m.get(i, j) && ds.observed.get(i, j)))
        }
    }
}

/// Scaled values with every cell outside `q` zeroed.
fn model_input(scale: &ScaleInfo, ds: &Dataset, q: &MaskPattern) -> Tensor {
    let mut x = scale.apply(&ds.values);
    for i in 0..ds.rows() {
        for j in 0..ds.cols() {
            if !q.get(i, j) {
                x.set(i, j, 0.0);
            }
        }
    }
    x
}

fn write_text(path: &Path, text: &str) -> Result {
    fs::write(path, text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn genmask(a: &GenmaskArgs) -> Result {
    let ds = load_data(&a.data)?;
    let seed = seed_or(a.seed, 0)?;
    let (mask, hash) = match a.mechanism {
        Mechanism::Mcar => {
            let rate = a.rate.ok_or_else(|| CliError::usage("--rate is required for mcar"))?;
            if !(0.0..=1.0).contains(&rate) {
                return Err(CliError::usage(format!("--rate {rate} outside [0, 1]")));
            }
            let mask = sample_mcar_mask(ds.rows(), ds.cols(), rate, &mut mcar_rng(seed))?;
            (mask, config_hash(&json!({"mechanism": "mcar", "rate": rate})))
        }
        Mechanism::SelfCensor => {
            if a.rate.is_some() {
                return Err(CliError::usage("--rate does not apply to self-censor"));
            }
            if ds.observed.count_observed() != ds.rows() * ds.cols() {
                return Err(CliError::usage("self-censoring needs a fully observed data file"));
            }
            (self_censoring_mask(&ds.values), config_hash(&json!({"mechanism": "self-censor"})))
        }
    };
    write_mask_csv(&mask, &a.out, Some(&provenance(&hash, seed)))?;
    println!("missing fraction {:.6}", mask.missing_fraction());
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result {
    let ds = load_data(&a.data)?;
    let mask = a.mask.as_deref().map(read_mask_csv).transpose()?;
    if let Some(m) = &mask {
        m.check_shape(ds.rows(), ds.cols(), "mask file")?;
    }
    let seed = seed_or(a.seed, 0)?;
    let parts = split_rows(ds.rows(), a.test_fraction, seed)?;
    let note = provenance(&config_hash(&json!({"test_fraction": a.test_fraction})), seed);
    create_dir(&a.out_dir)?;
    for (name, rows) in [("train", &parts.train), ("test", &parts.test)] {
        write_csv(&ds.select_rows(rows), a.out_dir.join(format!("{name}.csv")), !a.data.no_header, Some(&note))?;
        if let Some(m) = &mask {
            write_mask_csv(&m.select_rows(rows), a.out_dir.join(format!("{name}_mask.csv")), Some(&note))?;
        }
    }
    println!("{} train rows, {} test rows", parts.train.len(), parts.test.len());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result {
    let run = RunConfigFile::load(&a.config)?;
    let mut cfg = run.train.clone();
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    let data = a.data.clone().or(run.data).ok_or_else(|| CliError::usage("no data file (--data or `data`)"))?;
    let mask = a.mask.clone().or(run.mask);
    let out_dir = a
        .out_dir
        .clone()
        .or(run.out_dir)
        .ok_or_else(|| CliError::usage("no output directory (--out-dir or `out_dir`)"))?;
    cfg.validate()?;

    let ds = load_csv(&data, run.header)?;
    let q = observed(&ds, mask.as_deref())?;
    let scale = ScaleInfo::fit(&ds, &q, &ds.columns)?;
    let x = model_input(&scale, &ds, &q);
    create_dir(&out_dir)?;
    let hash = cfg.hash();
    let save = |name: String, model: &cvae::model::Model| -> cvae::Result<()> {
        Checkpoint::new(model.clone(), Some(scale.clone()), hash.clone(), cfg.seed)
            .with_config(cfg.clone())
            .save(&out_dir.join(name))
    };
    let (model, log) = train_with(&cfg, &x, &q, &mut |epoch, m| {
        if epoch == cfg.epochs {
            Ok(())
        } else {
            save(format!("model_epoch{epoch}.json"), m)
        }
    })?;
    save("model.json".into(), &model)?;
    write_text(&out_dir.join("train_log.csv"), &log.to_csv(a.timing))?;
    match log.records.last() {
        Some(r) => println!("{} epochs, final loss {:.6}", r.epoch, r.loss),
        None => println!("0 epochs, initialization saved"),
    }
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    scale: ScaleInfo,
    ds: Dataset,
    q: MaskPattern,
    x: Tensor,
    seed: u64,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let ck = Checkpoint::load(&a.model)?;
    let scale = ck
        .scale
        .clone()
        .ok_or_else(|| CliError::usage("checkpoint carries no scaling"))?;
    let ds = load_data(&a.data)?;
    if ds.cols() != ck.model.d() {
        return Err(CliError::usage(format!(
            "model has {} features, data has {}",
            ck.model.d(),
            ds.cols()
        )));
    }
    let q = observed(&ds, a.mask.as_deref())?;
    let x = model_input(&scale, &ds, &q);
    let seed = seed_or(a.seed, ck.seed)?;
    if a.samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    Ok(Loaded {
        ck,
        scale,
        ds,
        q,
        x,
        seed,
    })
}

pub fn impute(a: &ImputeArgs) -> Result {
    let l = load_model(&a.model)?;
    let mut rng = eval_rng(l.seed);
    let imputed = impute_jobs(&l.ck.model, &l.x, &l.q, a.model.samples, &mut rng, a.model.jobs)?;
    let mut out = l.ds.values.clone();
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            if a.scaled {
                out.set(i, j, imputed.get(i, j));
            } else if !l.q.get(i, j) {
                out.set(i, j, l.scale.unscale(j, imputed.get(i, j)));
            }
        }
    }
    let ds = Dataset::from_values(l.ds.columns.clone(), out)?;
    write_csv(&ds, &a.out, !a.model.data.no_header, Some(&provenance(&l.ck.config_hash, l.seed)))?;
    println!("imputed {} cells", l.q.rows() * l.q.cols() - l.q.count_observed());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result {
    let mut want = [false; 3];
    for m in &a.metrics {
        match m.trim() {
            "rmse" => want[0] = true,
            "nll" => want[1] = true,
            "elbo" => want[2] = true,
            other => return Err(CliError::usage(format!("unknown metric `{other}` (rmse, nll, elbo)"))),
        }
    }
    let l = load_model(&a.model)?;
    let truth = if want[0] || want[1] {
        let path = a
            .truth
            .as_ref()
            .ok_or_else(|| CliError::usage("--truth is required for rmse and nll"))?;
        let t = load_csv(path, !a.model.data.no_header)?;
        if t.values.shape() != l.ds.values.shape() {
            return Err(CliError::usage(format!(
                "truth is {:?}, data is {:?}",
                t.values.shape(),
                l.ds.values.shape()
            )));
        }
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                if !l.q.get(i, j) && !t.observed.get(i, j) {
                    return Err(CliError::usage(format!("truth has no value at hidden cell ({i}, {j})")));
                }
            }
        }
        Some(l.scale.apply(&t.values))
    } else {
        None
    };

    let model = &l.ck.model;
    let n = l.x.rows();
    let mut rng = eval_rng(l.seed);
    let mut rmse = None;
    if want[0] {
        let t = truth.as_ref().expect("checked above");
        let imputed = impute_jobs(model, &l.x, &l.q, a.model.samples, &mut rng, a.model.jobs)?;
        rmse = Some(if a.unscaled {
            rmse_missing(&l.scale.invert(&imputed), &l.scale.invert(t), &l.q)?
        } else {
            rmse_missing(&imputed, t, &l.q)?
        });
    }
    let mut neg_llh = None;
    if want[1] {
        let t = truth.as_ref().expect("checked above");
        let mut v = neg_expected_llh(model, t, &l.q, a.model.samples, &mut rng)?;
        if a.unscaled {
            // density of raw values: divide by each hidden column's range
            let mut log_range = 0.0;
            for i in 0..n {
                for j in 0..l.q.cols() {
                    if !l.q.get(i, j) && !l.scale.constant[j] {
                        log_range += (l.scale.max[j] - l.scale.min[j]).ln();
                    }
                }
            }
            v += log_range / n as f64;
        }
        neg_llh = Some(v);
    }
    let elbo = if want[2] {
        Some(test_elbo(model, &l.x, &l.q, a.model.samples, &mut rng)?)
    } else {
        None
    };

    let (reg, lambda, p_remove) = match &l.ck.config {
        Some(c) if c.reg.enabled => (true, c.reg.lambda, c.reg.p_remove),
        _ => (false, 0.0, 0.0),
    };
    let record = MetricsRecord {
        dataset: a.name.clone().unwrap_or_else(|| {
            a.model
                .data
                .data
                .file_stem()
                .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
        }),
        model: model.spec.kind.name().to_string(),
        reg,
        lambda,
        p_remove,
        missing_rate: a.missing_rate.unwrap_or_else(|| l.q.missing_fraction()),
        seed: l.seed,
        rmse,
        neg_llh,
        elbo,
    };
    let note = format!("# {}\n", provenance(&l.ck.config_hash, l.seed));
    let row = record.csv_row();
    println!("{}\n{row}", MetricsRecord::HEADER);
    if let Some(path) = &a.out {
        let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
        let mut text = note;
        if fresh {
            text.push_str(MetricsRecord::HEADER);
            text.push('\n');
        }
        text.push_str(&row);
        text.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        f.write_all(text.as_bytes())
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn target_index(spec: &str, columns: &[String]) -> Result<usize> {
    let idx = match spec.parse::<usize>() {
        Ok(i) => i,
        Err(_) => columns
            .iter()
            .position(|c| c == spec)
            .ok_or_else(|| CliError::usage(format!("no column named `{spec}`")))?,
    };
    if idx >= columns.len() {
        return Err(CliError::usage(format!(
            "target column {idx} out of range for {} columns",
            columns.len()
        )));
    }
    Ok(idx)
}

pub fn ic(a: &IcArgs) -> Result {
    let l = load_model(&a.model)?;
    let target = target_index(&a.target_col, &l.ds.columns)?;
    if (0..l.ds.rows()).any(|i| !l.ds.observed.get(i, target)) {
        return Err(CliError::usage("every row needs a value in the target column"));
    }
    // truth at every cell that may be acquired, plus the target
    let mut truth = l.x.clone();
    for i in 0..truth.rows() {
        truth.set(i, target, l.scale.scale(target, l.ds.values.get(i, target)));
    }
    let cfg = IcConfig {
        target,
        max_steps: a.steps,
        s_outer: a.outer,
        s_impute: a.model.samples,
        seed: l.seed,
        jobs: a.model.jobs,
    };
    let curve = information_curve(&l.ck.model, &truth, Some(&l.q), &cfg)?;
    let note = format!("{} target={target}", provenance(&l.ck.config_hash, l.seed));
    write_text(&a.out, &curve.to_csv(Some(&note)))?;
    if let Some(path) = &a.svg {
        let label = a.label.clone().unwrap_or_else(|| l.ck.model.spec.kind.name().to_string());
        let mut curves = vec![(label, curve.mse.clone())];
        for o in &a.overlay {
            let text = fs::read_to_string(o).map_err(|e| CliError::usage(format!("{}: {e}", o.display())))?;
            let ys = svg::read_curve(&text).map_err(|e| CliError::usage(format!("{}: {e}", o.display())))?;
            let name = o.file_stem().map_or_else(|| "overlay".into(), |s| s.to_string_lossy().into_owned());
            curves.push((name, ys));
        }
        write_text(path, &svg::render(&curves, &note))?;
    }
    for (s, m) in curve.mse.iter().enumerate() {
        println!("step {s}: mse {m:.6}");
    }
    Ok(())
}
