use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use restorenet::checkpoint::{Checkpoint, CheckpointError, MAGIC};
use restorenet::data::{
    corrupt_fixed, load_idx, split, CorruptionSpec, DataError, Image, MnistSet, SamplePair, SplitSpec,
};
use restorenet::evaluation::{compare, evaluate, export_grid, fit_log_trend, EvalError, EvalReport};
use restorenet::gradcheck::{run_all, run_scope, CheckRow, SCOPES, TOLERANCE};
use restorenet::layers::HiddenGate;
use restorenet::models::{
    AnyModel, BaselineConfig, CnnCnnBaseline, CnnLstmModel, DecoderConfig, EncoderConfig, ModelKind,
};
use restorenet::training::{loss_csv, model_from_checkpoint, OptimizerKind, TrainConfig, TrainError, Trainer};
use restorenet::TensorError;

use crate::manifest::{CorruptionRecord, DataRecord, RunManifest, TrainRecord};
use crate::{Cli, Command, CompareArgs, CorruptArgs, CorruptionArgs, DataArgs, EvalArgs, GradcheckArgs, HeldOutArgs, TrainArgs};

pub const DATA_ENV: &str = "RESTORENET_DATA";
const DATA_FILE_NAMES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-images-idx3-ubyte.gz",
    "train-images.idx3-ubyte",
    "mnist5k-images-idx3-ubyte.gz",
];
/// Image-iterations above which `train` warns about run time.
const DEFAULT_ITERATIONS: u64 = 2000;
const LONG_RUN_SAMPLES: u64 = 1_000_000;

/// A command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Usage(m),
            TrainError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.command {
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn resolve_data(flag: Option<&Path>) -> Result<PathBuf, Failure> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    let root = std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    if root.is_file() {
        return Ok(root);
    }
    DATA_FILE_NAMES
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Failure::Data(format!(
                "no image file found in {} (pass --data or set {DATA_ENV})",
                root.display()
            ))
        })
}

fn load_data(args: &DataArgs) -> Result<(PathBuf, Arc<MnistSet>), Failure> {
    let path = resolve_data(args.data.as_deref())?;
    let set = load_idx(&path)?;
    Ok((path, Arc::new(set)))
}

fn corruption_spec(a: &CorruptionArgs) -> CorruptionSpec {
    CorruptionSpec {
        blank_start: a.blank_start,
        blank_end: a.blank_end,
        density: a.density,
    }
}

fn corruption_record(c: &CorruptionSpec) -> CorruptionRecord {
    CorruptionRecord {
        blank_start: c.blank_start,
        blank_end: c.blank_end,
        density: c.density,
    }
}

fn data_record(path: &Path, set: &MnistSet, split_seed: u64) -> DataRecord {
    DataRecord {
        path: path.display().to_string(),
        checksum: set.checksum().to_string(),
        images: set.len(),
        split_seed,
        train_fraction: SplitSpec::default().train_fraction,
    }
}

fn split_spec(seed: u64) -> SplitSpec {
    SplitSpec {
        seed,
        ..SplitSpec::default()
    }
}

fn parse_mode(s: &str) -> Result<HiddenGate, Failure> {
    HiddenGate::parse(s).ok_or_else(|| Failure::Usage(format!("unknown --hidden-gate value {s:?} (valid: output, input)")))
}

fn parse_kind(s: &str) -> Result<ModelKind, Failure> {
    ModelKind::parse(s).ok_or_else(|| {
        let valid: Vec<&str> = ModelKind::ALL.iter().map(|k| k.tag()).collect();
        Failure::Usage(format!("unknown model {s:?} (valid: {})", valid.join(", ")))
    })
}

fn cmd_corrupt(a: CorruptArgs) -> Result<(), Failure> {
    let (path, set) = load_data(&a.data)?;
    let spec = corruption_spec(&a.corruption);
    spec.validate(set.side())?;
    if a.count > set.len() {
        return Err(Failure::Usage(format!("asked for {} images, file holds {}", a.count, set.len())));
    }
    create_dir(&a.out)?;
    let images: Vec<Image> = (0..a.count).map(|i| set.image(i)).collect();
    let pairs = corrupt_fixed(&images, &spec, a.seed);
    let mut manifest = RunManifest::new("corrupt", data_record(&path, &set, a.data.split_seed), corruption_record(&spec));
    manifest.preview_seed = Some(a.seed);
    let side = set.side();
    for (i, p) in pairs.iter().enumerate() {
        for (label, im) in [("clean", &p.clean), ("corrupted", &p.corrupted)] {
            let name = format!("{label}-{i:03}.pgm");
            write_file(&a.out.join(&name), restorenet::data::encode_pgm(side, side, &im.to_bytes()))?;
            manifest.artifacts.push(name);
        }
    }
    let mpath = a.out.join("manifest.json");
    manifest.write(&mpath).map_err(|e| io_err(&mpath, e))?;
    println!("wrote {} preview pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn build_model(rec: &TrainRecord) -> Result<AnyModel<f32>, Failure> {
    Ok(match parse_kind(&rec.model)? {
        ModelKind::CnnLstm => {
            let dec = DecoderConfig {
                layers: rec.layers,
                hidden: rec.hidden,
                mode: parse_mode(&rec.hidden_gate)?,
                ..DecoderConfig::default()
            };
            AnyModel::CnnLstm(CnnLstmModel::new(EncoderConfig::default(), dec, rec.seed).map_err(|e| Failure::Usage(e.to_string()))?)
        }
        ModelKind::CnnCnn => AnyModel::CnnCnn(CnnCnnBaseline::new(BaselineConfig::default(), rec.seed)?),
    })
}

fn train_config(rec: &TrainRecord, corruption: &CorruptionRecord) -> Result<TrainConfig, Failure> {
    Ok(TrainConfig {
        iterations: rec.iterations,
        batch_size: rec.batch_size,
        learning_rate: rec.learning_rate,
        l2_lambda: rec.l2_lambda,
        dropout: rec.dropout,
        optimizer: OptimizerKind::parse(&rec.optimizer)
            .ok_or_else(|| Failure::Usage(format!("unknown optimizer {:?} (valid: adam, adadelta)", rec.optimizer)))?,
        seed: rec.seed,
        checkpoint_interval: rec.checkpoint_interval,
        clip_norm: rec.clip_norm,
        corruption: CorruptionSpec {
            blank_start: corruption.blank_start,
            blank_end: corruption.blank_end,
            density: corruption.density,
        },
    })
}

fn warn_if_long(rec: &TrainRecord) {
    let samples = rec.iterations.saturating_mul(rec.batch_size as u64);
    if samples > LONG_RUN_SAMPLES {
        // Rough single-core cost per training image.
        let per_image = if rec.model == "cnn-lstm" { 0.011 } else { 0.005 };
        let hours = samples as f64 * per_image / 3600.0;
        eprintln!(
            "warning: {} iterations of batch {} is about {hours:.0} CPU hours on one core",
            rec.iterations, rec.batch_size
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    if let Some(ckpt_path) = &a.resume {
        return resume_training(&a, ckpt_path);
    }
    let (manifest, data_path) = match &a.from_manifest {
        Some(mpath) => {
            let m = RunManifest::read(mpath).map_err(Failure::Data)?;
            if m.train.is_none() {
                return Err(Failure::Usage(format!("{} is not a training manifest", mpath.display())));
            }
            let path = a.data.data.clone().unwrap_or_else(|| PathBuf::from(&m.data.path));
            (Some(m), path)
        }
        None => (None, resolve_data(a.data.data.as_deref())?),
    };
    let set = Arc::new(load_idx(&data_path)?);
    let (train, corruption, split_seed) = match manifest {
        Some(m) => {
            if m.data.checksum != set.checksum() {
                return Err(Failure::Data(format!(
                    "{} has checksum {}, manifest recorded {}",
                    data_path.display(),
                    set.checksum(),
                    m.data.checksum
                )));
            }
            (m.train.expect("checked above"), m.corruption, m.data.split_seed)
        }
        None => {
            let model = a
                .model
                .clone()
                .ok_or_else(|| Failure::Usage("train needs a model tag (cnn-lstm or cnn-cnn)".into()))?;
            parse_kind(&model)?;
            parse_mode(&a.hidden_gate)?;
            let rec = TrainRecord {
                model,
                iterations: a.iterations.unwrap_or(DEFAULT_ITERATIONS),
                batch_size: a.batch,
                learning_rate: a.lr,
                l2_lambda: a.l2,
                dropout: a.dropout,
                optimizer: a.optimizer.clone(),
                seed: a.seed,
                hidden_gate: a.hidden_gate.clone(),
                layers: a.layers,
                hidden: a.hidden,
                checkpoint_interval: a.checkpoint_every,
                clip_norm: (!a.no_clip).then_some(a.clip_norm),
                train_images: 0,
                log_timing: a.log_timing,
            };
            (rec, corruption_record(&corruption_spec(&a.corruption)), a.data.split_seed)
        }
    };
    let parts = split(set.len(), &split_spec(split_seed))?;
    let available = parts.train.len();
    let wanted = match (a.from_manifest.is_some(), a.train_images) {
        (true, _) => train.train_images,
        (false, Some(n)) => n,
        (false, None) => available,
    };
    if wanted == 0 || wanted > available {
        return Err(Failure::Usage(format!("training split holds {available} images, asked for {wanted}")));
    }
    let train = TrainRecord {
        train_images: wanted,
        ..train
    };
    let indices = parts.train[..wanted].to_vec();
    let config = train_config(&train, &corruption)?;
    let model = build_model(&train)?;
    warn_if_long(&train);

    let run_dir = a.run_dir.clone().unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        a.out.join(format!("{}-{stamp}-seed{}", train.model, train.seed))
    });
    create_dir(&run_dir)?;
    let mut manifest = RunManifest::new("train", data_record(&data_path, &set, split_seed), corruption);
    manifest.train = Some(train.clone());
    manifest.artifacts = vec!["loss.csv".into(), "final.rstf".into()];
    let mpath = run_dir.join("manifest.json");
    manifest.write(&mpath).map_err(|e| io_err(&mpath, e))?;

    let trainer = Trainer::new(model, set, indices, config)?;
    drive(trainer, &run_dir, train.log_timing)
}

fn resume_training(a: &TrainArgs, ckpt_path: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let source_dir = ckpt_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let old_manifest = RunManifest::read(&source_dir.join("manifest.json")).ok();
    let run_dir = a.run_dir.clone().unwrap_or(source_dir);
    create_dir(&run_dir)?;
    let mpath = run_dir.join("manifest.json");
    let data_path = match (&a.data.data, &old_manifest) {
        (Some(p), _) => p.clone(),
        (None, Some(m)) => PathBuf::from(&m.data.path),
        (None, None) => resolve_data(None)?,
    };
    let set = Arc::new(load_idx(&data_path)?);
    let mut trainer = Trainer::<f32, AnyModel<f32>>::resume(&ckpt, set)?;
    if let Some(n) = a.iterations {
        trainer.set_iterations(n);
    }
    let log_timing = old_manifest.as_ref().and_then(|m| m.train.as_ref()).is_some_and(|t| t.log_timing) || a.log_timing;
    if let Some(mut m) = old_manifest {
        if let Some(t) = m.train.as_mut() {
            t.iterations = trainer.config().iterations;
        }
        m.resumed_from = Some(ckpt_path.display().to_string());
        m.write(&mpath).map_err(|e| io_err(&mpath, e))?;
    }
    println!("resuming at iteration {} of {}", trainer.iteration(), trainer.config().iterations);
    drive(trainer, &run_dir, log_timing)
}

fn drive(mut trainer: Trainer<f32, AnyModel<f32>>, run_dir: &Path, log_timing: bool) -> Result<(), Failure> {
    let loss_path = run_dir.join("loss.csv");
    let result = trainer.run(|ckpt| {
        let p = run_dir.join(format!("checkpoint-{:07}.rstf", ckpt.iteration));
        ckpt.save(&p)?;
        Ok(())
    });
    write_file(&loss_path, loss_csv(trainer.log(), log_timing))?;
    match result {
        Ok(()) => {}
        Err(TrainError::NonFinite { iteration, checkpoint }) => {
            let p = run_dir.join("diagnostic.rstf");
            checkpoint.save(&p)?;
            return Err(Failure::Numeric(format!(
                "non-finite loss at iteration {iteration}; state saved to {}",
                p.display()
            )));
        }
        Err(e) => return Err(e.into()),
    }
    let final_path = run_dir.join("final.rstf");
    trainer.checkpoint().save(&final_path)?;
    let log = trainer.log();
    let tail: Vec<f64> = log.iter().rev().take(10).map(|r| r.rmse).collect();
    println!("run directory  {}", run_dir.display());
    println!("iterations     {}", trainer.iteration());
    if !tail.is_empty() {
        println!("final rmse     {:.6} (mean of last {})", tail.iter().sum::<f64>() / tail.len() as f64, tail.len());
    }
    if let Ok(fit) = fit_log_trend(log) {
        println!("loss trend     {:.6} ln(t) + {:.6}", fit.a, fit.b);
    }
    Ok(())
}

fn held_out(args: &HeldOutArgs) -> Result<(Arc<MnistSet>, Vec<SamplePair>), Failure> {
    let (_, set) = load_data(&args.data)?;
    let spec = corruption_spec(&args.corruption);
    spec.validate(set.side())?;
    let parts = split(set.len(), &split_spec(args.data.split_seed))?;
    if args.test_images == 0 || args.test_images > parts.test.len() {
        return Err(Failure::Usage(format!(
            "test split holds {} images, asked for {}",
            parts.test.len(),
            args.test_images
        )));
    }
    let images: Vec<Image> = parts.test[..args.test_images].iter().map(|&i| set.image(i)).collect();
    Ok((set, corrupt_fixed(&images, &spec, args.seed)))
}

/// A loaded checkpoint's model at its stored precision.
enum Loaded {
    Single(AnyModel<f32>),
    Double(AnyModel<f64>),
}

impl Loaded {
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, Failure> {
        let double = ckpt.echo_value("model.precision").map(|p| p == "double").unwrap_or(false);
        Ok(if double {
            Loaded::Double(model_from_checkpoint(ckpt)?)
        } else {
            Loaded::Single(model_from_checkpoint(ckpt)?)
        })
    }

    fn restorer(&self) -> &dyn restorenet::evaluation::Restorer {
        match self {
            Loaded::Single(m) => m,
            Loaded::Double(m) => m,
        }
    }
}

fn check_corpus(ckpt: &Checkpoint, set: &MnistSet, path: &Path) {
    if let Ok(sum) = ckpt.echo_value("data.checksum") {
        if sum != set.checksum() {
            eprintln!("warning: {} was trained on different data ({sum})", path.display());
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (set, pairs) = held_out(&a.held_out)?;
    check_corpus(&ckpt, &set, &a.checkpoint);
    let model = Loaded::from_checkpoint(&ckpt)?;
    let report = evaluate(model.restorer(), &ckpt.kind, &pairs, a.held_out.seed)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_file(out, report.to_csv())?;
    }
    Ok(())
}

fn is_checkpoint(path: &Path) -> Result<bool, Failure> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(bytes.starts_with(MAGIC))
}

fn read_report(path: &Path) -> Result<EvalReport, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    EvalReport::from_csv(&text).ok_or_else(|| Failure::Data(format!("{} is neither a checkpoint nor a report CSV", path.display())))
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let (pa, pb) = (&a.inputs[0], &a.inputs[1]);
    let both_ckpt = is_checkpoint(pa)? && is_checkpoint(pb)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
    }
    let (ra, rb) = if both_ckpt {
        let (ca, cb) = (Checkpoint::load(pa)?, Checkpoint::load(pb)?);
        let (sa, sb) = (ca.echo_value("data.checksum").ok(), cb.echo_value("data.checksum").ok());
        if sa != sb {
            return Err(Failure::Data(format!(
                "incompatible corpora: {} and {} were trained on different data",
                pa.display(),
                pb.display()
            )));
        }
        let (set, pairs) = held_out(&a.held_out)?;
        check_corpus(&ca, &set, pa);
        let (ma, mb) = (Loaded::from_checkpoint(&ca)?, Loaded::from_checkpoint(&cb)?);
        let ra = evaluate(ma.restorer(), &ca.kind, &pairs, a.held_out.seed)?;
        let rb = evaluate(mb.restorer(), &cb.kind, &pairs, a.held_out.seed)?;
        if let Some(out) = &a.out {
            let n = a.grid_rows.min(pairs.len());
            if n > 0 {
                let shown = &pairs[..n];
                let inputs: Vec<Image> = shown.iter().map(|p| p.corrupted.clone()).collect();
                let originals: Vec<Image> = shown.iter().map(|p| p.clean.clone()).collect();
                let oa = ma.restorer().restore(shown)?;
                let ob = mb.restorer().restore(shown)?;
                write_file(&out.join("grid.pgm"), export_grid(&inputs, &oa, &ob, &originals)?)?;
            }
        }
        (ra, rb)
    } else {
        (read_report(pa)?, read_report(pb)?)
    };
    let table = compare(&ra, &rb).map_err(|e| Failure::Data(e.to_string()))?;
    print!("{}", table.to_table());
    if let Some(out) = &a.out {
        write_file(&out.join("comparison.csv"), table.to_csv())?;
        write_file(&out.join("report-a.csv"), ra.to_csv())?;
        write_file(&out.join("report-b.csv"), rb.to_csv())?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let mode = parse_mode(&a.hidden_gate)?;
    let numeric = |e: restorenet::autograd::AutogradError| Failure::Numeric(e.to_string());
    let rows: Vec<CheckRow> = if a.scope == "all" {
        run_all(a.seed, mode).map_err(numeric)?
    } else {
        match run_scope(&a.scope, a.seed, mode) {
            Some(r) => vec![r.map_err(numeric)?],
            None => {
                return Err(Failure::Usage(format!(
                    "unknown scope {:?} (valid: all, {})",
                    a.scope,
                    SCOPES.join(", ")
                )))
            }
        }
    };
    println!("{:<18} {:>14}  status", "scope", "max rel error");
    for r in &rows {
        println!("{:<18} {:>14.3e}  {}", r.scope, r.max_rel_error, if r.passed() { "pass" } else { "FAIL" });
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} scope(s) exceed {TOLERANCE:e}")));
    }
    Ok(())
}
