//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails. Expect close to an hour on a
//! single core, dominated by the six desk-scale training runs.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restorenet::checkpoint::Checkpoint;
use restorenet::data::{corrupt, corrupt_fixed, load_idx, split, CorruptionSpec, Image, MnistSet, SamplePair, SplitSpec};
use restorenet::evaluation::{evaluate, fit_log_trend, IdentityRestorer};
use restorenet::gradcheck::{run_all, TOLERANCE};
use restorenet::layers::{HiddenGate, Param};
use restorenet::models::{
    AnyModel, BaselineConfig, CnnCnnBaseline, CnnLstmModel, DecoderConfig, EncoderConfig, ModelKind,
};
use restorenet::training::{
    adadelta_step, adam_step, l2_penalty, loss_csv, rmse_loss, AdadeltaState, AdamState, LossRecord, TrainConfig, Trainer,
};
use restorenet::Tensor;

const TRAIN_IMAGES: usize = 1000;
const HELD_OUT: usize = 500;
const HELD_OUT_SEED: u64 = 1234;
const SEEDS: [u64; 3] = [7, 8, 9];
const TIME_LIMIT_SECS: f64 = 30.0 * 60.0;

type Outcome = Result<String, String>;

/// Writes past the test harness's output capture so the report shows up in
/// plain `cargo test` runs.
macro_rules! report {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

fn fixture() -> Arc<MnistSet> {
    let path = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k-images-idx3-ubyte.gz");
    Arc::new(load_idx(path).expect("bundled MNIST subset"))
}

fn criterion(number: u32, title: &str, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    report!("criterion {number} {tag} [{title}] {detail} ({secs:.1}s)");
    outcome.is_ok()
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---- 1

fn shape_fidelity() -> Outcome {
    let model = CnnLstmModel::<f32>::new(EncoderConfig::default(), DecoderConfig::default(), 0).map_err(|e| e.to_string())?;
    let trace = model.encoder.trace(&Image::zeros(28)).map_err(|e| e.to_string())?;
    let want: Vec<Vec<usize>> = vec![
        vec![1, 28, 28],
        vec![32, 28, 28],
        vec![32, 14, 14],
        vec![64, 14, 14],
        vec![64, 7, 7],
        vec![100],
    ];
    check(trace == want, format!("trace {trace:?}"))?;
    Ok(trace.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" -> "))
}

// ---- 2

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for mode in [HiddenGate::Output, HiddenGate::Input] {
        for row in run_all(7, mode).map_err(|e| e.to_string())? {
            worst = worst.max(row.max_rel_error);
            count += 1;
            check(row.passed(), format!("{} ({mode:?}) rel error {:.3e}", row.scope, row.max_rel_error))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("{count} checks, worst relative error {worst:.2e} < {TOLERANCE:e}"))
}

// ---- 3

fn corruption_statistics(set: &MnistSet) -> Outcome {
    let blank_only = CorruptionSpec { density: 0.0, ..CorruptionSpec::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        let img = set.image(i);
        let out = corrupt(&img, &blank_only, &mut rng);
        for r in 0..28 {
            let want: Vec<f64> = if r >= 14 { vec![0.0; 28] } else { img.row(r).to_vec() };
            check(out.row(r) == &want[..], format!("image {i} row {r} differs at density 0"))?;
        }
    }

    // A mid-grey image makes every replacement visible.
    let grey = Image::new(28, vec![0.5; 784]).map_err(|e| e.to_string())?;
    let spec = CorruptionSpec::default();
    let (mut seen, mut salt, mut pepper) = (0usize, 0usize, 0usize);
    for _ in 0..30 {
        let out = corrupt(&grey, &spec, &mut rng);
        for r in 0..14 {
            for &p in out.row(r) {
                seen += 1;
                match p {
                    x if x == 1.0 => salt += 1,
                    x if x == 0.0 => pepper += 1,
                    x => check(x == 0.5, format!("unexpected value {x}"))?,
                }
            }
        }
        for r in 14..28 {
            check(out.row(r).iter().all(|&p| p == 0.0 || p == 1.0), "blanked row carries signal")?;
        }
    }
    let replaced = (salt + pepper) as f64 / seen as f64;
    let salt_share = salt as f64 / (salt + pepper) as f64;
    check(seen >= 10_000, "too few pixels")?;
    check((0.18..=0.22).contains(&replaced), format!("replaced fraction {replaced:.4}"))?;
    check((0.45..=0.55).contains(&salt_share), format!("salt share {salt_share:.4}"))?;
    Ok(format!("{seen} pixels, replaced {replaced:.4}, salt share {salt_share:.4}"))
}

// ---- 4, 5, 8

struct Run {
    model: AnyModel<f32>,
    log: Vec<LossRecord>,
    secs: f64,
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        batch_size: 32,
        learning_rate: 1e-3,
        seed,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

fn fresh_model(kind: ModelKind, seed: u64) -> AnyModel<f32> {
    match kind {
        ModelKind::CnnLstm => {
            AnyModel::CnnLstm(CnnLstmModel::new(EncoderConfig::default(), DecoderConfig::default(), seed).unwrap())
        }
        ModelKind::CnnCnn => AnyModel::CnnCnn(CnnCnnBaseline::new(BaselineConfig::default(), seed).unwrap()),
    }
}

fn desk_run(set: &Arc<MnistSet>, train: &[usize], kind: ModelKind, seed: u64) -> Result<Run, String> {
    let start = Instant::now();
    let mut t = Trainer::new(fresh_model(kind, seed), set.clone(), train.to_vec(), desk_config(seed))
        .map_err(|e| e.to_string())?;
    t.run(|_| Ok(())).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let log = t.log().to_vec();
    Ok(Run { model: t.into_model(), log, secs })
}

fn mean_rmse(records: &[LossRecord]) -> f64 {
    records.iter().map(|r| r.rmse).sum::<f64>() / records.len() as f64
}

fn loss_regression(runs: &[(ModelKind, &Run)]) -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (kind, run) in runs {
        let first = mean_rmse(&run.log[..10]);
        let last = mean_rmse(&run.log[run.log.len() - 10..]);
        let ok = last < 0.7 * first && run.secs < TIME_LIMIT_SECS;
        let line = format!("{}: first10 {first:.4} last10 {last:.4} ratio {:.3} in {:.0}s", kind.tag(), last / first, run.secs);
        if !ok {
            failures.push(line.clone());
        }
        parts.push(line);
    }
    check(failures.is_empty(), failures.join("; "))?;
    Ok(parts.join("; "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn restoration_comparison(pairs: &[SamplePair], lstm: &[&Run], cnn: &[&Run]) -> Outcome {
    let identity = evaluate(&IdentityRestorer, "identity", pairs, HELD_OUT_SEED).map_err(|e| e.to_string())?;
    let score = |runs: &[&Run], name: &str| -> Result<(Vec<f64>, Vec<f64>), String> {
        let mut lower = Vec::new();
        let mut full = Vec::new();
        for r in runs {
            let rep = evaluate(&r.model, name, pairs, HELD_OUT_SEED).map_err(|e| e.to_string())?;
            lower.push(rep.rmse_lower);
            full.push(rep.rmse_full);
        }
        Ok((lower, full))
    };
    let (lstm_lower, lstm_full) = score(lstm, "cnn-lstm")?;
    let (cnn_lower, cnn_full) = score(cnn, "cnn-cnn")?;
    let (ml, mc) = (median(lstm_lower.clone()), median(cnn_lower.clone()));
    let (fl, fc) = (median(lstm_full.clone()), median(cnn_full));
    let verdict = if ml <= mc { "cnn-lstm wins lower half" } else { "cnn-cnn wins lower half" };
    report!("  rmse_lower per seed: cnn-lstm {lstm_lower:.4?} cnn-cnn {cnn_lower:.4?}");
    let detail = format!(
        "median rmse_lower cnn-lstm {ml:.4} vs cnn-cnn {mc:.4} ({verdict}); median rmse_full cnn-lstm {fl:.4}, cnn-cnn {fc:.4}, identity {:.4}",
        identity.rmse_full
    );
    check(fl < identity.rmse_full, format!("cnn-lstm does not beat identity: {detail}"))?;
    Ok(detail)
}

fn trend(runs: &[(ModelKind, &Run)]) -> Outcome {
    let mut parts = Vec::new();
    for (kind, run) in runs {
        let fit = fit_log_trend(&run.log).map_err(|e| e.to_string())?;
        check(fit.a < 0.0, format!("{} slope {:.4}", kind.tag(), fit.a))?;
        parts.push(format!("{}: rmse ~ {:.4} ln(it) + {:.4}", kind.tag(), fit.a, fit.b));
    }
    Ok(parts.join("; "))
}

// ---- 6

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

fn optimizer_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let n = 17;
    let mut draw = |scale: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
    let t = |v: &[f64]| Tensor::<f64>::from_f64([v.len()], v).unwrap();

    let init = draw(1.0);
    let grads: Vec<Vec<f64>> = (0..100).map(|_| draw(3.0)).collect();

    let mut w = init.clone();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64);
    let mut p = vec![t(&init)];
    let mut state = AdamState::<f64>::new(&[vec![n]]);
    for (step, g) in grads.iter().enumerate() {
        let k = (step + 1) as f64;
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= lr * (m[i] / (1.0 - b1.powf(k))) / ((v[i] / (1.0 - b2.powf(k))).sqrt() + eps);
        }
        adam_step(&mut state, &mut [&mut p[0]], &[t(g)], lr).map_err(|e| e.to_string())?;
    }
    check(p[0].data().iter().zip(&w).all(|(a, b)| close(*a, *b)), "adam diverges from scalar loop")?;

    let mut w = init.clone();
    let (mut eg, mut ex) = (vec![0.0; n], vec![0.0; n]);
    let (rho, eps) = (0.95f64, 1e-6f64);
    let mut p = vec![t(&init)];
    let mut state = AdadeltaState::<f64>::new(&[vec![n]]);
    for g in &grads {
        for i in 0..n {
            eg[i] = rho * eg[i] + (1.0 - rho) * g[i] * g[i];
            let d = -((ex[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g[i];
            ex[i] = rho * ex[i] + (1.0 - rho) * d * d;
            w[i] += d;
        }
        adadelta_step(&mut state, &mut [&mut p[0]], &[t(g)]).map_err(|e| e.to_string())?;
    }
    check(p[0].data().iter().zip(&w).all(|(a, b)| close(*a, *b)), "adadelta diverges from scalar loop")?;

    for _ in 0..20 {
        let (a, b) = (draw(1.0), draw(1.0));
        let oracle = (a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt();
        let got = rmse_loss(&t(&a), &t(&b)).map_err(|e| e.to_string())?;
        check(close(got, oracle), format!("rmse {got} vs {oracle}"))?;

        let lambda = draw(1.0)[0].abs();
        let bias = Param::bias("b", t(&b));
        let weight = Param::weight("w", t(&a));
        let oracle = lambda * a.iter().map(|x| x * x).sum::<f64>();
        let got = l2_penalty(&[&weight, &bias], lambda);
        check(close(got, oracle), format!("l2 {got} vs {oracle}"))?;
    }
    Ok("adam, adadelta (100 steps), rmse and l2 within 1e-12".into())
}

// ---- 7

fn determinism_and_persistence(set: &Arc<MnistSet>, train: &[usize]) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for kind in [ModelKind::CnnLstm, ModelKind::CnnCnn] {
        let cfg = TrainConfig { iterations: 12, checkpoint_interval: 6, ..desk_config(7) };
        let run = |save: bool| -> Result<Trainer<f32, AnyModel<f32>>, String> {
            let mut t = Trainer::new(fresh_model(kind, 7), set.clone(), train.to_vec(), cfg.clone()).map_err(|e| e.to_string())?;
            let path = dir.path().join(format!("{}.rstf", kind.tag()));
            t.run(|c| {
                if save && c.iteration == 6 {
                    c.save(&path)?;
                }
                Ok(())
            })
            .map_err(|e| e.to_string())?;
            Ok(t)
        };
        let full = run(true)?;
        let repeat = run(false)?;
        let csv = loss_csv(full.log(), false);
        check(csv == loss_csv(repeat.log(), false), format!("{}: repeated run CSV differs", kind.tag()))?;

        let ckpt = Checkpoint::load(dir.path().join(format!("{}.rstf", kind.tag()))).map_err(|e| e.to_string())?;
        let mut resumed = Trainer::<f32, _>::resume(&ckpt, set.clone()).map_err(|e| e.to_string())?;
        resumed.run(|_| Ok(())).map_err(|e| e.to_string())?;
        check(loss_csv(resumed.log(), false) == csv, format!("{}: resumed log differs", kind.tag()))?;
        check(resumed.model() == full.model(), format!("{}: resumed parameters differ", kind.tag()))?;
        parts.push(format!("{}: 12-iteration log identical after resume at 6", kind.tag()));
    }
    Ok(parts.join("; "))
}

#[test]
fn acceptance_criteria() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let passed = pool.install(|| {
        let set = fixture();
        let parts = split(set.len(), &SplitSpec::default()).unwrap();
        let train = parts.train[..TRAIN_IMAGES].to_vec();
        let held_out: Vec<Image> = parts.test[..HELD_OUT].iter().map(|&i| set.image(i)).collect();
        let pairs = corrupt_fixed(&held_out, &CorruptionSpec::default(), HELD_OUT_SEED);

        let mut passed = vec![
            criterion(1, "shape fidelity", shape_fidelity),
            criterion(2, "gradient suite", gradient_suite),
            criterion(3, "corruption statistics", || corruption_statistics(&set)),
            criterion(6, "optimizer oracles", optimizer_oracles),
            criterion(7, "determinism and persistence", || determinism_and_persistence(&set, &train)),
        ];

        let mut runs: Vec<(ModelKind, u64, Result<Run, String>)> = Vec::new();
        for seed in SEEDS {
            for kind in [ModelKind::CnnLstm, ModelKind::CnnCnn] {
                let r = desk_run(&set, &train, kind, seed);
                match &r {
                    Ok(run) => report!(
                        "  trained {} seed {seed}: final rmse {:.4} in {:.0}s",
                        kind.tag(),
                        run.log.last().map_or(f64::NAN, |l| l.rmse),
                        run.secs
                    ),
                    Err(e) => report!("  training {} seed {seed} failed: {e}", kind.tag()),
                }
                runs.push((kind, seed, r));
            }
        }
        let pick = |kind: ModelKind, seed: u64| -> Result<&Run, String> {
            match runs.iter().find(|(k, s, _)| *k == kind && *s == seed).map(|(_, _, r)| r) {
                Some(Ok(r)) => Ok(r),
                Some(Err(e)) => Err(e.clone()),
                None => Err("missing run".into()),
            }
        };
        let primary = || -> Result<Vec<(ModelKind, &Run)>, String> {
            Ok(vec![(ModelKind::CnnLstm, pick(ModelKind::CnnLstm, 7)?), (ModelKind::CnnCnn, pick(ModelKind::CnnCnn, 7)?)])
        };
        passed.push(criterion(4, "desk-scale loss regression", || loss_regression(&primary()?)));
        passed.push(criterion(5, "restoration comparison", || {
            let lstm: Vec<&Run> = SEEDS.iter().map(|&s| pick(ModelKind::CnnLstm, s)).collect::<Result<_, _>>()?;
            let cnn: Vec<&Run> = SEEDS.iter().map(|&s| pick(ModelKind::CnnCnn, s)).collect::<Result<_, _>>()?;
            restoration_comparison(&pairs, &lstm, &cnn)
        }));
        passed.push(criterion(8, "logarithmic loss trend", || trend(&primary()?)));
        passed
    });
    let failed = passed.iter().filter(|p| !**p).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
