use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use cosnorm::checkpoint::Checkpoint;
use cosnorm::gradcheck::{self, GradcheckConfig, Target};
use cosnorm::train::{self, trailing_summary, MetricsWriter, TrainOutcome};
use cosnorm::Dataset;

use crate::spec::{ExperimentSpec, RunPlan};
use crate::Failure;

pub const SUMMARY_HEADER: &str = "name,kernel,norm,learning_rate,final_test_error_percent,window,mean,variance";

fn run_plan(plan: &RunPlan, train_set: &Dataset, test_set: &Dataset, csv: &Path) -> Result<TrainOutcome, Failure> {
    let file = File::create(csv).map_err(|e| Failure::Data(format!("{}: {e}", csv.display())))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file))?;
    eprintln!(
        "[{}] kernel={} norm={} lr={} batch={} epochs={}",
        plan.name, plan.kernel, plan.norm, plan.config.learning_rate, plan.config.batch_size, plan.config.epochs
    );
    let outcome = train::train(&plan.config, train_set, test_set, |row| {
        eprintln!(
            "[{}] epoch {} step {} loss {:.5} test error {}%",
            plan.name, row.epoch, row.step, row.train_loss, row.test_error_percent
        );
        Ok(writer.write(row)?)
    })?;
    Ok(outcome)
}

fn summary_line(plan: &RunPlan, outcome: &TrainOutcome, window: usize) -> String {
    let last = outcome.rows.last().map_or(f64::NAN, |r| r.test_error_percent);
    let s = trailing_summary(&outcome.rows, window).expect("training records at least one row");
    format!(
        "{},{},{},{},{},{},{},{}",
        plan.name, plan.kernel, plan.norm, plan.config.learning_rate, last, s.window, s.mean, s.variance
    )
}

fn prepare_output(spec: &ExperimentSpec) -> Result<std::path::PathBuf, Failure> {
    let out = spec.output_dir();
    fs::create_dir_all(&out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    Ok(out)
}

pub fn train(spec_path: &Path) -> Result<(), Failure> {
    let spec = ExperimentSpec::load(spec_path)?;
    let (train_set, test_set) = spec.load_data()?;
    let plan = spec.main_plan(&train_set)?;
    let out = prepare_output(&spec)?;
    let outcome = run_plan(&plan, &train_set, &test_set, &out.join("metrics.csv"))?;
    Checkpoint::new(outcome.network.clone(), outcome.ema.clone()).save(out.join("model.ckpt"))?;
    eprintln!("wrote {} and {}", out.join("metrics.csv").display(), out.join("model.ckpt").display());
    println!("SUMMARY,{}", summary_line(&plan, &outcome, spec.summary_window));
    Ok(())
}

pub fn eval(checkpoint: &Path, spec_path: &Path) -> Result<(), Failure> {
    let spec = ExperimentSpec::load(spec_path)?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Data(format!("{}: {e}", checkpoint.display())))?;
    let (_, test_set) = spec.load_data()?;
    let net = ck.eval_network()?;
    let want: usize = net.input_shape().iter().product();
    if test_set.features() != want || test_set.n_classes > net.classes() {
        return Err(Failure::Data(format!(
            "checkpoint shape mismatch: network takes {want} features and {} classes, test set has {} and {}",
            net.classes(),
            test_set.features(),
            test_set.n_classes
        )));
    }
    let err = train::evaluate(&net, &test_set)?;
    println!("SUMMARY,eval,{},{err}", spec.name);
    Ok(())
}

fn targets(name: &str) -> Result<Vec<Target>, Failure> {
    let all = Target::all();
    let pick = |f: fn(&Target) -> bool| all.iter().copied().filter(f).collect();
    Ok(match name {
        "all" => all.clone(),
        "kernels" => pick(|t| matches!(t, Target::Kernel(_))),
        "networks" => pick(|t| matches!(t, Target::Network(..))),
        "layers" => pick(|t| !matches!(t, Target::Kernel(_) | Target::Network(..))),
        other => vec![other.parse().map_err(|e: cosnorm::Error| Failure::Usage(e.to_string()))?],
    })
}

pub fn gradcheck(target: &str, dims: (usize, usize), trials: usize, seed: u64) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let cfg = GradcheckConfig { dims, trials, seed };
    let mut failed = 0;
    let list = targets(target)?;
    for t in &list {
        let report = gradcheck::run(*t, &cfg)?;
        println!("{report}");
        if !report.passed() {
            failed += 1;
        }
    }
    println!("SUMMARY,gradcheck,{},{failed}", list.len());
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} targets exceeded tolerance", list.len())));
    }
    Ok(())
}

pub fn compare(spec_path: &Path) -> Result<(), Failure> {
    let spec = ExperimentSpec::load(spec_path)?;
    let (train_set, test_set) = spec.load_data()?;
    let plans = spec.variant_plans(&train_set)?;
    let out = prepare_output(&spec)?;
    let mut lines = vec![SUMMARY_HEADER.to_string()];
    for plan in &plans {
        let outcome = run_plan(plan, &train_set, &test_set, &out.join(format!("{}.csv", plan.name)))?;
        Checkpoint::new(outcome.network.clone(), outcome.ema.clone()).save(out.join(format!("{}.ckpt", plan.name)))?;
        let line = summary_line(plan, &outcome, spec.summary_window);
        println!("SUMMARY,{line}");
        lines.push(line);
    }
    let summary = out.join("summary.csv");
    fs::write(&summary, lines.join("\n") + "\n")?;
    eprintln!("wrote {}", summary.display());
    Ok(())
}
