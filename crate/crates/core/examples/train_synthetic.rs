//! Trains the tiny student on a freshly generated synthetic dataset with the
//! oracle teacher and reports test metrics.
//!
//! cargo run --release -p eocd-core --example train_synthetic [run.toml]

use std::time::Instant;

use eocd::config::RunConfigFile;
use eocd::data::generate_split;
use eocd::eval::evaluate;
use eocd::network::Model;
use eocd::train::{fit, Teacher};

fn main() -> eocd::Result<()> {
    let start = Instant::now();
    let run = match std::env::args().nth(1) {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let data = &run.data;
    let [n_train, n_val, n_test] = data.counts();
    let train = generate_split(data, 0, n_train)?;
    let val = generate_split(data, 1, n_val)?;
    let test = generate_split(data, 2, n_test)?;
    let cfg = run.train_config();
    let teacher = Teacher::from_config(&cfg)?;
    let student = Model::new(run.model.clone(), cfg.seed)?;
    let out = fit(student, &teacher, &train, &val, &cfg, &mut |r| {
        println!("{} elapsed={:.1}s", r.to_line(), start.elapsed().as_secs_f64())
    })?;
    let report = evaluate(&out.best, &test, cfg.batch_size)?;
    println!("best_epoch={} test {}", out.best_epoch, report.to_record());
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
