//! The file-backed stages behind the command line, run in a temporary
//! directory: synth, ingest, build, train, eval, report.
//!
//! cargo run --release --example pipeline_stages

use ictp::config::RunConfig;
use ictp::pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig::from_toml(&format!(
        r#"
        output_dir = "{}"
        seeds = [0, 1]
        [synth]
        count = 4
        length = 720
        [model]
        d_model = 16
        n_heads = 2
        [train]
        max_epochs = 3
        "#,
        dir.path().display()
    ))?;
    cfg.validate()?;

    // Evaluating before anything exists fails with a missing-input error.
    let err = pipeline::load_store(&cfg).unwrap_err();
    println!("before ingest: {err} (exit code {})", err.exit_code());

    pipeline::synth_stage(&cfg)?;
    let store = pipeline::ingest_stage(&cfg)?;
    for &seed in &cfg.seeds {
        let stats = pipeline::build_stage(&cfg, &store, seed)?;
        let rec = pipeline::train_stage(&cfg, seed, |_| {})?;
        pipeline::eval_stage(&cfg, &store, seed)?;
        println!("seed {seed}: {} samples, best epoch {}", stats.emitted, rec.best_epoch);
    }
    println!("\n{}", pipeline::report_stage(&cfg)?);

    let mut files: Vec<_> = walk(dir.path());
    files.sort();
    for f in files {
        println!("{}", f.strip_prefix(dir.path())?.display());
    }
    Ok(())
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
