//! Assemble in-context samples: m demonstrations of the query's task from the
//! same training series, followed by the query.
//!
//! cargo run --example build_context

use ictp::context::{build_ictp_dataset, DemoOptions};
use ictp::series::{SeriesStore, Split};
use ictp::synth::{generate_dataset, SynthSpec};
use ictp::task::{TaskKind, Token, WindowSpec};

fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| match (t.masked, t.answer) {
            (true, _) => '_',
            (false, true) => 'a',
            (false, false) => '.',
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = generate_dataset(&SynthSpec { count: 2, ..Default::default() }, "synth")?;
    let store = SeriesStore::from_datasets(&[raw], serde_json::Value::Null)?;
    let train = store.split(Split::Train);
    let w = WindowSpec::from_horizon(12)?;

    let (data, stats) = build_ictp_dataset(
        &train,
        &[TaskKind::Forecast, TaskKind::Impute],
        w,
        2,
        24,
        7,
        DemoOptions::default(),
    )?;
    println!("{} samples, {stats:?}", data.len());
    println!("legend: '.' observed, 'a' demonstration answer, '_' masked\n");

    for s in data.samples.iter().take(4) {
        println!("{} query at {:?}", s.task, s.provenance.query.global());
        for d in &s.provenance.demos {
            println!("  demo at {:?}", d.global());
        }
        println!("  {}", render(&s.tokens));
        println!("  target: {} values\n", s.target.len());
    }

    let mut buf = Vec::new();
    data.write_jsonl(&mut buf)?;
    let first = String::from_utf8_lossy(&buf);
    println!("JSONL header: {}...", &first[..first.find('\n').unwrap_or(0).min(120)]);
    Ok(())
}
