//! Train and evaluate on a generated corpus, printing the variant table and
//! token localization.

use std::time::Instant;

use multiblade::corpus::{encode_all, generate_synthetic, Split, SyntheticSpec, Vocabulary};
use multiblade::model::BiasOffset;
use multiblade::pipeline::{run_pipeline, score_documents, trigger_localization, variants_table, PipelineConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synthetic-run".into());
    let start = Instant::now();
    let synth = generate_synthetic(&SyntheticSpec::default())?;
    let config = match std::env::args().nth(2) {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)?,
        None => PipelineConfig::synthetic(),
    };
    let outcome = run_pipeline(&synth.corpus, &config, out.as_ref(), |m| {
        eprintln!("[{:>6.1}s] {m}", start.elapsed().as_secs_f64())
    })?;
    print!("{}", variants_table(&outcome.variants));
    let vocab = Vocabulary::load(&std::path::Path::new(&out).join("vocab.txt"))?;
    let test = encode_all(&synth.corpus.test, &vocab);
    let inf = score_documents(&outcome.finetuned, &test, &BiasOffset::default())?;
    let (hits, total) = trigger_localization(&inf, &test, &synth.trigger_map, Split::Test, |c| synth.trigger_len(c));
    println!("localization {hits}/{total} = {:.3}", hits as f64 / total.max(1) as f64);
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
