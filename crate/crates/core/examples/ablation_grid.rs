//! Runs the ablation studies at toy scale on a synthetic corpus and prints
//! the comparison tables.
//!
//! cargo run --release --example ablation_grid [study]

use atfuse::cli::{cmd_ablate, Study, ABLATION_HEADER};
use atfuse::config::RunConfig;
use atfuse::image::{synthetic_corpus, write_corpus};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let study: Study = std::env::args().nth(1).as_deref().unwrap_or("all").parse()?;
    let dir = std::env::temp_dir().join("atfuse_ablation_example");
    let corpus = dir.join("corpus");
    write_corpus(&corpus, &synthetic_corpus(4, 32, 0))?;

    let cfg = RunConfig::from_text(
        "model.shallow_channels = 8\n\
         model.embed_dim = 16\n\
         model.mlp_hidden = 32\n\
         train.epochs = 10\n\
         train.patch_size = 16\n\
         train.patches_per_epoch = 16\n\
         train.batch_size = 8\n",
    )?;
    let results = cmd_ablate(study, &cfg, &corpus, &dir.join("runs"))?;
    println!("{ABLATION_HEADER}");
    for r in &results {
        println!("{}", r.csv_line());
    }
    println!("tables written to {}", dir.join("runs").display());
    Ok(())
}
