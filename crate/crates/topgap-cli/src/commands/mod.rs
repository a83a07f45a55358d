//! Subcommand implementations. Every command resolves its options from
//! flags over config-file values over defaults, runs, and finishes by
//! writing a hashed run manifest next to its outputs.

mod eval;
mod gen_data;
mod sweep;
mod train;

use topgap_core::Result;

#[derive(clap::Subcommand)]
pub enum Cmd {
    /// Generate the synthetic shapes dataset: a biased train split and a
    /// decorrelated test split, with exact masks.
    GenData(gen_data::GenDataOpts),
    /// Train a model; saves the best-validation checkpoint and the log.
    Train(train::TrainOpts),
    /// Evaluate a checkpoint: clean accuracy, adversarial robustness,
    /// receptive-field distance, heatmaps, IoU, or attack distance.
    Eval(eval::EvalOpts),
    /// Fine-tune or train one model per pool size and report how the class
    /// map's activation mass follows k.
    Sweep(sweep::SweepOpts),
}

pub fn dispatch(cmd: Cmd, file: Option<serde_json::Value>, threads: usize) -> Result<()> {
    match cmd {
        Cmd::GenData(o) => gen_data::run(o, file, threads),
        Cmd::Train(o) => train::run(o, file, threads),
        Cmd::Eval(o) => eval::run(o, file, threads),
        Cmd::Sweep(o) => sweep::run(o, file, threads),
    }
}
