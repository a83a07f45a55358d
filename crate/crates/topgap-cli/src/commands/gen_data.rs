//! `topgap gen-data`: synthesize the shapes dataset to disk.

use crate::manifest::{files_under, Recorder};
use crate::opts::{from_file, pick};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use topgap_core::data::{gen_shapes, save_dataset, BackgroundKind, ShapesConfig};
use topgap_core::Result;

#[derive(clap::Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenDataOpts {
    /// Train-split size; the decorrelated test split gets a quarter.
    #[arg(long)]
    count: Option<usize>,
    /// Image edge length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Number of shape classes (2..=4).
    #[arg(long)]
    classes: Option<usize>,
    /// P(background texture matches the label) on the train split.
    #[arg(long)]
    bias: Option<f64>,
    /// Object area bounds as fractions of the image.
    #[arg(long)]
    area_min: Option<f64>,
    #[arg(long)]
    area_max: Option<f64>,
    /// Background family: striped textures (the bias carrier) or noise.
    #[arg(long, value_parser = parse_background)]
    background: Option<BackgroundKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives train/, test/, and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_background(s: &str) -> std::result::Result<BackgroundKind, String> {
    match s {
        "textures" => Ok(BackgroundKind::Textures),
        "noise" => Ok(BackgroundKind::Noise),
        other => Err(format!("unknown background '{other}' (use textures|noise)")),
    }
}

#[derive(Debug, Serialize)]
struct Resolved {
    shapes: ShapesConfig,
    out: PathBuf,
}

fn resolve(o: GenDataOpts, file: Option<serde_json::Value>) -> Result<Resolved> {
    let f: GenDataOpts = from_file(file)?;
    let d = ShapesConfig::default();
    let shapes = ShapesConfig {
        count: pick(o.count, f.count, d.count),
        image_size: pick(o.size, f.size, d.image_size),
        num_classes: pick(o.classes, f.classes, d.num_classes),
        area: (
            pick(o.area_min, f.area_min, d.area.0),
            pick(o.area_max, f.area_max, d.area.1),
        ),
        background: pick(o.background, f.background, d.background),
        bias: pick(o.bias, f.bias, d.bias),
        seed: pick(o.seed, f.seed, d.seed),
    };
    shapes.validate()?;
    Ok(Resolved {
        shapes,
        out: pick(o.out, f.out, PathBuf::from(".")),
    })
}

pub fn run(o: GenDataOpts, file: Option<serde_json::Value>, threads: usize) -> Result<()> {
    let r = resolve(o, file)?;
    let mut rec = Recorder::new("gen-data", &r, vec![r.shapes.seed], threads, &r.out)?;

    let (train, test) = gen_shapes(&r.shapes)?;
    log::info!(
        "generated {} train / {} test images at {}px",
        train.len(),
        test.len(),
        r.shapes.image_size
    );
    let train_dir = r.out.join("train");
    let test_dir = r.out.join("test");
    save_dataset(&train, &train_dir)?;
    save_dataset(&test, &test_dir)?;
    rec.add_all(&files_under(&train_dir)?);
    rec.add_all(&files_under(&test_dir)?);

    let manifest = rec.finish()?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_generator_defaults() {
        let r = resolve(GenDataOpts::default(), None).unwrap();
        assert_eq!(r.shapes, ShapesConfig::default());
        assert_eq!(r.out, PathBuf::from("."));
    }

    #[test]
    fn flags_override_config_file() {
        let file = serde_json::json!({"count": 100, "bias": 0.5});
        let mut o = GenDataOpts::default();
        o.count = Some(200);
        let r = resolve(o, Some(file)).unwrap();
        assert_eq!(r.shapes.count, 200);
        assert_eq!(r.shapes.bias, 0.5);
    }

    #[test]
    fn invalid_bias_is_a_config_error() {
        let mut o = GenDataOpts::default();
        o.bias = Some(1.5);
        let err = resolve(o, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let file = serde_json::json!({"countt": 100});
        let err = resolve(GenDataOpts::default(), Some(file)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
