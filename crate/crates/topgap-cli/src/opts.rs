//! Option plumbing shared by the subcommands: config-file merging and
//! exact fraction parsing for perturbation radii.

use topgap_core::{Error, Result};

/// Parses an l-inf radius. `8/255` is evaluated as an exact rational so
/// reports never drift from the flag text; plain decimals also work.
pub fn parse_radius(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((num, den)) => {
            let n: u32 = num
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fraction numerator in '{s}'")))?;
            let d: u32 = den
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fraction denominator in '{s}'")))?;
            if d == 0 {
                return Err(Error::Config(format!("zero denominator in '{s}'")));
            }
            n as f64 / d as f64
        }
        None => s
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("cannot parse radius '{s}'")))?,
    };
    if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
        return Err(Error::Config(format!("radius must be in [0,1], got {s}")));
    }
    Ok(v)
}

/// Merge rule for the config file: an explicit flag wins, the file fills
/// the gaps, and the built-in default comes last.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Like [`pick`] but with no default: the value must come from the flag or
/// the file.
pub fn need<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| Error::Config(format!("--{name} is required (flag or config file)")))
}

/// Deserializes the `--config` JSON into a command's option set, rejecting
/// unknown fields so typos fail loudly instead of silently using defaults.
pub fn from_file<T: serde::de::DeserializeOwned + Default>(file: Option<serde_json::Value>) -> Result<T> {
    match file {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v)
            .map_err(|e| Error::Config(format!("config file does not match this command: {e}"))),
    }
}
