//! Command-line front end: argument parsing, the six verbs and PNG overlays.

pub mod args;
pub mod commands;
pub mod render;

use glimpsekit::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if e.is_data() || matches!(e, Error::LabelOutOfRange { .. }) {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

/// Caps the global rayon pool at `GLIMPSEKIT_THREADS` when set.
pub fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("GLIMPSEKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("GLIMPSEKIT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Usage(e.to_string()))
}

pub fn run(cli: args::Cli) -> Result<i32, Error> {
    use args::Command::*;
    match cli.command {
        Synth { common } => commands::synth(&common)?,
        Train { common, resume, overfit, baseline } => commands::train(&common, &commands::TrainOptions { resume, overfit, baseline })?,
        Eval { checkpoint, common, ensemble } => commands::eval(&checkpoint, ensemble.as_deref(), &common)?,
        Gradcheck { common, seeds, flip_sampler_sign } => {
            if !commands::gradcheck(&common, seeds, flip_sampler_sign)? {
                return Ok(EXIT_NUMERIC);
            }
        }
        Visualize { checkpoint, common, samples, gt } => commands::visualize(&checkpoint, &common, samples, gt)?,
        Params { common } => commands::params(&common)?,
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Usage("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::BadMagic { expected: 1, found: 2 }), EXIT_DATA);
        assert_eq!(exit_code(&Error::NonFinite { op: "loss".into() }), EXIT_NUMERIC);
    }
}
