use std::path::PathBuf;

use relpos::geometry::Vec3;
use relpos::keypoints::{check_observability, KeypointCandidate, Observability};
use relpos::sim::sample_trajectories;

use crate::{io_input, load_config, CliError};

#[derive(clap::Args)]
pub struct Args {
    /// CSV of relative positions with header `t,x,y,z`, one row per epoch.
    /// Without it a trajectory is drawn from the configuration.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Epochs per observability window; defaults to the configured window
    /// size.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(serde::Deserialize)]
struct Row {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

fn read_trace(path: &PathBuf) -> Result<Vec<(f64, Vec3)>, CliError> {
    let file = std::fs::File::open(path).map_err(io_input(path))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let values = [row.t, row.x, row.y, row.z];
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CliError::Input(format!("{}: non-finite value in row {}", path.display(), line + 1)));
        }
        out.push((row.t, Vec3::new(row.x, row.y, row.z)));
    }
    if out.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(CliError::Input(format!("{}: timestamps must increase", path.display())));
    }
    Ok(out)
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let config = load_config(args.config.as_ref())?;
    let epochs = match &args.trace {
        Some(path) => read_trace(path)?,
        None => {
            let (_, truth) = sample_trajectories(&config.trajectory, config.noise.imu_rate_hz, args.seed, args.trial)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let stride = config.noise.imu_per_range().map_err(|e| CliError::Input(e.to_string()))?;
            (0..truth.samples()).step_by(stride).map(|n| (truth.times[n], truth.relative_position(n))).collect()
        }
    };
    if epochs.is_empty() {
        return Err(CliError::Input("trace has no epochs".into()));
    }
    let window = args.window.unwrap_or(config.noise.window_size);
    if window == 0 {
        return Err(CliError::Input("--window must be positive".into()));
    }
    if epochs.len() < window {
        return Err(CliError::Input(format!("trace has {} epochs, fewer than the window of {window}", epochs.len())));
    }

    let candidates: Vec<KeypointCandidate> = epochs
        .iter()
        .enumerate()
        .map(|(i, (t, r))| KeypointCandidate::new(i, *t, r))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(format!("epoch has no line of sight: {e}")))?;

    println!("t,verdict,s1,s2,s3,s4,s5,s6");
    let mut observable = 0;
    let total = epochs.len() - window + 1;
    for end in window - 1..epochs.len() {
        let report = check_observability(&candidates[end + 1 - window..=end]);
        if report.verdict == Observability::Observable {
            observable += 1;
        }
        let sv: Vec<String> = (0..6).map(|i| format!("{:e}", report.singular_values.get(i).copied().unwrap_or(0.0))).collect();
        println!("{},{},{}", epochs[end].0, report.verdict, sv.join(","));
    }
    eprintln!("observable at {observable} of {total} epochs ({:.1}%)", 100.0 * observable as f64 / total as f64);
    Ok(())
}
