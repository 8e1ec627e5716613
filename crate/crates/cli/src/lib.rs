//! Subcommand implementations behind the `semslam` binary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use semslam_core::eval::{ate_rmse, EvalRecord, Trajectory};
use semslam_core::pipeline::{map_mesh_ply, map_records, run_pipeline, Mode, RunConfig, Solution};
use semslam_core::sim::{simulate, Dataset, SceneSpec};
use thiserror::Error;

pub const REPORT_FILE: &str = "report.json";
pub const MESH_FILE: &str = "map.ply";
pub const RECORDS_FILE: &str = "map_records.ndjson";

/// Failures mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<semslam_core::Error> for CliError {
    fn from(e: semslam_core::Error) -> Self {
        use semslam_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::InvalidSpec(_) => CliError::Usage(e.to_string()),
            E::NumericalFailure(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `simulate`: scene spec (TOML) to dataset directory.
pub fn cmd_simulate(spec: &Path, out: &Path) -> Result<(), CliError> {
    let spec = SceneSpec::from_toml(&read_text(spec)?)?;
    let (_, ds) = simulate(&spec)?;
    ds.write(out)?;
    log::info!("wrote {} keyframes to {}", ds.frames.len(), out.display());
    Ok(())
}

/// `solve`: runs the back-end and writes the solution and a JSON report. The
/// solution is written even when optimization fails, before the error is
/// returned.
pub fn cmd_solve(dataset: &Path, mode: Option<Mode>, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_toml(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let ds = Dataset::read(dataset)?;
    let run = run_pipeline(&ds, &cfg)?;
    run.solution.write(out)?;
    let report = serde_json::to_string_pretty(&run.report).expect("report serializes");
    write_file(&out.join(REPORT_FILE), &(report + "\n"))?;
    if let Some(e) = run.failure {
        return Err(e.into());
    }
    if !run.report.converged {
        return Err(CliError::Numerical(format!("optimizer did not converge ({:?})", run.report.termination)));
    }
    Ok(())
}

/// `eval`: ATE of a solution against the dataset's ground truth.
pub fn cmd_eval(solution: &Path, dataset: &Path, append: Option<&Path>) -> Result<EvalRecord, CliError> {
    let sol = Solution::read(solution)?;
    let ds = Dataset::read(dataset)?;
    let gt = ds.gt_trajectory().ok_or_else(|| CliError::Data("dataset has no ground-truth poses".into()))?;
    let gt = Trajectory::new(gt)?;
    let est = sol.trajectory()?;
    let n_keyframes = est.entries().iter().filter(|(id, _)| gt.entries().iter().any(|(g, _)| g == id)).count();
    let record = EvalRecord {
        mode: sol.mode.to_string(),
        ate_rmse_cm: ate_rmse(&est, &gt)? * 100.0,
        n_keyframes,
        seed: sol.seed.or(ds.seed).unwrap_or(0),
    };
    if let Some(path) = append {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        writeln!(f, "{}", record.to_json_line()).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    MapMesh,
    Records,
}

/// `export`: writes the map next to the solution unless `out` is given.
pub fn cmd_export(solution: &Path, format: ExportFormat, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let sol = Solution::read(solution)?;
    let (text, default_name) = match format {
        ExportFormat::MapMesh => (map_mesh_ply(&sol), MESH_FILE),
        ExportFormat::Records => (map_records(&sol), RECORDS_FILE),
    };
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| solution.join(default_name));
    write_file(&path, &text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use semslam_core::Error;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let code = |e: Error| CliError::from(e).exit_code();
        assert_eq!(code(Error::InvalidArgument("x".into())), 1);
        assert_eq!(code(Error::InvalidSpec("x".into())), 1);
        assert_eq!(code(Error::Format { line: 3, message: "x".into() }), 2);
        assert_eq!(code(Error::Io("x".into())), 2);
        assert_eq!(code(Error::NumericalFailure("x".into())), 3);
    }
}
