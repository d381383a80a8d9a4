use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nafchaos::export;
use nafchaos::harness::{self, Controller};
use nafchaos::pipeline::{self, Config};
use nafchaos::{GumowskiMira, RawState, Region};

use crate::error::{io_err, CliError, Result};
use crate::manifest::{self, RunManifest};

pub const REPORT_FILE: &str = "report.toml";
pub const REGION_FILE: &str = "region.toml";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SURFACE_FILE: &str = "surface.csv";

pub fn checkpoint_file(run: usize) -> String {
    format!("controller_run{run}.txt")
}

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub struct Session {
    pub config: Config,
    pub out: PathBuf,
    manifest: RunManifest,
}

impl Session {
    pub fn open(command: &str, common: &Common) -> Result<Self> {
        let started = manifest::now_unix();
        let mut config = match &common.config {
            Some(p) => manifest::parse_config(&read(p)?)?,
            None => Config::default(),
        };
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        config.check()?;
        fs::create_dir_all(&common.out).map_err(io_err(&common.out))?;
        let mut manifest = RunManifest::new(command, &config, started);
        if let Some(p) = &common.config {
            manifest.args.insert("config".into(), p.display().to_string());
        }
        Ok(Session {
            config,
            out: common.out.clone(),
            manifest,
        })
    }

    pub fn map(&self) -> GumowskiMira {
        GumowskiMira::new(self.config.system)
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.manifest.args.insert(key.into(), value.to_string());
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(io_err(&path))?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(io_err(&path))?;
        self.manifest.outputs.push(name.into());
        Ok(BufWriter::new(f))
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix = manifest::now_unix();
        let text = self.manifest.to_toml();
        let path = self.out.join(manifest::FILE_NAME);
        fs::write(&path, text).map_err(io_err(&path))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn load_controller(path: &Path) -> Result<Controller> {
    Ok(Controller::from_text(&read(path)?)?)
}

pub fn estimate(common: &Common) -> Result<()> {
    let mut s = Session::open("estimate", common)?;
    let est = pipeline::estimate(&s.map(), &s.config.estimate)?;
    s.write(REPORT_FILE, &est.report.to_toml())?;
    let region = toml::to_string(&est.region).expect("region serializes");
    s.write(REGION_FILE, &region)?;
    s.finish()
}

pub fn train(common: &Common, region: Option<&Path>) -> Result<()> {
    let mut s = Session::open("train", common)?;
    let region_path = region.map(Path::to_path_buf).unwrap_or_else(|| s.out.join(REGION_FILE));
    if !region_path.exists() {
        return Err(CliError::MissingRegion(region_path));
    }
    let region: Region = toml::from_str(&read(&region_path)?)
        .map_err(|e| nafchaos::Error::InvalidConfig(vec![format!("{}: {}", region_path.display(), e.message())]))?;
    s.arg("region", region_path.display());

    let result = harness::run_experiment(&s.map(), &region, &s.config.train, &s.config.experiment)?;
    for f in &result.failures {
        eprintln!("warning: run {} (seed {}) failed: {}", f.run, f.seed, f.error);
        s.arg(&format!("failed_run{}", f.run), format!("seed {}: {}", f.seed, f.error));
    }
    if result.runs.is_empty() {
        let f = result.failures.into_iter().next().expect("at least one run");
        return Err(f.error.into());
    }
    export::write_learning_curve(s.create(CURVE_FILE)?, &result)?;
    for r in &result.runs {
        s.write(&checkpoint_file(r.run), &r.controller.to_text())?;
    }
    s.finish()
}

pub fn evaluate(common: &Common, checkpoint: &Path, x0: Option<Vec<f64>>, steps: Option<usize>) -> Result<()> {
    let mut s = Session::open("evaluate", common)?;
    let controller = load_controller(checkpoint)?;
    let x0 = RawState(x0.unwrap_or_else(|| s.config.evaluate.x0.clone()));
    let steps = steps.unwrap_or(s.config.evaluate.steps);
    s.arg("checkpoint", checkpoint.display());
    s.arg("x0", format!("{:?}", x0.0));
    s.arg("steps", steps);
    let (rows, err) = harness::evaluate(&s.map(), &controller, &x0, steps);
    if let Some(nafchaos::Error::DimensionMismatch { .. }) = err {
        return Err(err.unwrap().into());
    }
    export::write_trajectory(s.create(TRAJECTORY_FILE)?, &rows)?;
    s.finish()?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn surface(common: &Common, checkpoint: &Path, resolution: Option<usize>) -> Result<()> {
    let mut s = Session::open("surface", common)?;
    let controller = load_controller(checkpoint)?;
    let resolution = resolution.unwrap_or(s.config.surface.grid_resolution);
    s.arg("checkpoint", checkpoint.display());
    s.arg("resolution", resolution);
    let points = harness::control_surface(&controller, resolution)?;
    export::write_surface(s.create(SURFACE_FILE)?, &points)?;
    s.finish()
}
