pub mod bench;
pub mod check;
pub mod gradcheck;
pub mod train;
pub mod weights;

use std::path::PathBuf;

use ripple_core::tensor::DType;

use crate::config::Settings;
use crate::run::RunDir;
use crate::CliError;

pub struct Context {
    pub settings: Settings,
    pub seed: u64,
    pub dtype: DType,
    pub threads: usize,
    pub out: PathBuf,
}

impl Context {
    /// Reads the global settings and sizes the worker pool.
    pub fn new(settings: Settings) -> Result<Self, CliError> {
        let ctx = Self {
            seed: settings.global("seed")?,
            dtype: settings.global("dtype")?,
            threads: settings.global("threads")?,
            out: PathBuf::from(settings.raw("global", "out")),
            settings,
        };
        if ctx.threads > 0 {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(ctx.threads).build_global();
        }
        Ok(ctx)
    }

    /// Whether library calls may use their multi-threaded paths.
    pub fn parallel(&self) -> bool {
        self.threads != 1
    }

    /// Creates the run directory and stores the effective configuration.
    pub fn start(&self, command: &str) -> Result<RunDir, CliError> {
        let mut dir = RunDir::create(&self.out, command)?;
        dir.write("config.ini", self.settings.to_ini())?;
        Ok(dir)
    }
}

pub fn finish(dir: RunDir) -> Result<(), CliError> {
    let path = dir.finish()?;
    println!("outputs: {}", path.display());
    Ok(())
}
