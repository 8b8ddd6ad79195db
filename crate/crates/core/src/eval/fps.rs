use std::time::Instant;

use crate::error::{Error, Result};

/// Measures how long a unit of work takes, in seconds.
pub trait Timer {
    fn measure(&mut self, work: &mut dyn FnMut() -> Result<()>) -> Result<f64>;
}

/// Monotonic wall clock.
#[derive(Clone, Copy, Debug, Default)]
pub struct WallTimer;

impl Timer for WallTimer {
    fn measure(&mut self, work: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let t0 = Instant::now();
        work()?;
        Ok(t0.elapsed().as_secs_f64())
    }
}

/// Runs the work and reports a fixed duration per call.
#[derive(Clone, Copy, Debug)]
pub struct FakeTimer {
    pub seconds_per_call: f64,
}

impl FakeTimer {
    /// A timer under which `images` calls take `total_seconds` in total.
    pub fn spread(total_seconds: f64, images: usize) -> Self {
        FakeTimer {
            seconds_per_call: total_seconds / images as f64,
        }
    }
}

impl Timer for FakeTimer {
    fn measure(&mut self, work: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        work()?;
        Ok(self.seconds_per_call)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FpsConfig {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for FpsConfig {
    fn default() -> Self {
        FpsConfig { warmup: 2, repeats: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    pub images: usize,
    /// FPS of each repetition.
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Images per second: `images / T` where `T` sums the timed per-image
/// passes. Warm-up passes run untimed before the first repetition.
pub fn fps_benchmark(
    images: usize,
    mut pass: impl FnMut(usize) -> Result<()>,
    timer: &mut dyn Timer,
    cfg: FpsConfig,
) -> Result<FpsReport> {
    if images == 0 {
        return Err(Error::Usage("FPS benchmark needs at least one image".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::Usage("FPS benchmark needs at least one repetition".into()));
    }
    for i in 0..cfg.warmup {
        pass(i % images)?;
    }
    let mut runs = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let mut total = 0.0;
        for i in 0..images {
            total += timer.measure(&mut || pass(i))?;
        }
        if total <= 0.0 {
            return Err(Error::Usage(
                "measured zero elapsed time; timer resolution too coarse".into(),
            ));
        }
        runs.push(images as f64 / total);
    }
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / runs.len() as f64;
    Ok(FpsReport {
        images,
        runs,
        mean,
        std: var.sqrt(),
    })
}
