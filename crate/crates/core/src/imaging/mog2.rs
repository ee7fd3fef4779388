//! Per-pixel adaptive Gaussian mixture background model (MOG2 family).
//!
//! Each pixel holds up to `modes` Gaussian components with an isotropic
//! RGB variance. Components are kept sorted by weight. A pixel is
//! background when it matches a component inside the background set: the
//! heaviest components taken in order until their cumulative weight first
//! exceeds `background_ratio`. A match means squared distance below
//! `var_threshold` times the component variance.
//!
//! On update every weight decays by `1 - alpha`, the matched component gains
//! `alpha`, and components lighter than `alpha * complexity_reduction` are
//! dropped. The matched component's mean and variance move toward the
//! sample at rate `alpha / weight`. Unmatched samples spawn a component
//! (replacing the lightest one when full). Weights are renormalised to sum
//! to one after every update.

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

/// How the mixture is seeded before the first frame is classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    /// One component per pixel at the per-channel median over the batch.
    BatchMedian,
    /// One component per pixel at the first frame's value.
    FirstFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mog2Params {
    pub modes: usize,
    /// Defaults to `1 / min(batch_len, 100)`.
    pub learning_rate: Option<f64>,
    pub var_threshold: f64,
    pub background_ratio: f64,
    pub initial_variance: f64,
    pub min_variance: f64,
    /// Defaults to `5 * initial_variance`.
    pub max_variance: Option<f64>,
    pub complexity_reduction: f64,
    pub init: ModelInit,
    /// Frames at the start of a batch whose regions are suppressed.
    /// Defaults to 0 for `batch_median` and `ceil(1 / alpha)` for
    /// `first_frame`.
    pub burn_in: Option<usize>,
}

impl Default for Mog2Params {
    fn default() -> Self {
        Self {
            modes: 5,
            learning_rate: None,
            var_threshold: 16.0,
            background_ratio: 0.9,
            initial_variance: 15.0 * 15.0,
            min_variance: 4.0,
            max_variance: None,
            complexity_reduction: 0.05,
            init: ModelInit::BatchMedian,
            burn_in: None,
        }
    }
}

impl Mog2Params {
    pub fn alpha_for(&self, batch_len: usize) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| 1.0 / batch_len.clamp(1, 100) as f64)
    }

    pub fn burn_in_for(&self, alpha: f64) -> usize {
        self.burn_in.unwrap_or(match self.init {
            ModelInit::BatchMedian => 0,
            ModelInit::FirstFrame => (1.0 / alpha).ceil() as usize,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.modes == 0 || self.modes > 255 {
            return Err(format!("modes must be in 1..=255, got {}", self.modes));
        }
        if let Some(a) = self.learning_rate {
            if !(a > 0.0 && a <= 1.0) {
                return Err(format!("learning_rate must be in (0, 1], got {a}"));
            }
        }
        if !(self.background_ratio > 0.0 && self.background_ratio <= 1.0) {
            return Err(format!("background_ratio must be in (0, 1], got {}", self.background_ratio));
        }
        if !(self.var_threshold > 0.0 && self.initial_variance > 0.0 && self.min_variance > 0.0) {
            return Err("var_threshold, initial_variance and min_variance must be positive".into());
        }
        Ok(())
    }
}

/// Mixture state for one batch. Never shared across batches.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    width: u32,
    height: u32,
    k: usize,
    counts: Vec<u8>,
    weights: Vec<f64>,
    vars: Vec<f32>,
    means: Vec<[f32; 3]>,
    var_threshold: f32,
    background_ratio: f64,
    var_init: f32,
    var_min: f32,
    var_max: f32,
    prune_factor: f64,
}

impl MixtureModel {
    pub fn new(width: u32, height: u32, params: &Mog2Params) -> Self {
        let n = width as usize * height as usize;
        let k = params.modes;
        Self {
            width,
            height,
            k,
            counts: vec![0; n],
            weights: vec![0.0; n * k],
            vars: vec![0.0; n * k],
            means: vec![[0.0; 3]; n * k],
            var_threshold: params.var_threshold as f32,
            background_ratio: params.background_ratio,
            var_init: params.initial_variance as f32,
            var_min: params.min_variance as f32,
            var_max: params.max_variance.unwrap_or(5.0 * params.initial_variance) as f32,
            prune_factor: params.complexity_reduction,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Resets every pixel to a single unit-weight component at `background`.
    pub fn seed(&mut self, background: &RgbImage) {
        assert_eq!(background.dimensions(), (self.width, self.height));
        for (p, px) in background.pixels().enumerate() {
            let base = p * self.k;
            self.counts[p] = 1;
            self.weights[base] = 1.0;
            self.vars[base] = self.var_init;
            self.means[base] = px.0.map(|c| c as f32);
        }
    }

    pub fn mode_count(&self, x: u32, y: u32) -> usize {
        self.counts[(y * self.width + x) as usize] as usize
    }

    pub fn mode_weights(&self, x: u32, y: u32) -> &[f64] {
        let p = (y * self.width + x) as usize;
        &self.weights[p * self.k..p * self.k + self.counts[p] as usize]
    }

    /// Classifies `frame` against the current model, then updates the
    /// model with it. Returns the foreground mask (255 = foreground).
    pub fn apply(&mut self, frame: &RgbImage, alpha: f64) -> GrayImage {
        assert_eq!(frame.dimensions(), (self.width, self.height));
        let mut mask = GrayImage::new(self.width, self.height);
        for (p, (px, out)) in frame.pixels().zip(mask.pixels_mut()).enumerate() {
            let sample = px.0.map(|c| c as f32);
            let fg = self.update_pixel(p, sample, alpha);
            *out = Luma([if fg { 255 } else { 0 }]);
        }
        mask
    }

    fn update_pixel(&mut self, p: usize, x: [f32; 3], alpha: f64) -> bool {
        let k = self.k;
        let base = p * k;
        let mut n = self.counts[p] as usize;
        let decay = 1.0 - alpha;
        let prune = alpha * self.prune_factor;

        let mut background = false;
        let mut matched: Option<usize> = None;
        let mut cumulative = 0.0;
        for m in 0..n {
            let i = base + m;
            let in_background_set = cumulative <= self.background_ratio;
            cumulative += self.weights[i];
            if matched.is_none() {
                let d2 = dist2(&x, &self.means[i]);
                if d2 < self.var_threshold * self.vars[i] {
                    matched = Some(m);
                    background = in_background_set;
                }
            }
        }

        // decay, reward the match, prune negligible components
        let mut kept = 0;
        let mut new_match = None;
        for m in 0..n {
            let i = base + m;
            let mut w = decay * self.weights[i];
            if Some(m) == matched {
                w += alpha;
            } else if w < prune {
                continue;
            }
            let dst = base + kept;
            self.weights[dst] = w;
            self.vars[dst] = self.vars[i];
            self.means[dst] = self.means[i];
            if Some(m) == matched {
                new_match = Some(kept);
            }
            kept += 1;
        }
        n = kept;

        match new_match {
            Some(m) => {
                let i = base + m;
                let rho = (alpha / self.weights[i]).min(1.0) as f32;
                let mean = &mut self.means[i];
                let mut d2 = 0.0;
                for c in 0..3 {
                    let d = x[c] - mean[c];
                    mean[c] += rho * d;
                    d2 += d * d;
                }
                let v = self.vars[i] + rho * (d2 - self.vars[i]);
                self.vars[i] = v.clamp(self.var_min, self.var_max);
                // restore weight order
                let mut j = m;
                while j > 0 && self.weights[base + j] > self.weights[base + j - 1] {
                    self.swap(base + j, base + j - 1);
                    j -= 1;
                }
            }
            None => {
                let slot = if n < k { n } else { k - 1 };
                let i = base + slot;
                self.weights[i] = if n == 0 { 1.0 } else { alpha };
                self.means[i] = x;
                self.vars[i] = self.var_init;
                n = slot + 1;
                let mut j = slot;
                while j > 0 && self.weights[base + j] > self.weights[base + j - 1] {
                    self.swap(base + j, base + j - 1);
                    j -= 1;
                }
            }
        }

        let total: f64 = self.weights[base..base + n].iter().sum();
        if total > 0.0 {
            for w in &mut self.weights[base..base + n] {
                *w /= total;
            }
        }
        self.counts[p] = n as u8;
        !background
    }

    fn swap(&mut self, a: usize, b: usize) {
        self.weights.swap(a, b);
        self.vars.swap(a, b);
        self.means.swap(a, b);
    }
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Per-pixel, per-channel lower median over frames of equal size.
pub fn median_image(frames: &[&RgbImage]) -> RgbImage {
    assert!(!frames.is_empty());
    let (w, h) = frames[0].dimensions();
    let mid = (frames.len() - 1) / 2;
    let mut scratch = vec![0u8; frames.len()];
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            for (s, f) in scratch.iter_mut().zip(frames) {
                *s = f.get_pixel(x, y).0[c];
            }
            let (_, m, _) = scratch.select_nth_unstable(mid);
            px.0[c] = *m;
        }
    }
    out
}
