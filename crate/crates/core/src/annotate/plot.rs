//! Scatter-plot rasterization for the VLM scoring backend.

use crate::sim::Image;

pub const PLOT_WIDTH: usize = 256;
pub const PLOT_HEIGHT: usize = 128;

/// Rasterize one arm's distance trace as a grayscale scatter plot: time on
/// x over 0..frame count, distance on y over 0..max distance, 2×2-pixel
/// dots on a black background with a one-pixel axis frame. Deterministic
/// function of the trace.
pub fn render_scatter_plot(trace: &[f64]) -> Image {
    let mut img = Image::new(PLOT_WIDTH, PLOT_HEIGHT);
    for x in 0..PLOT_WIDTH {
        img.max_at(x, PLOT_HEIGHT - 1, 0.25);
    }
    for y in 0..PLOT_HEIGHT {
        img.max_at(0, y, 0.25);
    }
    if trace.is_empty() {
        return img;
    }
    let max_d = trace.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
    let n = trace.len();
    for (t, &d) in trace.iter().enumerate() {
        let x = if n == 1 { 0 } else { (t as f64 / (n - 1) as f64 * (PLOT_WIDTH - 2) as f64) as usize };
        let y_up = (d / max_d * (PLOT_HEIGHT - 2) as f64) as usize;
        let y = PLOT_HEIGHT - 2 - y_up.min(PLOT_HEIGHT - 2);
        for dy in 0..2 {
            for dx in 0..2 {
                let px = (x + dx).min(PLOT_WIDTH - 1);
                let py = (y + dy).min(PLOT_HEIGHT - 1);
                img.max_at(px, py, 1.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let trace: Vec<f64> = (0..100).map(|t| (t as f64 * 0.01).sin().abs()).collect();
        let a = render_scatter_plot(&trace);
        let b = render_scatter_plot(&trace);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.w, PLOT_WIDTH);
        assert_eq!(a.h, PLOT_HEIGHT);
    }

    #[test]
    fn dots_present_for_nonzero_trace() {
        let img = render_scatter_plot(&[0.0, 0.5, 1.0]);
        assert!(img.pixels.iter().filter(|&&p| p == 1.0).count() >= 4);
    }
}
