use crate::sim::TaskSpec;

pub const RASTER_SIZE: usize = 64;

const OBJECT_RADIUS: f64 = 0.04;
const EE_RADIUS: f64 = 0.03;

/// Top-down grayscale view of a raw observation vector, row-major with row 0
/// at the top of the workspace (y = 1). Objects are drawn as discs of
/// decreasing intensity by index; the end effector on top at 1.0 when open
/// and 0.9 when closed.
pub fn render(spec: &TaskSpec, obs: &[f64]) -> Vec<f64> {
    let n = RASTER_SIZE;
    let mut img = vec![0.0; n * n];
    let mut disc = |cx: f64, cy: f64, r: f64, v: f64| {
        for i in 0..n {
            let y = 1.0 - (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                    img[i * n + j] = v;
                }
            }
        }
    };
    for k in 0..spec.n_objects() {
        let (x, y) = (obs[4 + 2 * k], obs[5 + 2 * k]);
        disc(x, y, OBJECT_RADIUS, 0.6 - 0.2 * k as f64);
    }
    let ee_val = if obs[3] >= 0.0 { 1.0 } else { 0.9 };
    disc(obs[0], obs[1], EE_RADIUS, ee_val);
    img
}
