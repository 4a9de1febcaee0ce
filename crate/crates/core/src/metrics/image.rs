use crate::error::{shape_err, Error, Result};
use crate::voxel::DenseGrid;

/// SSIM stabilizer constants.
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 8;

/// Row-major `height × width × channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || channels == 0 {
            return Err(shape_err!("{} values for a {height}×{width}×{channels} image", data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, channels: 1, data }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Two images compared at dynamic range `range`.
#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub x: &'a Image,
    pub y: &'a Image,
    pub range: f64,
}

impl<'a> ImagePair<'a> {
    pub fn new(x: &'a Image, y: &'a Image, range: f64) -> Result<Self> {
        if (x.height, x.width, x.channels) != (y.height, y.width, y.channels) {
            return Err(Error::Domain(format!("image shapes {}×{}×{} and {}×{}×{}", x.height, x.width, x.channels, y.height, y.width, y.channels)));
        }
        if !(range > 0.0) {
            return Err(Error::Domain(format!("dynamic range {range} must be positive")));
        }
        Ok(Self { x, y, range })
    }
}

/// SSIM of one window from its moments.
pub fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over every placement of a `window × window` uniform window and
/// every channel.
pub fn ssim(pair: &ImagePair<'_>, window: usize, k1: f64, k2: f64) -> Result<f64> {
    let (x, y) = (pair.x, pair.y);
    if window == 0 || window > x.height || window > x.width {
        return Err(Error::Domain(format!("window {window} for a {}×{} image", x.height, x.width)));
    }
    let c1 = (k1 * pair.range).powi(2);
    let c2 = (k2 * pair.range).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..x.channels {
        for i in 0..=x.height - window {
            for j in 0..=x.width - window {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in i..i + window {
                    for v in j..j + window {
                        let (a, b) = (x.get(u, v, c), y.get(u, v, c));
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cxy = sxy / n - mx * my;
                total += ssim_from_moments(mx, my, vx, vy, cxy, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the default window and constants.
pub fn ssim_default(pair: &ImagePair<'_>) -> Result<f64> {
    ssim(pair, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

/// Occupancy sums of `channel` along x, y and z, divided by the resolution,
/// so values lie in `[0, 1]` for occupancy inputs.
pub fn axis_projections(g: &DenseGrid, channel: usize) -> [Image; 3] {
    let r = g.resolution();
    let mut views = [vec![0.0; r * r], vec![0.0; r * r], vec![0.0; r * r]];
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                let v = g.get(a, b, c, channel) / r as f64;
                views[0][b * r + c] += v;
                views[1][a * r + c] += v;
                views[2][a * r + b] += v;
            }
        }
    }
    views.map(|data| Image { height: r, width: r, channels: 1, data })
}

/// Mean SSIM of the three axis projections of two grids at range 1.
pub fn projection_ssim(a: &DenseGrid, b: &DenseGrid, channel: usize) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(Error::Domain(format!("grids at {}³ and {}³", a.resolution(), b.resolution())));
    }
    let (pa, pb) = (axis_projections(a, channel), axis_projections(b, channel));
    let window = SSIM_WINDOW.min(a.resolution());
    let mut s = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        s += ssim(&ImagePair::new(x, y, 1.0)?, window, SSIM_K1, SSIM_K2)?;
    }
    Ok(s / 3.0)
}
