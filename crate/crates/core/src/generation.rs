//! Image grids built from swapped, interpolated or sampled codes.
//!
//! All grids decode the unspecified code from the posterior mean, so the
//! same inputs always give the same pixels.

use std::path::{Path, PathBuf};

use cyclevae_autograd::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image_io::{write_image, ImageFormat};
use crate::model::{standard_normal, ModelParams};

/// `rows x cols` generated cells plus optional source images shown above
/// the columns (`header_row`, one per column) and left of the rows
/// (`header_col`, one per row).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    cells: Vec<f32>,
    header_row: Option<Vec<f32>>,
    header_col: Option<Vec<f32>>,
}

impl ImageGrid {
    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Generated cell `(r, c)`, headers excluded.
    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        assert!(r < self.rows && c < self.cols, "cell ({r}, {c}) outside {}x{}", self.rows, self.cols);
        let n = self.image_len();
        let k = r * self.cols + c;
        &self.cells[k * n..(k + 1) * n]
    }

    /// Rows and columns of the rendered layout, headers included.
    pub fn layout_dims(&self) -> (usize, usize) {
        (
            self.rows + self.header_row.is_some() as usize,
            self.cols + self.header_col.is_some() as usize,
        )
    }

    /// Planar `[channels, H, W]` canvas with 1-pixel white borders around
    /// every cell. The corner left free by two headers is white.
    pub fn to_canvas(&self) -> (usize, usize, Vec<f32>) {
        let (lr, lc) = self.layout_dims();
        let (h, w) = (self.height, self.width);
        let ch = lr * (h + 1) + 1;
        let cw = lc * (w + 1) + 1;
        let mut canvas = vec![1.0f32; self.channels * ch * cw];
        let (r0, c0) = (self.header_row.is_some() as usize, self.header_col.is_some() as usize);
        let n = self.image_len();
        let mut blit = |lr: usize, lc: usize, img: &[f32]| {
            for c in 0..self.channels {
                for y in 0..h {
                    let dst = c * ch * cw + (lr * (h + 1) + 1 + y) * cw + lc * (w + 1) + 1;
                    canvas[dst..dst + w].copy_from_slice(&img[c * h * w + y * w..c * h * w + (y + 1) * w]);
                }
            }
        };
        if let Some(hr) = &self.header_row {
            for c in 0..self.cols {
                blit(0, c0 + c, &hr[c * n..(c + 1) * n]);
            }
        }
        if let Some(hc) = &self.header_col {
            for r in 0..self.rows {
                blit(r0 + r, 0, &hc[r * n..(r + 1) * n]);
            }
        }
        for r in 0..self.rows {
            for c in 0..self.cols {
                blit(r0 + r, c0 + c, self.cell(r, c));
            }
        }
        (ch, cw, canvas)
    }

    /// `<mode>_<seed>_<rows>x<cols>` with the layout dimensions.
    pub fn file_stem(&self, mode: &str, seed: u64) -> String {
        let (r, c) = self.layout_dims();
        format!("{mode}_{seed}_{r}x{c}")
    }

    pub fn write(&self, path: &Path, format: ImageFormat) -> Result<()> {
        let (h, w, canvas) = self.to_canvas();
        write_image(path, self.channels, h, w, &canvas, format)
    }

    /// Writes into `dir` under [`Self::file_stem`], PGM for grey and PNG for colour.
    pub fn write_named(&self, dir: &Path, mode: &str, seed: u64) -> Result<PathBuf> {
        let format = ImageFormat::for_channels(self.channels);
        let path = dir.join(format!("{}.{}", self.file_stem(mode, seed), format.extension()));
        self.write(&path, format)?;
        Ok(path)
    }
}

fn geometry(params: &ModelParams<f32>, images: &Tensor<f32>, what: &str) -> Result<usize> {
    let c = params.config();
    let s = images.shape();
    if s.len() != 4 || s[1..] != [c.image_channels, c.image_size, c.image_size] {
        return Err(Error::Consistency(format!(
            "{what}: images have shape {s:?}, model expects [n, {}, {}, {}]",
            c.image_channels, c.image_size, c.image_size
        )));
    }
    if s[0] == 0 {
        return Err(Error::Consistency(format!("{what}: no source images")));
    }
    Ok(s[0])
}

const DECODE_CHUNK: usize = 128;

/// Decodes row pairs `(z[i], s[i])`, given as flat row-major buffers.
fn decode_rows(params: &ModelParams<f32>, z: &[f32], s: &[f32]) -> Result<Vec<f32>> {
    let (zd, sd) = (params.config().z_dim, params.config().s_dim);
    let n = z.len() / zd;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + DECODE_CHUNK).min(n);
        let zt = Tensor::new(vec![end - start, zd], z[start * zd..end * zd].to_vec())?;
        let st = Tensor::new(vec![end - start, sd], s[start * sd..end * sd].to_vec())?;
        out.extend_from_slice(params.decode(&zt, &st)?.data());
        start = end;
    }
    Ok(out)
}

fn grid(params: &ModelParams<f32>, rows: usize, cols: usize, cells: Vec<f32>) -> ImageGrid {
    let c = params.config();
    ImageGrid {
        rows,
        cols,
        channels: c.image_channels,
        height: c.image_size,
        width: c.image_size,
        cells,
        header_row: None,
        header_col: None,
    }
}

/// Cell `(i, j)` decodes the unspecified code of `col_images[i]` with the
/// specified code of `row_images[j]`: `z` is constant along a row, `s` down
/// a column. `row_images` head the columns, `col_images` head the rows.
pub fn swap_grid(row_images: &Tensor<f32>, col_images: &Tensor<f32>, params: &ModelParams<f32>) -> Result<ImageGrid> {
    let m = geometry(params, row_images, "swap_grid")?;
    let n = geometry(params, col_images, "swap_grid")?;
    let (zd, sd) = (params.config().z_dim, params.config().s_dim);
    let s_src = params.encode(row_images)?.s;
    let z_src = params.encode(col_images)?.mu;
    let mut z = Vec::with_capacity(n * m * zd);
    let mut s = Vec::with_capacity(n * m * sd);
    for i in 0..n {
        for j in 0..m {
            z.extend_from_slice(&z_src.data()[i * zd..(i + 1) * zd]);
            s.extend_from_slice(&s_src.data()[j * sd..(j + 1) * sd]);
        }
    }
    let mut g = grid(params, n, m, decode_rows(params, &z, &s)?);
    g.header_row = Some(row_images.data().to_vec());
    g.header_col = Some(col_images.data().to_vec());
    Ok(g)
}

fn lerp<'a>(a: &'a [f32], b: &'a [f32], t: f32) -> impl Iterator<Item = f32> + 'a {
    // equal endpoints stay exact for every t
    a.iter().zip(b).map(move |(&x, &y)| if x == y { x } else { (1.0 - t) * x + t * y })
}

/// `steps x steps` grid between images `a` and `b` (each `[1, c, h, w]`).
/// Row `r` uses `z = (1 - t_r) mu(a) + t_r mu(b)` and column `c` uses
/// `s = (1 - t_c) s(a) + t_c s(b)`, with `t_k = k / (steps - 1)`.
pub fn interpolation_grid(a: &Tensor<f32>, b: &Tensor<f32>, steps: usize, params: &ModelParams<f32>) -> Result<ImageGrid> {
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    for img in [a, b] {
        if geometry(params, img, "interpolation_grid")? != 1 {
            return Err(Error::Consistency("interpolation_grid: each corner must be a single image".into()));
        }
    }
    let (ca, cb) = (params.encode(a)?, params.encode(b)?);
    let t = |k: usize| (k as f64 / (steps - 1) as f64) as f32;
    let mut z = Vec::new();
    let mut s = Vec::new();
    for r in 0..steps {
        for c in 0..steps {
            z.extend(lerp(ca.mu.data(), cb.mu.data(), t(r)));
            s.extend(lerp(ca.s.data(), cb.s.data(), t(c)));
        }
    }
    Ok(grid(params, steps, steps, decode_rows(params, &z, &s)?))
}

/// Row `i` decodes `(z_j, s(sources[i]))` for `n` prior draws `z_j`; the
/// draws are shared by all rows, so each column keeps one pose.
pub fn conditional_sample(sources: &Tensor<f32>, samples_per_source: usize, params: &ModelParams<f32>, rng: &mut impl Rng) -> Result<ImageGrid> {
    let k = geometry(params, sources, "conditional_sample")?;
    if samples_per_source == 0 {
        return Err(Error::Config("samples_per_source must be >= 1".into()));
    }
    let (zd, sd) = (params.config().z_dim, params.config().s_dim);
    let draws: Tensor<f32> = standard_normal(&[samples_per_source, zd], rng);
    let s_src = params.encode(sources)?.s;
    let mut z = Vec::new();
    let mut s = Vec::new();
    for i in 0..k {
        z.extend_from_slice(draws.data());
        for _ in 0..samples_per_source {
            s.extend_from_slice(&s_src.data()[i * sd..(i + 1) * sd]);
        }
    }
    let mut g = grid(params, k, samples_per_source, decode_rows(params, &z, &s)?);
    g.header_col = Some(sources.data().to_vec());
    Ok(g)
}
