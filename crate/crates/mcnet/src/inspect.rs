//! Grayscale views of the meta-memory and of the memory conditioned on a
//! source face.

use std::fs;
use std::path::Path;

use mcnet_core::{AnimateOptions, MCNetModel, ParamStore, Real, Tape, Tensor};

use crate::error::{AppError, Result};
use crate::image_io::Image;

/// Min-max normalization to `[0, 1]`; a constant channel maps to 0.5.
pub fn normalize_channel(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// One normalized tile per channel of a `[C, H, W]` cube.
pub fn channel_tiles<T: Real>(cube: &Tensor<T>) -> Result<Vec<Image>> {
    let &[c, h, w] = cube.shape() else {
        return Err(AppError::data(format!("expected a [C, H, W] memory, got {:?}", cube.shape())));
    };
    let v = cube.to_f64_vec();
    (0..c).map(|i| Image::new(w, h, 1, normalize_channel(&v[i * h * w..(i + 1) * h * w]))).collect()
}

/// Tiles laid out row-major on a near-square grid with one-pixel black
/// gutters.
pub fn mosaic(tiles: &[Image]) -> Result<Image> {
    let first = tiles.first().ok_or_else(|| AppError::data("no tiles to arrange"))?;
    let (th, tw) = (first.height, first.width);
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let (width, height) = (cols * (tw + 1) - 1, rows * (th + 1) - 1);
    let mut data = vec![0.0f32; width * height];
    for (i, t) in tiles.iter().enumerate() {
        let (ox, oy) = ((i % cols) * (tw + 1), (i / cols) * (th + 1));
        for y in 0..th {
            let dst = (oy + y) * width + ox;
            data[dst..dst + tw].copy_from_slice(&t.data[y * tw..(y + 1) * tw]);
        }
    }
    Image::new(width, height, 1, data)
}

/// The meta-memory, or with a source the conditioned memory of every level.
pub fn memory_views<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    source: Option<&Tensor<T>>,
) -> Result<Vec<(String, Tensor<T>)>> {
    let Some(source) = source else {
        let id = model.memory.id;
        return Ok(vec![(String::new(), store.get(id).clone())]);
    };
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let a = model.animate(&mut tape, store, s, s, AnimateOptions::default())?;
    a.levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let m = tape.value(l.conditioned).index_first(0)?;
            Ok((format!("level{}", i + 1), m))
        })
        .collect()
}

/// Writes `channel_XXX.pgm` per channel and `grid.pgm`, per view.
pub fn write_views<T: Real>(out_dir: &Path, views: &[(String, Tensor<T>)]) -> Result<usize> {
    let mut written = 0;
    for (name, cube) in views {
        let dir = if name.is_empty() { out_dir.to_path_buf() } else { out_dir.join(name) };
        fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        let tiles = channel_tiles(cube)?;
        for (c, t) in tiles.iter().enumerate() {
            t.save(&dir.join(format!("channel_{c:03}.pgm")))?;
            written += 1;
        }
        mosaic(&tiles)?.save(&dir.join("grid.pgm"))?;
    }
    Ok(written)
}
