use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square image, pixels stored row-major with channels innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side * channels {
            return Err(Error::dim(format!(
                "{side}x{side}x{channels} image needs {} pixels, got {}",
                side * side * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            side,
            channels,
            pixels,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.side + x) * self.channels + c]
    }
}

/// Non-overlapping patches of an image in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<Vec<f64>>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || image.side % patch_size != 0 {
        return Err(Error::dim(format!(
            "image side {} is not divisible by patch size {patch_size}",
            image.side
        )));
    }
    let grid = image.side / patch_size;
    let mut patches = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut p = Vec::with_capacity(patch_size * patch_size * image.channels);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..image.channels {
                        p.push(image.at(gy * patch_size + py, gx * patch_size + px, c));
                    }
                }
            }
            patches.push(p);
        }
    }
    Ok(PatchGrid {
        patches,
        grid_h: grid,
        grid_w: grid,
        patch_size,
        channels: image.channels,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> Result<Image> {
    if grid.grid_h != grid.grid_w || grid.patches.len() != grid.grid_h * grid.grid_w {
        return Err(Error::dim("unpatchify needs a full square grid"));
    }
    let side = grid.grid_h * grid.patch_size;
    let ch = grid.channels;
    let mut pixels = vec![0.0; side * side * ch];
    for (idx, p) in grid.patches.iter().enumerate() {
        let (gy, gx) = (idx / grid.grid_w, idx % grid.grid_w);
        for py in 0..grid.patch_size {
            for px in 0..grid.patch_size {
                for c in 0..ch {
                    let y = gy * grid.patch_size + py;
                    let x = gx * grid.patch_size + px;
                    pixels[(y * side + x) * ch + c] = p[(py * grid.patch_size + px) * ch + c];
                }
            }
        }
    }
    Image::new(side, ch, pixels)
}
