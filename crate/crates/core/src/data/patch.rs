use crate::numcore::Tensor;

use super::{DataError, HsiCube, Result};

/// `P x P x C` window centred on `(row, col)`; positions outside the image
/// are exact zeros.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, patch: usize) -> Result<Tensor> {
    if patch % 2 == 0 {
        return Err(DataError::EvenPatch(patch));
    }
    if row >= cube.height || col >= cube.width {
        return Err(DataError::OutOfBounds {
            row,
            col,
            height: cube.height,
            width: cube.width,
        });
    }
    let c = cube.bands;
    let half = (patch / 2) as isize;
    let mut data = vec![0.0; patch * patch * c];
    for dr in 0..patch {
        let r = row as isize + dr as isize - half;
        if r < 0 || r >= cube.height as isize {
            continue;
        }
        for dc in 0..patch {
            let cc = col as isize + dc as isize - half;
            if cc < 0 || cc >= cube.width as isize {
                continue;
            }
            let p = r as usize * cube.width + cc as usize;
            data[(dr * patch + dc) * c..(dr * patch + dc + 1) * c].copy_from_slice(cube.spectrum(p));
        }
    }
    Ok(Tensor::new(vec![patch, patch, c], data).expect("patch shape"))
}
