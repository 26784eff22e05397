//! Patch-grid arithmetic: output size, receptive field, and the input
//! rectangle seen by every output cell.

use crate::error::Result;
use crate::tensor::ConvSpec;

/// Input rectangle `[top, left, height, width]` clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Footprint {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGeometry {
    /// Output grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub input: (usize, usize),
    pub receptive_field: usize,
    /// Input pixels between neighbouring cells.
    pub jump: usize,
    /// Input coordinate of the first cell's receptive field (negative when
    /// it starts in the padding).
    pub origin: isize,
    /// Row-major, one per grid cell.
    pub footprints: Vec<Footprint>,
}

impl PatchGeometry {
    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn footprint(&self, row: usize, col: usize) -> Footprint {
        self.footprints[row * self.grid.1 + col]
    }
}

/// `(receptive field, jump, origin)` of a conv stack.
pub fn receptive_field(layers: &[ConvSpec]) -> (usize, usize, isize) {
    let (mut rf, mut jump, mut origin) = (1usize, 1usize, 0isize);
    for l in layers {
        origin -= (l.padding * jump) as isize;
        rf += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    (rf, jump, origin)
}

pub fn output_hw(layers: &[ConvSpec], input: (usize, usize)) -> Result<(usize, usize)> {
    let (mut h, mut w) = input;
    for l in layers {
        l.validate()?;
        h = l.output_dim(h)?;
        w = l.output_dim(w)?;
    }
    Ok((h, w))
}

fn clip(start: isize, len: usize, limit: usize) -> (usize, usize) {
    let lo = start.max(0) as usize;
    let hi = ((start + len as isize).max(0) as usize).min(limit);
    (lo.min(limit), hi.saturating_sub(lo))
}

pub fn patch_geometry(layers: &[ConvSpec], input: (usize, usize)) -> Result<PatchGeometry> {
    let grid = output_hw(layers, input)?;
    let (rf, jump, origin) = receptive_field(layers);
    let mut footprints = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        let (top, height) = clip(origin + (r * jump) as isize, rf, input.0);
        for c in 0..grid.1 {
            let (left, width) = clip(origin + (c * jump) as isize, rf, input.1);
            footprints.push(Footprint {
                top,
                left,
                height,
                width,
            });
        }
    }
    Ok(PatchGeometry {
        grid,
        input,
        receptive_field: rf,
        jump,
        origin,
        footprints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(v: &[(usize, usize, usize, usize)]) -> Vec<ConvSpec> {
        v.iter()
            .map(|&(k, c, s, p)| ConvSpec::new(k, c, s, p).unwrap())
            .collect()
    }

    #[test]
    fn dmc_footprints_are_clipped_at_borders() {
        let g = patch_geometry(
            &specs(&[(4, 32, 2, 1), (4, 64, 1, 1), (4, 128, 1, 1), (4, 1, 1, 1)]),
            (84, 84),
        )
        .unwrap();
        assert_eq!(g.origin, -7);
        let first = g.footprint(0, 0);
        assert_eq!((first.top, first.height), (0, 15));
        let last = g.footprint(38, 38);
        assert_eq!((last.top, last.height), (69, 15));
        let mid = g.footprint(10, 10);
        assert_eq!((mid.height, mid.width), (22, 22));
    }

    #[test]
    fn kernel_too_large_is_an_error() {
        assert!(patch_geometry(&specs(&[(9, 1, 1, 0)]), (8, 8)).is_err());
    }
}
