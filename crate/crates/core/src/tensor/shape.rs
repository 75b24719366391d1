use std::fmt;

use serde::{Deserialize, Serialize};

/// Extents of a rank-5 tensor in `(N, C, D, H, W)` order. `W` varies fastest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape([n, c, d, h, w])
    }

    /// A single-batch, single-channel volume.
    pub const fn volume(d: usize, h: usize, w: usize) -> Self {
        Shape([1, 1, d, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn d(&self) -> usize {
        self.0[2]
    }

    pub fn h(&self) -> usize {
        self.0[3]
    }

    pub fn w(&self) -> usize {
        self.0[4]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3], self.0[4]])
    }

    pub fn with_spatial(&self, [d, h, w]: [usize; 3]) -> Self {
        Shape([self.0[0], self.0[1], d, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Voxels per channel plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&e| e >= 1)
    }

    pub fn offset(&self, [n, c, d, h, w]: [usize; 5]) -> usize {
        let [_, cs, ds, hs, ws] = self.0;
        (((n * cs + c) * ds + d) * hs + h) * ws + w
    }

    pub fn index(&self, mut offset: usize) -> [usize; 5] {
        let mut idx = [0; 5];
        for axis in (0..5).rev() {
            idx[axis] = offset % self.0[axis];
            offset /= self.0[axis];
        }
        idx
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, d, h, w] = self.0;
        write!(f, "{n}x{c}x{d}x{h}x{w}")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}
