use crate::error::{Error, Result};

/// Partition of an `h x w` map into disjoint `m x m` windows anchored at
/// `(0, 0)`. The map is conceptually zero-padded on the bottom and right up
/// to the next multiple of `m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Builds the window grid for an `h x w` map with local range `m`.
pub fn window_partition(h: usize, w: usize, m: usize) -> Result<WindowGrid> {
    if h == 0 || w == 0 || m == 0 {
        return Err(Error::config(format!("window_partition needs positive sizes, got h={h} w={w} m={m}")));
    }
    Ok(WindowGrid { h, w, m, rows: h.div_ceil(m), cols: w.div_ceil(m) })
}

impl WindowGrid {
    /// Number of windows `N`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per window, `m^2`.
    pub fn window_area(&self) -> usize {
        self.m * self.m
    }

    pub fn padded_h(&self) -> usize {
        self.rows * self.m
    }

    pub fn padded_w(&self) -> usize {
        self.cols * self.m
    }

    /// Row-major `(padded_h x padded_w)` mask, `true` on real pixels and
    /// `false` on padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        let (ph, pw) = (self.padded_h(), self.padded_w());
        (0..ph * pw).map(|i| i / pw < self.h && i % pw < self.w).collect()
    }

    /// Window index holding pixel `(y, x)`.
    pub fn window_of(&self, y: usize, x: usize) -> usize {
        (y / self.m) * self.cols + x / self.m
    }

    /// Flat pixel index `y * w + x` for slot `s` (row-major within the
    /// window) of window `win`, or `None` if that slot is padding.
    pub fn slot_pixel(&self, win: usize, s: usize) -> Option<usize> {
        let y = (win / self.cols) * self.m + s / self.m;
        let x = (win % self.cols) * self.m + s % self.m;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }

    /// Slot-to-pixel table for one window.
    pub fn slots(&self, win: usize) -> Vec<Option<usize>> {
        (0..self.window_area()).map(|s| self.slot_pixel(win, s)).collect()
    }
}
