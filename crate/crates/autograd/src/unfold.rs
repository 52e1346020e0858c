use crate::error::{Error, Result};

/// Neighbourhood table for a dilated sliding window over an `h x w` grid.
///
/// For grid position `(m, n)` and window offsets `p, q` in `-k/2..=k/2`
/// (row-major, `p` outer), the neighbour is `(m + p*r, n + q*r)`. Entries
/// falling outside the grid are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldIndex {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub dilation: usize,
    /// `height * width * window * window` entries, grid-flat neighbour index.
    pub neighbours: Vec<Option<usize>>,
}

impl UnfoldIndex {
    pub fn taps(&self) -> usize {
        self.window * self.window
    }

    /// Validity mask in the same layout as `neighbours`.
    pub fn mask(&self) -> Vec<bool> {
        self.neighbours.iter().map(Option::is_some).collect()
    }

    /// Neighbours of one grid position.
    pub fn at(&self, m: usize, n: usize) -> &[Option<usize>] {
        let t = self.taps();
        let pos = m * self.width + n;
        &self.neighbours[pos * t..(pos + 1) * t]
    }
}

pub fn unfold_indices(height: usize, width: usize, window: usize, dilation: usize) -> Result<UnfoldIndex> {
    if window % 2 == 0 {
        return Err(Error::Domain {
            op: "unfold",
            detail: format!("window size must be odd, got {window}"),
        });
    }
    if dilation == 0 {
        return Err(Error::Domain {
            op: "unfold",
            detail: "dilation must be at least 1".into(),
        });
    }
    let half = (window / 2) as isize;
    let r = dilation as isize;
    let mut neighbours = Vec::with_capacity(height * width * window * window);
    for m in 0..height as isize {
        for n in 0..width as isize {
            for p in -half..=half {
                for q in -half..=half {
                    let mm = m + p * r;
                    let nn = n + q * r;
                    if mm >= 0 && mm < height as isize && nn >= 0 && nn < width as isize {
                        neighbours.push(Some(mm as usize * width + nn as usize));
                    } else {
                        neighbours.push(None);
                    }
                }
            }
        }
    }
    Ok(UnfoldIndex {
        height,
        width,
        window,
        dilation,
        neighbours,
    })
}
