use crate::error::{Error, Result};

/// Binary per-pixel labels, shape (N, H, W), values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Dimension(format!(
                "mask data length {} does not match {n}x{h}x{w}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Input(format!("mask value {bad} is not binary")));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![0; n * h * w],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single-sample view as an owned mask.
    pub fn sample(&self, i: usize) -> Mask {
        let plane = self.h * self.w;
        Mask {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.data[i * plane..(i + 1) * plane].to_vec(),
        }
    }

    /// Stacks single-sample masks of equal size along the batch axis.
    pub fn stack(masks: &[Mask]) -> Result<Mask> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero masks".into()))?;
        let mut data = Vec::with_capacity(masks.len() * first.h * first.w);
        let mut n = 0;
        for m in masks {
            if m.h != first.h || m.w != first.w {
                return Err(Error::Dimension(format!(
                    "mask {}x{} cannot be stacked with {}x{}",
                    m.h, m.w, first.h, first.w
                )));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        Ok(Mask {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn change_fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.data.len() as f64
        }
    }
}
