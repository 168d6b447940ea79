use crate::error::{NnError, Result};
use crate::scalar::Scalar;

/// Dense NCHW batch of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: [n, c, h, w],
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(NnError::Shape(format!(
                "tensor {:?} needs {} values, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a batch by stacking equally shaped per-sample buffers.
    pub fn stack(c: usize, h: usize, w: usize, samples: &[Vec<T>]) -> Result<Self> {
        let per = c * h * w;
        let mut data = Vec::with_capacity(per * samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.len() != per {
                return Err(NnError::Shape(format!(
                    "sample {i} has {} values, expected {per}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Ok(Self {
            shape: [samples.len(), c, h, w],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Same data, new per-sample layout.
    pub fn reshaped(mut self, c: usize, h: usize, w: usize) -> Result<Self> {
        if c * h * w != self.sample_len() {
            return Err(NnError::Shape(format!(
                "cannot view {:?} as {}x{}x{}",
                self.shape, c, h, w
            )));
        }
        self.shape = [self.shape[0], c, h, w];
        Ok(self)
    }

    /// Channel-wise concatenation of two batches with the same N, H, W.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let [n, c1, h, w] = self.shape;
        let [n2, c2, h2, w2] = other.shape;
        if n != n2 || h != h2 || w != w2 {
            return Err(NnError::Shape(format!(
                "channel concat of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Self::zeros(n, c1 + c2, h, w);
        let plane = h * w;
        for i in 0..n {
            let dst = out.sample_mut(i);
            dst[..c1 * plane].copy_from_slice(self.sample(i));
            dst[c1 * plane..].copy_from_slice(other.sample(i));
        }
        Ok(out)
    }

    /// Channels `[from, to)` of every sample.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if from > to || to > c {
            return Err(NnError::Shape(format!("channel range {from}..{to} of {c}")));
        }
        let plane = h * w;
        let mut out = Self::zeros(n, to - from, h, w);
        for i in 0..n {
            out.sample_mut(i)
                .copy_from_slice(&self.sample(i)[from * plane..to * plane]);
        }
        Ok(out)
    }

    /// Concatenation along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::Shape("empty batch concat".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(NnError::Shape(format!(
                    "batch concat of {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Samples `[from, to)` as a new batch.
    pub fn slice_batch(&self, from: usize, to: usize) -> Self {
        let len = self.sample_len();
        Self {
            shape: [to - from, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[from * len..to * len].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
