/// Activations in channel-major `[C][N][H][W]` order.
///
/// Keeping the channel outermost lets a convolution over a whole batch be a
/// single matrix product, and makes channel concatenation a plain append.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * n * h * w);
        Tensor { c, n, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel across the batch.
    #[inline]
    pub fn channel_len(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, ci: usize) -> &[f32] {
        let len = self.channel_len();
        &self.data[ci * len..(ci + 1) * len]
    }

    /// Appends `other`'s channels after this tensor's.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.c + other.c, self.n, self.h, self.w, data)
    }

    /// Splits off the first `c` channels; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(mut self, c: usize) -> (Tensor, Tensor) {
        let at = c * self.channel_len();
        let tail = self.data.split_off(at);
        let (n, h, w) = (self.n, self.h, self.w);
        let rest = self.c - c;
        (
            Tensor::from_vec(c, n, h, w, self.data),
            Tensor::from_vec(rest, n, h, w, tail),
        )
    }
}
