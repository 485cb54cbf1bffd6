//! Area-average resampling between the mask grid and the feature grid.

use crate::types::Tensor3;

/// Separable area-average pooling from `(H, W)` to `(h, w)`.
///
/// Each output cell is the mean of the input over the cell's footprint,
/// with fractional overlap at the edges when the sizes are not multiples of
/// each other. When the sizes match the map is the identity, bit for bit.
#[derive(Debug, Clone)]
pub struct AreaPool {
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
    in_h: usize,
    in_w: usize,
}

fn axis_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            if input == output {
                return vec![(o, 1.0)];
            }
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(input);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

impl AreaPool {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self { rows: axis_weights(in_h, out_h), cols: axis_weights(in_w, out_w), in_h, in_w }
    }

    pub fn out_size(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn apply(&self, input: &Tensor3) -> Tensor3 {
        assert_eq!((input.height(), input.width()), (self.in_h, self.in_w), "pool input size");
        let (oh, ow) = self.out_size();
        Tensor3::from_fn(input.channels(), oh, ow, |c, i, j| {
            let mut s = 0.0;
            for &(y, wy) in &self.rows[i] {
                for &(x, wx) in &self.cols[j] {
                    s += wy * wx * input.at(c, y, x);
                }
            }
            s
        })
    }

    /// Transpose of [`AreaPool::apply`].
    pub fn adjoint(&self, grad_out: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(grad_out.channels(), self.in_h, self.in_w);
        let (oh, ow) = self.out_size();
        for c in 0..grad_out.channels() {
            for i in 0..oh {
                for j in 0..ow {
                    let g = grad_out.at(c, i, j);
                    for &(y, wy) in &self.rows[i] {
                        for &(x, wx) in &self.cols[j] {
                            *out.at_mut(c, y, x) += wy * wx * g;
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_factor_averages_blocks() {
        let t = Tensor3::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let p = AreaPool::new(4, 4, 2, 2).apply(&t);
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn fractional_factor_preserves_mean() {
        let t = Tensor3::from_fn(2, 7, 5, |c, y, x| (c + y * x) as f64 * 0.1);
        let pool = AreaPool::new(7, 5, 3, 2);
        let p = pool.apply(&t);
        for c in 0..2 {
            let a = t.channel(c).iter().sum::<f64>() / 35.0;
            let b = p.channel(c).iter().sum::<f64>() / 6.0;
            assert!((a - b).abs() < 1e-12);
        }
        let g = Tensor3::from_fn(2, 3, 2, |c, i, j| (c + i + 2 * j) as f64);
        let lhs: f64 = p.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = t.data().iter().zip(pool.adjoint(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn same_size_is_exact_identity() {
        let t = Tensor3::from_fn(3, 5, 6, |c, y, x| ((c * 31 + y * 7 + x) as f64).sin());
        assert_eq!(AreaPool::new(5, 6, 5, 6).apply(&t), t);
    }
}
