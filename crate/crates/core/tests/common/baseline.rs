//! Multinomial logistic regression on raw pixels, written independently of
//! the library's autograd and optimizer.

pub struct Logistic {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    d: usize,
    c: usize,
}

impl Logistic {
    /// Full-batch gradient descent on mean cross-entropy plus `l2`·|W|².
    pub fn fit(x: &[Vec<f64>], y: &[usize], c: usize, iters: usize, lr: f64, l2: f64) -> Self {
        let n = x.len();
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in x {
            for ((s, m), v) in std.iter_mut().zip(&mean).zip(row) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt().max(1e-8);
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let mut m = Self { mean, std, w: vec![0.0; d * c], b: vec![0.0; c], d, c };
        for _ in 0..iters {
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            for (row, &label) in z.iter().zip(y) {
                let p = m.probs_std(row);
                for k in 0..c {
                    let e = (p[k] - if k == label { 1.0 } else { 0.0 }) / n as f64;
                    gb[k] += e;
                    for (j, v) in row.iter().enumerate() {
                        gw[j * c + k] += e * v;
                    }
                }
            }
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= lr * (g + 2.0 * l2 * *w);
            }
            for (b, g) in m.b.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        m
    }

    fn probs_std(&self, z: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = (0..self.c)
            .map(|k| self.b[k] + (0..self.d).map(|j| z[j] * self.w[j * self.c + k]).sum::<f64>())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tot: f64 = s.iter_mut().map(|v| {
            *v = (*v - mx).exp();
            *v
        }).sum();
        s.iter().map(|v| v / tot).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect();
        let p = self.probs_std(&z);
        (0..self.c).fold(0, |best, k| if p[k] > p[best] { k } else { best })
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count() as f64 / x.len() as f64
    }
}

/// Channel 0 of every image, flattened; the other two channels are copies.
pub fn channel0_pixels(images: &[f64], n: usize) -> Vec<Vec<f64>> {
    let per = images.len() / n;
    images.chunks(per).map(|img| img[..per / 3].to_vec()).collect()
}
