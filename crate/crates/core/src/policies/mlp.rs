use rand::Rng;

/// Shape of a one-hidden-layer ReLU network. Parameters live in a flat slice
/// laid out as `W1 (hidden x input) | b1 | W2 (output x hidden) | b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Net {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Net {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Net { input, hidden, output }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    /// The `k`-th network in a block of identically shaped networks.
    pub fn block<'a>(&self, params: &'a [f64], k: usize) -> &'a [f64] {
        let n = self.param_count();
        &params[k * n..(k + 1) * n]
    }

    pub fn block_mut<'a>(&self, params: &'a mut [f64], k: usize) -> &'a mut [f64] {
        let n = self.param_count();
        &mut params[k * n..(k + 1) * n]
    }

    pub fn init_uniform<R: Rng + ?Sized>(&self, params: &mut [f64], low: f64, high: f64, rng: &mut R) {
        let (b1, w2, b2) = self.offsets();
        for (i, p) in params.iter_mut().enumerate() {
            let is_bias = (b1..w2).contains(&i) || i >= b2;
            *p = if is_bias { 0.0 } else { rng.random_range(low..high) };
        }
    }

    #[cfg(test)]
    pub fn biases<'a>(&self, params: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let (b1, w2, b2) = self.offsets();
        params[b1..w2].iter().chain(&params[b2..]).copied()
    }

    /// Writes output logits. When `hidden_out` is given it receives the
    /// hidden pre-activations, which [`Net::backward`] needs.
    pub fn forward(&self, params: &[f64], x: &[f64], logits: &mut [f64], mut hidden_out: Option<&mut Vec<f64>>) {
        debug_assert_eq!(x.len(), self.input);
        debug_assert_eq!(params.len(), self.param_count());
        let (b1, w2, b2) = self.offsets();
        let mut relu = vec![0.0; self.hidden];
        if let Some(h) = hidden_out.as_deref_mut() {
            h.clear();
            h.resize(self.hidden, 0.0);
        }
        for j in 0..self.hidden {
            let row = &params[j * self.input..(j + 1) * self.input];
            let pre = params[b1 + j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            if let Some(h) = hidden_out.as_deref_mut() {
                h[j] = pre;
            }
            relu[j] = pre.max(0.0);
        }
        for k in 0..self.output {
            let row = &params[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
            logits[k] = params[b2 + k] + row.iter().zip(&relu).map(|(w, h)| w * h).sum::<f64>();
        }
    }

    /// Accumulates `d(objective)/d(params)` into `grad` given the gradient
    /// with respect to the output logits.
    pub fn backward(&self, params: &[f64], x: &[f64], pre: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let mut dhidden = vec![0.0; self.hidden];
        for k in 0..self.output {
            let g = dlogits[k];
            if g == 0.0 {
                continue;
            }
            grad[b2 + k] += g;
            for j in 0..self.hidden {
                let h = pre[j].max(0.0);
                grad[w2 + k * self.hidden + j] += g * h;
                dhidden[j] += g * params[w2 + k * self.hidden + j];
            }
        }
        for j in 0..self.hidden {
            // ReLU derivative, taken as 0 at the kink.
            if pre[j] <= 0.0 || dhidden[j] == 0.0 {
                continue;
            }
            let g = dhidden[j];
            grad[b1 + j] += g;
            for (i, xi) in x.iter().enumerate() {
                grad[j * self.input + i] += g * xi;
            }
        }
    }
}
