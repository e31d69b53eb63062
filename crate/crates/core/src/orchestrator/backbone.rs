//! Fixed toy backbone: four conv stages reaching strides 8, 16 and 32.

use nfcs_tensor::{Conv2dOptions, Graph, ParamStore, ParamVars, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder_graph::FeatureSpec;
use crate::search_space::NUM_INPUTS;
use crate::error::Result;

/// Stage `i` ends at stride `4 * 2^i`; stages 1..=3 are c3, c4, c5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backbone {
    pub widths: [usize; 4],
}

/// Input channels of the synthetic images.
pub const IMAGE_CHANNELS: usize = 3;

impl Backbone {
    pub fn new(widths: [usize; 4]) -> Self {
        Self { widths }
    }

    fn groups(width: usize) -> usize {
        (1..=8).rev().find(|g| width % g == 0).unwrap_or(1)
    }

    /// `(name, in, out, stride)` of every conv, in order.
    fn convs(&self) -> Vec<(String, usize, usize, usize)> {
        let w = self.widths;
        let mut out = vec![
            ("bb.s0.c0".to_string(), IMAGE_CHANNELS, w[0], 2),
            ("bb.s0.c1".to_string(), w[0], w[0], 2),
        ];
        for i in 1..4 {
            out.push((format!("bb.s{i}.c0"), w[i - 1], w[i], 2));
            out.push((format!("bb.s{i}.c1"), w[i], w[i], 1));
        }
        out
    }

    /// He-uniform weights, zero biases, unit norm scales.
    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, cin, cout, _) in self.convs() {
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            let data = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound) as f32).collect();
            store.insert(format!("{name}.w"), Tensor::from_parts(vec![cout, cin, 3, 3], data));
            store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
            store.insert(format!("{name}.norm.g"), Tensor::ones(&[cout]));
            store.insert(format!("{name}.norm.b"), Tensor::zeros(&[cout]));
        }
        store
    }

    /// Feature specs of c3..c5 for a square image.
    pub fn feature_specs(&self, image_size: usize) -> [FeatureSpec; NUM_INPUTS] {
        FeatureSpec::inputs_for(image_size, image_size, [self.widths[1], self.widths[2], self.widths[3]])
    }

    /// `x` is `[N, 3, H, W]`; returns c3, c4, c5.
    pub fn forward<'g>(&self, params: &ParamVars<'g, f32>, x: Var<'g, f32>) -> Result<[Var<'g, f32>; NUM_INPUTS]> {
        let mut h = x;
        let mut feats = Vec::with_capacity(NUM_INPUTS);
        for (k, (name, _, cout, stride)) in self.convs().into_iter().enumerate() {
            let w = params.get(&format!("{name}.w"))?;
            let b = params.get(&format!("{name}.b"))?;
            h = h.conv2d(w, Some(b), Conv2dOptions::stride(stride))?;
            let g = params.get(&format!("{name}.norm.g"))?;
            let beta = params.get(&format!("{name}.norm.b"))?;
            h = h.group_norm(g, beta, Self::groups(cout))?.relu();
            if k >= 3 && k % 2 == 1 {
                feats.push(h);
            }
        }
        Ok([feats[0], feats[1], feats[2]])
    }

    /// Frozen forward of a batch of images, split into per-image features.
    pub fn features(&self, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Vec<[Tensor<f32>; NUM_INPUTS]>> {
        let g = Graph::new();
        let pv = params.attach_frozen(&g);
        let c = self.forward(&pv, g.constant(images.clone()))?;
        let vals = c.map(|v| v.value());
        Ok((0..images.shape()[0])
            .map(|i| std::array::from_fn(|l| vals[l].index0(i)))
            .collect())
    }
}
