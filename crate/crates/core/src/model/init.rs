use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::ParamStore;
use crate::corpus::derive_seed;
use crate::tensor::Matrix;

/// Deterministic parameter initialisation: every tensor draws from its own
/// stream keyed by `(seed, name)`, so adding or resizing one group never
/// perturbs another.
pub struct Initializer {
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name_hash(name)))
    }

    /// Xavier-uniform weight `name.w` (`fan_in × fan_out`) and zero bias.
    pub fn linear(&self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        let w_name = format!("{name}.w");
        let mut rng = self.rng(&w_name);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        store.insert(
            w_name,
            Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..a)),
        );
        store.insert(format!("{name}.b"), Matrix::zeros(1, fan_out));
    }

    pub fn layer_norm(&self, store: &mut ParamStore, name: &str, d: usize) {
        store.insert(format!("{name}.g"), Matrix::filled(1, d, 1.0));
        store.insert(format!("{name}.b"), Matrix::zeros(1, d));
    }

    /// Learned token, `N(0, std²)` entries.
    pub fn token(&self, store: &mut ParamStore, name: &str, d: usize, std: f64) {
        let mut rng = self.rng(name);
        store.insert(
            name,
            Matrix::from_fn(1, d, |_, _| std * rng.sample::<f64, _>(StandardNormal)),
        );
    }
}
