//! Tensor arithmetic, reverse-mode differentiation, SGD and seeding.

pub mod nn;
pub mod optim;
pub mod sum;
pub mod tape;
pub mod tensor;

pub use nn::{collect_grads, BoundLinear, BoundMlp, Linear, Mlp, Module};
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use sum::{column_means, exact_sum, stable_mean};
pub use tape::{gradient_check, GradCheckReport, Gradients, Tape, Var, GRADCHECK_FLOOR};
pub use tensor::Tensor;

use rand::SeedableRng;

/// The one PRNG used throughout: ChaCha8, counter based, explicitly threaded.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, stream)`. Each pipeline stage draws from
/// its own stream so stages can be rerun in isolation.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
