//! Parameter initializers.
//!
//! The single-task pre-finetune and transplant procedures live in
//! [`crate::transplant`]; this module only draws initial values.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Standard deviation for prompts, embeddings and backbone kernels.
pub const INIT_STD: f32 = 0.02;

/// Samples further than this many standard deviations out are redrawn.
pub const TRUNCATION_STDS: f32 = 2.0;

/// How task prompts are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptInit {
    /// Truncated normal draws.
    Random,
    /// Copies of embedding rows of frequent tokens.
    Token,
    /// Transplanted from a single-task pre-finetune.
    SingleTask,
}

/// How conditional poolers (and their heads) are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolerInit {
    /// Glorot-uniform kernels, zero biases.
    Random,
    SingleTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitSpec {
    pub prompt: PromptInit,
    pub pooler: PoolerInit,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            prompt: PromptInit::Random,
            pooler: PoolerInit::Random,
            seed: 0,
        }
    }
}

impl InitSpec {
    pub fn needs_artifacts(&self) -> bool {
        self.prompt == PromptInit::SingleTask || self.pooler == PoolerInit::SingleTask
    }
}

impl std::str::FromStr for PromptInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rd" | "random" => Ok(Self::Random),
            "tk" | "token" => Ok(Self::Token),
            "st" | "single-task" | "single_task" => Ok(Self::SingleTask),
            other => Err(format!(
                "unknown prompt init '{other}' (expected rd, tk or st)"
            )),
        }
    }
}

impl std::str::FromStr for PoolerInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rd" | "random" => Ok(Self::Random),
            "st" | "single-task" | "single_task" => Ok(Self::SingleTask),
            other => Err(format!("unknown pooler init '{other}' (expected rd or st)")),
        }
    }
}

impl std::fmt::Display for PromptInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "rd",
            Self::Token => "tk",
            Self::SingleTask => "st",
        })
    }
}

impl std::fmt::Display for PoolerInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "rd",
            Self::SingleTask => "st",
        })
    }
}

/// Zero-mean normal with standard deviation `std`, rejecting and redrawing
/// any sample beyond two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() < f64::from(TRUNCATION_STDS) {
            data.push(z as f32 * std);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = glorot_limit(rows, cols) as f32;
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("length matches shape")
}

/// Glorot kernel plus an exactly-zero bias.
pub fn glorot_with_bias<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> (Tensor, Tensor) {
    (glorot_uniform(rows, cols, rng), Tensor::zeros(&[cols]))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn truncated_normal_within_two_stds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = truncated_normal(&[10_000], INIT_STD, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn truncated_normal_is_seeded() {
        let a = truncated_normal(&[4, 8], INIT_STD, &mut ChaCha8Rng::seed_from_u64(9));
        let b = truncated_normal(&[4, 8], INIT_STD, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn glorot_bound_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (k, b) = glorot_with_bias(768, 768, &mut rng);
        let limit = glorot_limit(768, 768);
        // sqrt(6 / (768 + 768))
        assert!((limit - 0.0625).abs() < 1e-12);
        assert!(k.data().iter().all(|v| f64::from(v.abs()) <= limit));
        assert!(b.data().iter().all(|v| v.to_bits() == 0));
        let mean = k.data().iter().map(|&v| f64::from(v)).sum::<f64>() / k.len() as f64;
        assert!(mean.abs() < 0.002, "{mean}");
    }

    #[test]
    fn init_names_parse() {
        assert_eq!("TK".parse::<PromptInit>().unwrap(), PromptInit::Token);
        assert_eq!("st".parse::<PoolerInit>().unwrap(), PoolerInit::SingleTask);
        assert!("tk".parse::<PoolerInit>().is_err());
    }
}
