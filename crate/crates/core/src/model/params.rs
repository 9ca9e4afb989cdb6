//! Parameter tensors, initialization and transfer.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Task, NUM_SPECIALS};
use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Weights of one pre-norm transformer block. Biases and norm parameters
/// are `1 × n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

macro_rules! block_fields {
    ($mac:ident) => {
        $mac!(
            ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1,
            b_ff1, w_ff2, b_ff2
        )
    };
}

/// Every tensor of the network. Also used to hold gradients and optimizer
/// moments, which share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// Image-unit embeddings, `N_i × d`.
    pub image_embed: Tensor,
    /// Additive row / column position embeddings for the grid prefix.
    pub grid_row_pos: Tensor,
    pub grid_col_pos: Tensor,
    /// Output-token embeddings including the three specials, `(V + 3) × d`.
    pub token_embed: Tensor,
    /// Positions of BOS and the following tokens, `(max_unit_len + 1) × d`.
    pub out_pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `d × (V + 3)`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tensors on the image side of the network; frozen after transfer.
pub const IMAGE_PATH: [&str; 3] = ["image_embed", "grid_row_pos", "grid_col_pos"];

impl ParamSet {
    /// `(name, tensor)` for every tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("image_embed".to_string(), &self.image_embed),
            ("grid_row_pos".to_string(), &self.grid_row_pos),
            ("grid_col_pos".to_string(), &self.grid_col_pos),
            ("token_embed".to_string(), &self.token_embed),
            ("out_pos".to_string(), &self.out_pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $(out.push((format!("blocks.{i}.{}", stringify!($f)), &b.$f));)* };
            }
            block_fields!(push);
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("image_embed".to_string(), &mut self.image_embed),
            ("grid_row_pos".to_string(), &mut self.grid_row_pos),
            ("grid_col_pos".to_string(), &mut self.grid_col_pos),
            ("token_embed".to_string(), &mut self.token_embed),
            ("out_pos".to_string(), &mut self.out_pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $(out.push((format!("blocks.{i}.{}", stringify!($f)), &mut b.$f));)* };
            }
            block_fields!(push);
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// A network together with its config, output task and trainability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub task: Task,
    pub tensors: ParamSet,
    /// Names of tensors excluded from gradient updates.
    pub frozen: BTreeSet<String>,
}

impl ModelParams {
    pub fn base_vocab(&self) -> usize {
        self.config.base_vocab(self.task)
    }

    pub fn output_vocab(&self) -> usize {
        self.base_vocab() + NUM_SPECIALS
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    // Unit expected squared norm per row.
    uniform(rng, rows, d, (3.0 / d as f64).sqrt())
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

fn ones(n: usize) -> Tensor {
    Array2::ones((1, n))
}

fn zeros(n: usize) -> Tensor {
    Array2::zeros((1, n))
}

/// Output-token embedding table and head for a `base`-symbol vocabulary.
fn output_layers(rng: &mut ChaCha8Rng, d: usize, base: usize) -> (Tensor, Tensor, Tensor) {
    let v = base + NUM_SPECIALS;
    (embedding(rng, v, d), linear(rng, d, v), zeros(v))
}

/// Randomly initialized network for `task`, deterministic in `cfg.seed`.
/// Weights are scaled uniform, norm gains 1, biases 0.
pub fn init_random(cfg: &ModelConfig, task: Task) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let image_embed = embedding(&mut rng, cfg.image_vocab, d);
    let grid_row_pos = embedding(&mut rng, cfg.grid_h, d);
    let grid_col_pos = embedding(&mut rng, cfg.grid_w, d);
    let out_pos = embedding(&mut rng, cfg.max_unit_len + 1, d);
    let blocks = (0..cfg.n_layers)
        .map(|_| BlockParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            w_q: linear(&mut rng, d, d),
            b_q: zeros(d),
            w_k: linear(&mut rng, d, d),
            b_k: zeros(d),
            w_v: linear(&mut rng, d, d),
            b_v: zeros(d),
            w_o: linear(&mut rng, d, d),
            b_o: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w_ff1: linear(&mut rng, d, cfg.ff_dim),
            b_ff1: zeros(cfg.ff_dim),
            w_ff2: linear(&mut rng, cfg.ff_dim, d),
            b_ff2: zeros(d),
        })
        .collect();
    let (token_embed, head_w, head_b) = output_layers(&mut rng, d, cfg.base_vocab(task));
    Ok(ModelParams {
        config: cfg.clone(),
        task,
        tensors: ParamSet {
            image_embed,
            grid_row_pos,
            grid_col_pos,
            token_embed,
            out_pos,
            blocks,
            final_gain: ones(d),
            final_bias: zeros(d),
            head_w,
            head_b,
        },
        frozen: BTreeSet::new(),
    })
}

/// Builds a speech-unit model from a text-pretrained one.
///
/// Transformer blocks, final norm, image-unit and positional embeddings are
/// copied. The output-token embeddings and output head are re-initialized
/// (from `cfg.seed`) for `cfg.unit_vocab` units. The image-unit path is
/// frozen; the decoder and unit embeddings stay trainable.
pub fn init_transfer(pretrained: &ModelParams, cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    pretrained.config.check_transferable(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_616e_7366_6572);
    let (token_embed, head_w, head_b) = output_layers(&mut rng, cfg.d_model, cfg.unit_vocab);
    let mut tensors = pretrained.tensors.clone();
    tensors.token_embed = token_embed;
    tensors.head_w = head_w;
    tensors.head_b = head_b;
    let mut config = cfg.clone();
    config.text_vocab = pretrained.config.text_vocab;
    Ok(ModelParams {
        config,
        task: Task::Units,
        tensors,
        frozen: IMAGE_PATH.iter().map(|s| s.to_string()).collect(),
    })
}

/// Checks every tensor's shape against the config and task.
pub fn check_shapes(p: &ModelParams) -> Result<()> {
    let cfg = &p.config;
    let d = cfg.d_model;
    let v = p.output_vocab();
    let t = &p.tensors;
    let mut expected: Vec<(&Tensor, (usize, usize))> = vec![
        (&t.image_embed, (cfg.image_vocab, d)),
        (&t.grid_row_pos, (cfg.grid_h, d)),
        (&t.grid_col_pos, (cfg.grid_w, d)),
        (&t.token_embed, (v, d)),
        (&t.out_pos, (cfg.max_unit_len + 1, d)),
        (&t.final_gain, (1, d)),
        (&t.final_bias, (1, d)),
        (&t.head_w, (d, v)),
        (&t.head_b, (1, v)),
    ];
    if t.blocks.len() != cfg.n_layers {
        return Err(Error::DimensionMismatch {
            expected: cfg.n_layers,
            found: t.blocks.len(),
        });
    }
    for b in &t.blocks {
        expected.extend([
            (&b.ln1_gain, (1, d)),
            (&b.ln1_bias, (1, d)),
            (&b.w_q, (d, d)),
            (&b.b_q, (1, d)),
            (&b.w_k, (d, d)),
            (&b.b_k, (1, d)),
            (&b.w_v, (d, d)),
            (&b.b_v, (1, d)),
            (&b.w_o, (d, d)),
            (&b.b_o, (1, d)),
            (&b.ln2_gain, (1, d)),
            (&b.ln2_bias, (1, d)),
            (&b.w_ff1, (d, cfg.ff_dim)),
            (&b.b_ff1, (1, cfg.ff_dim)),
            (&b.w_ff2, (cfg.ff_dim, d)),
            (&b.b_ff2, (1, d)),
        ]);
    }
    for (tensor, shape) in expected {
        if tensor.dim() != shape {
            return Err(Error::invalid(format!(
                "tensor shape {:?} does not match expected {shape:?}",
                tensor.dim()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = ModelConfig::tiny();
        let a = init_random(&cfg, Task::Units).unwrap();
        let b = init_random(&cfg, Task::Units).unwrap();
        assert_eq!(a, b);
        let c = init_random(&ModelConfig { seed: 1, ..cfg }, Task::Units).unwrap();
        assert_ne!(a.tensors, c.tensors);
    }

    #[test]
    fn shapes_and_finiteness() {
        for task in [Task::Text, Task::Units] {
            let p = init_random(&ModelConfig::default(), task).unwrap();
            check_shapes(&p).unwrap();
            assert!(p.tensors.all_finite());
            assert!(p.frozen.is_empty());
            assert!(p.tensors.final_gain.iter().all(|&g| g == 1.0));
            assert!(p.tensors.head_b.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn names_are_unique_and_cover_everything() {
        let mut p = init_random(&ModelConfig::default(), Task::Units).unwrap();
        let names: BTreeSet<String> = p.tensors.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 9 + 16 * 2);
        assert_eq!(p.tensors.named_mut().len(), names.len());
    }

    #[test]
    fn transfer_copies_blocks_and_resets_output_layers() {
        let cfg = ModelConfig::default();
        let text = init_random(&cfg, Task::Text).unwrap();
        let units = init_transfer(&text, &ModelConfig { seed: 4, ..cfg.clone() }).unwrap();
        check_shapes(&units).unwrap();
        assert_eq!(units.task, Task::Units);
        assert_eq!(units.tensors.blocks, text.tensors.blocks);
        assert_eq!(units.tensors.image_embed, text.tensors.image_embed);
        assert_eq!(units.tensors.out_pos, text.tensors.out_pos);
        assert_eq!(units.tensors.token_embed.dim(), (cfg.unit_vocab + 3, cfg.d_model));
        assert_eq!(units.tensors.head_w.dim(), (cfg.d_model, cfg.unit_vocab + 3));
        for name in IMAGE_PATH {
            assert!(!units.is_trainable(name));
        }
        assert!(units.is_trainable("token_embed"));
        assert!(units.is_trainable("blocks.0.w_q"));
    }

    #[test]
    fn transfer_rejects_mismatched_dims() {
        let text = init_random(&ModelConfig::default(), Task::Text).unwrap();
        let other = ModelConfig { d_model: 32, ..Default::default() };
        assert!(init_transfer(&text, &other).is_err());
    }
}
