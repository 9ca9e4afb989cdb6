use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Which vocabulary the output head predicts over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Image-to-text pretraining over `text_vocab` words.
    Text,
    /// Image-to-speech-unit captioning over `unit_vocab` units.
    Units,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Text => "text",
            Task::Units => "units",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Task::Text),
            "units" => Ok(Task::Units),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Number of special tokens appended after the base vocabulary.
pub const NUM_SPECIALS: usize = 3;

/// Ids of the special tokens for a base vocabulary of `base` symbols:
/// BOS = base, EOS = base + 1, PAD = base + 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl Specials {
    pub fn for_base(base: usize) -> Self {
        let base = base as u32;
        Specials {
            bos: base,
            eos: base + 1,
            pad: base + 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Image-unit grid; the prefix holds `grid_h · grid_w` tokens.
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_unit_len: usize,
    pub unit_vocab: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale profile: 64-wide, 2 layers, 8×8 grids of 64 image units,
    /// 32 speech units, the 30-word caption grammar.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 256,
            grid_h: 8,
            grid_w: 8,
            max_unit_len: 64,
            unit_vocab: 32,
            text_vocab: 30,
            image_vocab: 64,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-scale constants: 224×224 images at patch 8 (28×28 grid of 8,192
    /// image units), 200 speech units, a 6-layer decoder. Recorded for
    /// reference; not trained here.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 768,
            n_layers: 6,
            n_heads: 12,
            ff_dim: 3072,
            grid_h: 28,
            grid_w: 28,
            max_unit_len: 1024,
            unit_vocab: 200,
            text_vocab: 30522,
            image_vocab: 8192,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 16,
            grid_h: 2,
            grid_w: 2,
            max_unit_len: 6,
            unit_vocab: 5,
            text_vocab: 6,
            image_vocab: 7,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn max_image_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn base_vocab(&self, task: Task) -> usize {
        match task {
            Task::Text => self.text_vocab,
            Task::Units => self.unit_vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("max_unit_len", self.max_unit_len),
            ("unit_vocab", self.unit_vocab),
            ("text_vocab", self.text_vocab),
            ("image_vocab", self.image_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Checks the dimensions that must agree for weights to transfer.
    pub fn check_transferable(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            (self.d_model, other.d_model),
            (self.n_layers, other.n_layers),
            (self.n_heads, other.n_heads),
            (self.ff_dim, other.ff_dim),
            (self.grid_h, other.grid_h),
            (self.grid_w, other.grid_w),
            (self.image_vocab, other.image_vocab),
            (self.max_unit_len, other.max_unit_len),
        ];
        for (a, b) in pairs {
            if a != b {
                return Err(Error::DimensionMismatch { expected: a, found: b });
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("d_model", self.d_model);
        kv.set("n_layers", self.n_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("ff_dim", self.ff_dim);
        kv.set("grid_h", self.grid_h);
        kv.set("grid_w", self.grid_w);
        kv.set("max_unit_len", self.max_unit_len);
        kv.set("unit_vocab", self.unit_vocab);
        kv.set("text_vocab", self.text_vocab);
        kv.set("image_vocab", self.image_vocab);
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv
    }

    /// Starts from `self` and overrides whichever keys `kv` provides.
    pub fn with_overrides(&self, kv: &KeyValues) -> Result<Self> {
        let mut cfg = self.clone();
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.get_parsed(stringify!($field))? { cfg.$field = v; })*
            };
        }
        take!(
            d_model, n_layers, n_heads, ff_dim, grid_h, grid_w, max_unit_len, unit_vocab,
            text_vocab, image_vocab, dropout, seed
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    /// Peak learning rate, reached at the end of warmup and held after.
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 2e-3,
            warmup_steps: 50,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainHyper {
    /// Full-scale recipe: 100k steps of batch 64 at 5e-5 after a 10k-step
    /// warmup.
    pub fn full_scale() -> Self {
        TrainHyper {
            lr: 5e-5,
            warmup_steps: 10_000,
            steps: 100_000,
            batch_size: 64,
            ..Default::default()
        }
    }

    /// Learning rate at 1-based `step`: linear ramp to the peak over the
    /// warmup, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn with_overrides(&self, kv: &KeyValues) -> Result<Self> {
        let mut h = self.clone();
        if let Some(v) = kv.get_parsed("lr")? {
            h.lr = v;
        }
        if let Some(v) = kv.get_parsed("warmup_steps")? {
            h.warmup_steps = v;
        }
        if let Some(v) = kv.get_parsed("steps")? {
            h.steps = v;
        }
        if let Some(v) = kv.get_parsed("batch_size")? {
            h.batch_size = v;
        }
        if let Some(v) = kv.get_parsed("train_seed")? {
            h.seed = v;
        }
        h.validate()?;
        Ok(h)
    }
}
