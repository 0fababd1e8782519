//! Drift identification: a learnable pattern memory attended by per-item
//! queries built from previous/current latents and current CF embeddings.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Mat, ParamId, ParamStore, StoreRef, Tape, Var};
use crate::checkpoint;
use crate::error::{check_dim, DactError, Result};
use crate::nn::{normal_matrix, Activation, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdimConfig {
    pub slots: usize,
    /// Latent dimension `d_c`; queries and values have width `3 * d_c`.
    pub d_c: usize,
    pub head_hidden: usize,
    pub tau: f64,
}

impl Default for CdimConfig {
    fn default() -> Self {
        Self {
            slots: 32,
            d_c: 32,
            head_hidden: 32,
            tau: 0.5,
        }
    }
}

impl CdimConfig {
    pub fn query_dim(&self) -> usize {
        3 * self.d_c
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.d_c == 0 || self.head_hidden == 0 {
            return Err(DactError::config("CDIM needs at least one slot and positive widths"));
        }
        if !(self.tau > 0.0) {
            return Err(DactError::config("attention temperature must be positive"));
        }
        Ok(())
    }
}

/// Per-item confidences and the attention weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Confidences {
    pub d: Array1<f64>,
    pub attn: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternMemory {
    pub config: CdimConfig,
    pub store: ParamStore,
    pub keys: ParamId,
    pub values: ParamId,
    pub head: Mlp,
}

/// Handles for one confidence evaluation on a tape; `d` is `n x 1`.
#[derive(Debug, Clone, Copy)]
pub struct CdimOut {
    pub attn: Var,
    pub d: Var,
}

fn unit_rows(h: ArrayView2<f64>) -> Mat {
    let mut out = h.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    out
}

/// Query `[r_prev ⊙ ĥ, r_cur ⊙ ĥ, r_cur − r_prev]` per row, with `ĥ` the
/// unit-normalized CF embedding. The result is a plain matrix, so the current
/// latent never receives gradient through it.
pub fn build_query(r_prev: ArrayView2<f64>, r_cur: ArrayView2<f64>, h: ArrayView2<f64>) -> Result<Mat> {
    check_dim(r_prev.ncols(), r_cur.ncols())?;
    check_dim(r_prev.ncols(), h.ncols())?;
    check_dim(r_prev.nrows(), r_cur.nrows())?;
    check_dim(r_prev.nrows(), h.nrows())?;
    let (n, d) = r_prev.dim();
    let hn = unit_rows(h);
    let mut q = Array2::zeros((n, 3 * d));
    for i in 0..n {
        for j in 0..d {
            q[[i, j]] = r_prev[[i, j]] * hn[[i, j]];
            q[[i, d + j]] = r_cur[[i, j]] * hn[[i, j]];
            q[[i, 2 * d + j]] = r_cur[[i, j]] - r_prev[[i, j]];
        }
    }
    Ok(q)
}

impl PatternMemory {
    /// Fresh random memory, as used for the first continual period.
    pub fn new(config: CdimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::with_rng(config, &mut rng))
    }

    fn with_rng(config: CdimConfig, rng: &mut impl Rng) -> Self {
        let dq = config.query_dim();
        let mut store = ParamStore::new();
        let keys = store.add("keys", normal_matrix(config.slots, dq, 1.0 / (dq as f64).sqrt(), rng));
        let values = store.add("values", normal_matrix(config.slots, dq, 1.0 / (dq as f64).sqrt(), rng));
        let head = Mlp::new(&mut store, "head", &[dq, config.head_hidden, 1], Activation::Tanh, rng);
        Self {
            config,
            store,
            keys,
            values,
            head,
        }
    }

    /// Trainable copy of a previous period's memory; shapes must match `config`.
    pub fn warm_start(prev: &PatternMemory, config: &CdimConfig) -> Result<Self> {
        config.validate()?;
        let k = prev.store.get(prev.keys);
        if k.nrows() != config.slots {
            return Err(DactError::Dimension {
                expected: config.slots,
                got: k.nrows(),
            });
        }
        check_dim(config.query_dim(), k.ncols())?;
        check_dim(config.head_hidden, prev.head.layers[0].fan_out)?;
        let mut out = prev.clone();
        out.config.tau = config.tau;
        Ok(out)
    }

    pub fn tape_confidence(&self, tape: &mut Tape, s: StoreRef, q: Var) -> CdimOut {
        let k = tape.param(s, self.keys);
        let v = tape.param(s, self.values);
        let logits = tape.matmul_bt(q, k);
        let logits = tape.scale(logits, 1.0 / self.config.tau);
        let attn = tape.softmax_rows(logits);
        let pooled = tape.matmul(attn, v);
        let pre = self.head.forward(tape, s, pooled);
        let d = tape.sigmoid(pre);
        CdimOut { attn, d }
    }

    pub fn confidence(&self, q: ArrayView2<f64>) -> Result<Confidences> {
        check_dim(self.config.query_dim(), q.ncols())?;
        let logits = q.dot(&self.store.get(self.keys).t()) / self.config.tau;
        let attn = autograd::softmax_rows(&logits);
        let pooled = attn.dot(self.store.get(self.values));
        let pre = self.head.forward_plain(&self.store, pooled.view());
        Ok(Confidences {
            d: pre.column(0).mapv(autograd::sigmoid),
            attn,
        })
    }

    pub fn save(&self, dir: &Path, period_index: usize) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config });
        checkpoint::save_store(dir, "cdim", Some(period_index), meta, &[("cdim.", &self.store)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::read_arrays(dir)?;
        let config: CdimConfig = serde_json::from_value(manifest.meta["config"].clone())?;
        let mut mem = Self::new(config, 0)?;
        checkpoint::load_into_store(&arrays, "cdim.", &mut mem.store)?;
        Ok(mem)
    }
}

/// Mean squared confidence.
pub fn reg_loss(d: &[f64]) -> Result<f64> {
    if d.is_empty() {
        return Err(DactError::Degenerate("confidence regularizer over an empty set".into()));
    }
    Ok(d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
}
