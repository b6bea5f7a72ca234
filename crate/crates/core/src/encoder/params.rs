use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamId;
use crate::error::{Result, VkbError};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const HOP_NOISE_STD: f64 = 0.01;
const TOPIC_GAIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub token_vocab_size: usize,
    pub entity_vocab_size: usize,
    pub model_dim: usize,
    pub entity_dim: usize,
    pub relation_dim: usize,
    /// Memory key / query width; defaults to `entity_dim`.
    pub key_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    /// Number of per-hop relation projections.
    pub max_hops: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_vocab_size: 0,
            entity_vocab_size: 0,
            model_dim: 64,
            entity_dim: 32,
            relation_dim: 32,
            key_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            max_seq_len: 128,
            max_hops: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("token_vocab_size", self.token_vocab_size),
            ("entity_vocab_size", self.entity_vocab_size),
            ("model_dim", self.model_dim),
            ("entity_dim", self.entity_dim),
            ("relation_dim", self.relation_dim),
            ("key_dim", self.key_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("max_hops", self.max_hops),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(VkbError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(VkbError::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Parameter ids in the fixed storage order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub entity_table: ParamId,
    pub w_r: ParamId,
    pub w_e: ParamId,
    pub w_k: ParamId,
    pub w_q: ParamId,
    /// `w_t[h - 1]` projects the relation embedding at hop `h`.
    pub w_t: Vec<ParamId>,
    pub r_null: ParamId,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
    IdentityNoise,
    /// Gaussian plus a scaled identity on the topic-entity rows, so the
    /// topic half of keys and queries matches from the start.
    TopicIdentity,
}

fn specs(c: &EncoderConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = c.model_dim;
    let mut v = vec![
        ("token_emb".to_string(), (c.token_vocab_size, d), Init::Normal),
        ("pos_emb".to_string(), (c.max_seq_len, d), Init::Normal),
    ];
    for l in 0..c.layers {
        let p = |n: &str| format!("layer{l}.{n}");
        v.extend([
            (p("wq"), (d, d), Init::Normal),
            (p("bq"), (1, d), Init::Zeros),
            (p("wk"), (d, d), Init::Normal),
            (p("bk"), (1, d), Init::Zeros),
            (p("wv"), (d, d), Init::Normal),
            (p("bv"), (1, d), Init::Zeros),
            (p("wo"), (d, d), Init::Normal),
            (p("bo"), (1, d), Init::Zeros),
            (p("ln1_g"), (1, d), Init::Ones),
            (p("ln1_b"), (1, d), Init::Zeros),
            (p("w1"), (d, c.ff_dim), Init::Normal),
            (p("b1"), (1, c.ff_dim), Init::Zeros),
            (p("w2"), (c.ff_dim, d), Init::Normal),
            (p("b2"), (1, d), Init::Zeros),
            (p("ln2_g"), (1, d), Init::Ones),
            (p("ln2_b"), (1, d), Init::Zeros),
        ]);
    }
    let kin = c.entity_dim + c.relation_dim;
    v.extend([
        ("entity_table".to_string(), (c.entity_vocab_size, c.entity_dim), Init::Normal),
        ("w_r".to_string(), (2 * d, c.relation_dim), Init::Normal),
        ("w_e".to_string(), (d, c.entity_dim), Init::Normal),
        ("w_k".to_string(), (kin, c.key_dim), Init::TopicIdentity),
        ("w_q".to_string(), (kin, c.key_dim), Init::TopicIdentity),
    ]);
    for h in 1..=c.max_hops {
        v.push((
            format!("w_t{h}"),
            (c.relation_dim, c.relation_dim),
            Init::IdentityNoise,
        ));
    }
    v.push(("r_null".to_string(), (1, c.relation_dim), Init::Normal));
    v
}

impl ParamLayout {
    pub fn new(c: &EncoderConfig) -> Self {
        let mut next = 0usize;
        let mut id = || {
            next += 1;
            ParamId(next - 1)
        };
        let token_emb = id();
        let pos_emb = id();
        let layers = (0..c.layers)
            .map(|_| LayerIds {
                wq: id(),
                bq: id(),
                wk: id(),
                bk: id(),
                wv: id(),
                bv: id(),
                wo: id(),
                bo: id(),
                ln1_g: id(),
                ln1_b: id(),
                w1: id(),
                b1: id(),
                w2: id(),
                b2: id(),
                ln2_g: id(),
                ln2_b: id(),
            })
            .collect();
        Self {
            token_emb,
            pos_emb,
            layers,
            entity_table: id(),
            w_r: id(),
            w_e: id(),
            w_k: id(),
            w_q: id(),
            w_t: (0..c.max_hops).map(|_| id()).collect(),
            r_null: id(),
        }
    }
}

/// Every trainable tensor, stored in layout order alongside its name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub layout: ParamLayout,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Parameter groups accepted wherever names are: `encoder` covers token and
/// position embeddings and all transformer blocks.
pub const ENCODER_GROUP: &str = "encoder";

impl ModelParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn is_encoder(name: &str) -> bool {
        name == "token_emb" || name == "pos_emb" || name.starts_with("layer")
    }

    /// Ids of the tensors a name or group refers to.
    pub fn resolve(&self, name: &str) -> Result<Vec<ParamId>> {
        let ids: Vec<ParamId> = self
            .names
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                *n == name
                    || (name == ENCODER_GROUP && Self::is_encoder(n))
                    || (name == "w_t" && n.starts_with("w_t"))
                    || n.starts_with(&format!("{name}."))
            })
            .map(|(i, _)| ParamId(i))
            .collect();
        if ids.is_empty() {
            return Err(VkbError::InvalidConfig(format!("unknown parameter {name}")));
        }
        Ok(ids)
    }

    /// Trainability mask with every listed name or group frozen.
    pub fn trainable_mask(&self, frozen: &[String]) -> Result<Vec<bool>> {
        let mut mask = vec![true; self.len()];
        for f in frozen {
            for id in self.resolve(f)? {
                mask[id.0] = false;
            }
        }
        Ok(mask)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases,
/// identity-plus-noise hop projections and a topic identity block in `W_k`
/// and `W_q`, all drawn from `config.seed`.
pub fn init_params(config: &EncoderConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, (r, c), init) in specs(config) {
        let t = match init {
            Init::Normal => Tensor::randn(r, c, INIT_STD, &mut rng),
            Init::Zeros => Tensor::zeros(r, c),
            Init::Ones => Tensor::filled(r, c, 1.0),
            Init::IdentityNoise => {
                let mut t = Tensor::randn(r, c, HOP_NOISE_STD, &mut rng);
                for i in 0..r.min(c) {
                    t.set(i, i, t.get(i, i) + 1.0);
                }
                t
            }
            Init::TopicIdentity => {
                let mut t = Tensor::randn(r, c, INIT_STD, &mut rng);
                for i in 0..config.entity_dim.min(c) {
                    t.set(i, i, t.get(i, i) + TOPIC_GAIN);
                }
                t
            }
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams {
        layout: ParamLayout::new(config),
        config: config.clone(),
        names,
        tensors,
    })
}
