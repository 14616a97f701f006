//! Named, freezable parameter groups and the shape layouts that drive them.
//!
//! A layout ([`GroupSpec`]) lists every parameter's name, shape, and
//! initialization rule without allocating values. The same layout is used to
//! allocate a [`ParamStore`] and to count parameters, so the two can never
//! disagree.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Standard deviation of normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
    /// Square identity matrix.
    Identity,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name: name.into(), shape, init }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub params: Vec<ParamSpec>,
}

impl GroupSpec {
    pub fn numel(&self) -> u64 {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

/// Sum of parameter counts over a layout.
pub fn layout_numel(layout: &[GroupSpec]) -> u64 {
    layout.iter().map(GroupSpec::numel).sum()
}

/// Backbone layout: embeddings, per-layer attention and feed-forward blocks,
/// and the MLM head (its output projection is tied to the token embeddings).
pub fn backbone_layout(cfg: &EncoderConfig) -> Vec<GroupSpec> {
    let h = cfg.hidden;
    let mut groups = Vec::with_capacity(cfg.layers * 2 + 2);
    groups.push(GroupSpec {
        name: "embeddings".into(),
        params: vec![
            ParamSpec::new("token", vec![cfg.vocab_size, h], Init::Normal),
            ParamSpec::new("position", vec![cfg.max_positions, h], Init::Normal),
            ParamSpec::new("token_type", vec![cfg.type_vocab, h], Init::Normal),
            ParamSpec::new("ln_gamma", vec![h], Init::Ones),
            ParamSpec::new("ln_beta", vec![h], Init::Zeros),
        ],
    });
    for l in 0..cfg.layers {
        groups.push(GroupSpec {
            name: format!("layer.{l}.attention"),
            params: vec![
                ParamSpec::new("q_w", vec![h, h], Init::Normal),
                ParamSpec::new("q_b", vec![h], Init::Zeros),
                ParamSpec::new("k_w", vec![h, h], Init::Normal),
                ParamSpec::new("k_b", vec![h], Init::Zeros),
                ParamSpec::new("v_w", vec![h, h], Init::Normal),
                ParamSpec::new("v_b", vec![h], Init::Zeros),
                ParamSpec::new("o_w", vec![h, h], Init::Normal),
                ParamSpec::new("o_b", vec![h], Init::Zeros),
                ParamSpec::new("ln_gamma", vec![h], Init::Ones),
                ParamSpec::new("ln_beta", vec![h], Init::Zeros),
            ],
        });
        groups.push(GroupSpec {
            name: format!("layer.{l}.ffn"),
            params: vec![
                ParamSpec::new("up_w", vec![h, cfg.ff_dim], Init::Normal),
                ParamSpec::new("up_b", vec![cfg.ff_dim], Init::Zeros),
                ParamSpec::new("down_w", vec![cfg.ff_dim, h], Init::Normal),
                ParamSpec::new("down_b", vec![h], Init::Zeros),
                ParamSpec::new("ln_gamma", vec![h], Init::Ones),
                ParamSpec::new("ln_beta", vec![h], Init::Zeros),
            ],
        });
    }
    groups.push(GroupSpec {
        name: "mlm_head".into(),
        params: vec![
            ParamSpec::new("transform_w", vec![h, h], Init::Normal),
            ParamSpec::new("transform_b", vec![h], Init::Zeros),
            ParamSpec::new("ln_gamma", vec![h], Init::Ones),
            ParamSpec::new("ln_beta", vec![h], Init::Zeros),
            ParamSpec::new("output_bias", vec![cfg.vocab_size], Init::Zeros),
        ],
    });
    groups
}

/// Is this group part of the frozen-able backbone (as opposed to an adapter,
/// fusion block, or classification head)?
pub fn is_backbone_group(name: &str) -> bool {
    name == "embeddings" || name == "mlm_head" || name.starts_with("layer.")
}

/// Is this group part of a language adapter (single or fusion member)?
pub fn is_language_group(name: &str) -> bool {
    match name.strip_prefix("la") {
        Some(rest) => rest.starts_with('.') || rest.chars().next().is_some_and(|c| c.is_ascii_digit()),
        None => false,
    }
}

/// Which parameter groups stay fixed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Backbone frozen; adapters, fusion, and heads train.
    BaseFrozen,
    /// Backbone and language adapters frozen; task adapter, fusion, and heads train.
    BaseAndLanguageFrozen,
    /// Everything trains.
    NothingFrozen,
}

impl FreezePolicy {
    pub fn freezes(&self, group_name: &str) -> bool {
        match self {
            FreezePolicy::NothingFrozen => false,
            FreezePolicy::BaseFrozen => is_backbone_group(group_name),
            FreezePolicy::BaseAndLanguageFrozen => {
                is_backbone_group(group_name) || is_language_group(group_name)
            }
        }
    }
}

/// Key of a single parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: usize,
    pub param: usize,
}

#[derive(Debug, Clone)]
pub struct ParamGroup<E> {
    pub name: String,
    pub frozen: bool,
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> ParamGroup<E> {
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn numel(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn get(&self, param: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == param).map(|i| &self.tensors[i])
    }
}

/// Ordered collection of named parameter groups, each independently freezable.
#[derive(Debug, Clone)]
pub struct ParamStore<E> {
    groups: Vec<ParamGroup<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { groups: Vec::new(), index: HashMap::new() }
    }

    /// Allocate and initialize every group of `layout`, drawing random values
    /// from a single ChaCha stream seeded with `seed`. Identical seed and
    /// layout give bitwise-identical parameters.
    pub fn from_layout(layout: &[GroupSpec], seed: u64) -> Self {
        let mut store = ParamStore::new();
        store.extend_from_layout(layout, seed);
        store
    }

    /// Append groups from a layout (used when attaching adapters to an
    /// existing model).
    pub fn extend_from_layout(&mut self, layout: &[GroupSpec], seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid init std");
        for spec in layout {
            let mut names = Vec::with_capacity(spec.params.len());
            let mut tensors = Vec::with_capacity(spec.params.len());
            for p in &spec.params {
                let numel: usize = p.shape.iter().product();
                let values: Vec<E> = match p.init {
                    Init::Zeros => vec![E::zero(); numel],
                    Init::Ones => vec![E::one(); numel],
                    Init::Normal => {
                        (0..numel).map(|_| E::from_f64(normal.sample(&mut rng))).collect()
                    }
                    Init::Identity => {
                        assert_eq!(p.shape.len(), 2, "identity init needs a matrix");
                        assert_eq!(p.shape[0], p.shape[1], "identity init needs a square matrix");
                        let n = p.shape[0];
                        let mut v = vec![E::zero(); numel];
                        for i in 0..n {
                            v[i * n + i] = E::one();
                        }
                        v
                    }
                };
                names.push(p.name.clone());
                tensors.push(Tensor::from_values(p.shape.clone(), values).expect("layout shape"));
            }
            self.push_group(ParamGroup { name: spec.name.clone(), frozen: false, names, tensors });
        }
    }

    pub fn push_group(&mut self, group: ParamGroup<E>) {
        assert!(
            !self.index.contains_key(&group.name),
            "duplicate parameter group {}",
            group.name
        );
        self.index.insert(group.name.clone(), self.groups.len());
        self.groups.push(group);
    }

    pub fn groups(&self) -> &[ParamGroup<E>] {
        &self.groups
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter group {name}")))
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup<E>> {
        Ok(&self.groups[self.group_index(name)?])
    }

    pub fn key(&self, group: &str, param: &str) -> Result<ParamKey> {
        let g = self.group_index(group)?;
        let p = self.groups[g]
            .names
            .iter()
            .position(|n| n == param)
            .ok_or_else(|| Error::Config(format!("unknown parameter {group}/{param}")))?;
        Ok(ParamKey { group: g, param: p })
    }

    pub fn tensor(&self, key: ParamKey) -> &Tensor<E> {
        &self.groups[key.group].tensors[key.param]
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor<E> {
        &mut self.groups[key.group].tensors[key.param]
    }

    pub fn get(&self, group: &str, param: &str) -> Result<&Tensor<E>> {
        Ok(self.tensor(self.key(group, param)?))
    }

    pub fn key_name(&self, key: ParamKey) -> String {
        format!("{}/{}", self.groups[key.group].name, self.groups[key.group].names[key.param])
    }

    pub fn is_frozen(&self, key: ParamKey) -> bool {
        self.groups[key.group].frozen
    }

    /// Set every group's frozen flag from a policy.
    pub fn apply_freeze(&mut self, policy: FreezePolicy) {
        for g in &mut self.groups {
            g.frozen = policy.freezes(&g.name);
        }
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let i = self.group_index(group)?;
        self.groups[i].frozen = frozen;
        Ok(())
    }

    /// Exact count of scalar parameters in non-frozen groups.
    pub fn count_trainable(&self) -> u64 {
        self.groups.iter().filter(|g| !g.frozen).map(ParamGroup::numel).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    /// All parameter keys in group order.
    pub fn keys(&self) -> Vec<ParamKey> {
        let mut out = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            for p in 0..group.tensors.len() {
                out.push(ParamKey { group: g, param: p });
            }
        }
        out
    }

    /// Keys of trainable (non-frozen) parameters in group order.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        let mut out = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            if group.frozen {
                continue;
            }
            for p in 0..group.tensors.len() {
                out.push(ParamKey { group: g, param: p });
            }
        }
        out
    }

    /// Clone the groups whose names pass `pred` (used for adapter checkpoints
    /// and best-model snapshots).
    pub fn clone_matching(&self, pred: impl Fn(&str) -> bool) -> Vec<ParamGroup<E>> {
        self.groups.iter().filter(|g| pred(&g.name)).cloned().collect()
    }

    /// Overwrite values of existing groups from a snapshot produced by
    /// [`ParamStore::clone_matching`].
    pub fn restore_groups(&mut self, snapshot: &[ParamGroup<E>]) -> Result<()> {
        for g in snapshot {
            let idx = self.group_index(&g.name)?;
            let dst = &mut self.groups[idx];
            if dst.names != g.names {
                return Err(Error::Checkpoint(format!("group {} layout mismatch", g.name)));
            }
            for (d, s) in dst.tensors.iter_mut().zip(&g.tensors) {
                if d.shape() != s.shape() {
                    return Err(Error::Checkpoint(format!("group {} shape mismatch", g.name)));
                }
                d.values_mut().copy_from_slice(s.values());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 100,
            hidden: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_positions: 16,
            type_vocab: 2,
            dropout: 0.0,
            objective: Default::default(),
        }
    }

    #[test]
    fn layout_matches_closed_form_count() {
        let cfg = toy_config();
        assert_eq!(layout_numel(&backbone_layout(&cfg)), cfg.param_count());
    }

    #[test]
    fn allocation_matches_layout() {
        let cfg = toy_config();
        let store: ParamStore<f32> = ParamStore::from_layout(&backbone_layout(&cfg), 7);
        assert_eq!(store.total_params(), cfg.param_count());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = toy_config();
        let a: ParamStore<f32> = ParamStore::from_layout(&backbone_layout(&cfg), 42);
        let b: ParamStore<f32> = ParamStore::from_layout(&backbone_layout(&cfg), 42);
        for (ga, gb) in a.groups().iter().zip(b.groups()) {
            for (ta, tb) in ga.tensors().iter().zip(gb.tensors()) {
                let bits_a: Vec<u32> = ta.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = tb.values().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn freeze_policy_classifies_groups() {
        assert!(FreezePolicy::BaseFrozen.freezes("layer.3.ffn"));
        assert!(FreezePolicy::BaseFrozen.freezes("embeddings"));
        assert!(!FreezePolicy::BaseFrozen.freezes("la.layer.0"));
        assert!(FreezePolicy::BaseAndLanguageFrozen.freezes("la.layer.0"));
        assert!(FreezePolicy::BaseAndLanguageFrozen.freezes("la1.inv"));
        assert!(!FreezePolicy::BaseAndLanguageFrozen.freezes("fusion.layer.2"));
        assert!(!FreezePolicy::BaseAndLanguageFrozen.freezes("ta.layer.2"));
        assert!(!FreezePolicy::BaseAndLanguageFrozen.freezes("head.sequence"));
        assert!(!FreezePolicy::NothingFrozen.freezes("embeddings"));
    }

    #[test]
    fn closed_form_matches_enumeration_for_random_configs() {
        // 20 random small geometries
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let heads = rng.gen_range(1..4usize);
            let cfg = EncoderConfig {
                vocab_size: rng.gen_range(10..200),
                hidden: heads * rng.gen_range(2..10usize) * 2,
                layers: rng.gen_range(1..4),
                heads,
                ff_dim: rng.gen_range(4..64),
                max_positions: rng.gen_range(4..32),
                type_vocab: rng.gen_range(1..3),
                dropout: 0.0,
                objective: Default::default(),
            };
            let enumerated: u64 = backbone_layout(&cfg)
                .iter()
                .flat_map(|g| g.params.iter())
                .map(|p| p.shape.iter().map(|&d| d as u64).product::<u64>())
                .sum();
            assert_eq!(cfg.param_count(), enumerated, "config {cfg:?}");
        }
    }
}
