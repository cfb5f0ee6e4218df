use serde::{Deserialize, Serialize};

use super::modules::{
    AdapterMode, AdapterParams, BoundAdapter, BoundLora, BoundPrefix, LoraFactor, LoraParams, PrefixParams,
    PrefixVariant,
};
use crate::checkpoint::{self, Bundle};
use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Graph, Tensor, Var};

const DOWN_STD: f64 = 0.02;
const PREFIX_STD: f64 = 0.02;
const ADAPTER_SCALE_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PetKind {
    Adapter,
    Lora,
    Prefix,
}

impl PetKind {
    pub fn name(self) -> &'static str {
        match self {
            PetKind::Adapter => "adapter",
            PetKind::Lora => "lora",
            PetKind::Prefix => "prefix",
        }
    }
}

impl std::str::FromStr for PetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(PetKind::Adapter),
            "lora" => Ok(PetKind::Lora),
            "prefix" => Ok(PetKind::Prefix),
            other => Err(Error::Config(format!("unknown PET kind `{other}` (adapter|lora|prefix)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    MlpSequential,
    MlpParallel,
    AttnQvLora,
    AttnPrefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttachmentPoint {
    pub block: usize,
    pub site: Site,
}

/// Kind, size and placement of a PET set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetConfig {
    pub kind: PetKind,
    /// Bottleneck width `r` (adapter, LoRA) or prefix length `l`.
    pub size: usize,
    pub start_block: usize,
    /// Number of consecutive blocks to adapt; `None` means the first half
    /// (rounded up) of the backbone.
    pub blocks: Option<usize>,
    pub adapter_mode: AdapterMode,
    pub prefix: PrefixVariant,
}

impl Default for PetConfig {
    fn default() -> Self {
        Self {
            kind: PetKind::Adapter,
            size: 4,
            start_block: 0,
            blocks: None,
            adapter_mode: AdapterMode::Parallel,
            prefix: PrefixVariant::CALIBRATED,
        }
    }
}

impl PetConfig {
    pub fn site(&self) -> Site {
        match (self.kind, self.adapter_mode) {
            (PetKind::Adapter, AdapterMode::Sequential) => Site::MlpSequential,
            (PetKind::Adapter, AdapterMode::Parallel) => Site::MlpParallel,
            (PetKind::Lora, _) => Site::AttnQvLora,
            (PetKind::Prefix, _) => Site::AttnPrefix,
        }
    }

    /// One kind-appropriate site in each adapted block.
    pub fn attachment_plan(&self, depth: usize) -> Result<Vec<AttachmentPoint>> {
        let count = self.blocks.unwrap_or(depth.div_ceil(2));
        if count == 0 || self.start_block + count > depth {
            return Err(Error::Config(format!(
                "PET blocks {}..{} do not fit a depth-{depth} backbone",
                self.start_block,
                self.start_block + count
            )));
        }
        let site = self.site();
        Ok((self.start_block..self.start_block + count).map(|block| AttachmentPoint { block, site }).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PetModule {
    Adapter(AdapterParams),
    Lora(LoraParams),
    Prefix(PrefixParams),
}

impl PetModule {
    /// Tensors in flatten order with their local names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            PetModule::Adapter(a) => {
                let mut v = vec![("w_down", &a.w_down), ("w_up", &a.w_up)];
                v.extend(a.scale.as_ref().map(|s| ("s", s)));
                v
            }
            PetModule::Lora(l) => vec![
                ("q.w_down", &l.query.w_down),
                ("q.w_up", &l.query.w_up),
                ("q.s", &l.query.scale),
                ("v.w_down", &l.value.w_down),
                ("v.w_up", &l.value.w_up),
                ("v.s", &l.value.scale),
            ],
            PetModule::Prefix(p) => {
                let mut v = vec![("p_k", &p.keys), ("p_v", &p.values)];
                v.extend(p.key_scale.as_ref().map(|s| ("s_k", s)));
                v.extend(p.value_scale.as_ref().map(|s| ("s_v", s)));
                v
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PetModule::Adapter(a) => {
                let mut v = vec![&mut a.w_down, &mut a.w_up];
                v.extend(a.scale.as_mut());
                v
            }
            PetModule::Lora(l) => vec![
                &mut l.query.w_down,
                &mut l.query.w_up,
                &mut l.query.scale,
                &mut l.value.w_down,
                &mut l.value.w_up,
                &mut l.value.scale,
            ],
            PetModule::Prefix(p) => {
                let mut v = vec![&mut p.keys, &mut p.values];
                v.extend(p.key_scale.as_mut());
                v.extend(p.value_scale.as_mut());
                v
            }
        }
    }

    fn init(cfg: &PetConfig, d: usize, rng: &mut Rng) -> Self {
        let r = cfg.size;
        let mut normal = |shape: &[usize], std: f64| Tensor::from_fn(shape, |_| rng::normal(rng, std));
        match cfg.kind {
            PetKind::Adapter => PetModule::Adapter(AdapterParams {
                mode: cfg.adapter_mode,
                w_down: normal(&[d, r], DOWN_STD),
                w_up: Tensor::zeros(&[r, d]),
                scale: (cfg.adapter_mode == AdapterMode::Parallel).then(|| Tensor::scalar(ADAPTER_SCALE_INIT)),
            }),
            PetKind::Lora => {
                let query = LoraFactor {
                    w_down: normal(&[d, r], DOWN_STD),
                    w_up: Tensor::zeros(&[r, d]),
                    scale: Tensor::scalar(ADAPTER_SCALE_INIT),
                };
                let value = LoraFactor {
                    w_down: normal(&[d, r], DOWN_STD),
                    w_up: Tensor::zeros(&[r, d]),
                    scale: Tensor::scalar(ADAPTER_SCALE_INIT),
                };
                PetModule::Lora(LoraParams { query, value })
            }
            PetKind::Prefix => {
                let keys = normal(&[r, d], PREFIX_STD);
                let values = normal(&[r, d], PREFIX_STD);
                let scales = cfg.prefix.scales;
                PetModule::Prefix(PrefixParams {
                    keys,
                    values,
                    key_scale: scales.then(|| Tensor::scalar(1.0)),
                    value_scale: scales.then(|| Tensor::scalar(1.0)),
                    variant: cfg.prefix,
                })
            }
        }
    }
}

/// Ordered `(name, shape)` list describing a flattened PET set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The learnable θ_pet: one module per attachment point, all of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct PetSet {
    config: PetConfig,
    dim: usize,
    modules: Vec<(AttachmentPoint, PetModule)>,
}

#[derive(Serialize, Deserialize)]
struct PetMeta {
    config: PetConfig,
    dim: usize,
    plan: Vec<AttachmentPoint>,
}

impl PetSet {
    /// Initialised set for the plan `cfg` describes on a backbone shaped like `bb`.
    pub fn new(cfg: &PetConfig, bb: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.size == 0 {
            return Err(Error::Config("PET size must be at least 1".into()));
        }
        if cfg.kind != PetKind::Prefix && cfg.size > bb.dim {
            return Err(Error::Config(format!("rank {} exceeds model dim {}", cfg.size, bb.dim)));
        }
        let plan = cfg.attachment_plan(bb.depth)?;
        let modules = plan.into_iter().map(|p| (p, PetModule::init(cfg, bb.dim, rng))).collect();
        Ok(Self { config: cfg.clone(), dim: bb.dim, modules })
    }

    /// Builds a set from explicit modules; all must share `cfg.kind` and sit
    /// at distinct points.
    pub fn from_modules(cfg: &PetConfig, dim: usize, modules: Vec<(AttachmentPoint, PetModule)>) -> Result<Self> {
        for (i, (p, m)) in modules.iter().enumerate() {
            let kind = match m {
                PetModule::Adapter(_) => PetKind::Adapter,
                PetModule::Lora(_) => PetKind::Lora,
                PetModule::Prefix(_) => PetKind::Prefix,
            };
            if kind != cfg.kind {
                return Err(Error::Layout(format!("heterogeneous set: {} module in a {} set", kind.name(), cfg.kind.name())));
            }
            if modules[..i].iter().any(|(q, _)| q == p) {
                return Err(Error::Layout(format!("two modules at block {} {:?}", p.block, p.site)));
            }
        }
        Ok(Self { config: cfg.clone(), dim, modules })
    }

    pub fn config(&self) -> &PetConfig {
        &self.config
    }

    pub fn kind(&self) -> PetKind {
        self.config.kind
    }

    pub fn modules(&self) -> &[(AttachmentPoint, PetModule)] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [(AttachmentPoint, PetModule)] {
        &mut self.modules
    }

    pub fn plan(&self) -> Vec<AttachmentPoint> {
        self.modules.iter().map(|(p, _)| *p).collect()
    }

    /// Rejects sets whose width or placement does not fit the backbone.
    pub fn check_compatible(&self, bb: &BackboneConfig) -> Result<()> {
        if self.dim != bb.dim {
            return Err(Error::Dimension(format!("PET built for dim {} on a dim-{} backbone", self.dim, bb.dim)));
        }
        if let Some((p, _)) = self.modules.iter().find(|(p, _)| p.block >= bb.depth) {
            return Err(Error::Dimension(format!("PET at block {} of a depth-{} backbone", p.block, bb.depth)));
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.modules
            .iter()
            .flat_map(|(p, m)| m.named_tensors().into_iter().map(move |(n, t)| (format!("block{}.{n}", p.block), t)))
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.modules.iter_mut().flat_map(|(_, m)| m.tensors_mut()).collect()
    }

    pub fn layout(&self) -> Layout {
        Layout { entries: self.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// All learnable values concatenated in layout order.
    pub fn flatten(&self) -> (Vec<f64>, Layout) {
        let flat = self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect();
        (flat, self.layout())
    }

    /// Inverse of [`PetSet::flatten`] for a set with the same layout.
    pub fn unflatten(&mut self, flat: &[f64], layout: &Layout) -> Result<()> {
        let own = self.layout();
        if &own != layout {
            return Err(Error::Layout("flattened vector comes from a differently shaped PET set".into()));
        }
        if flat.len() != own.len() {
            return Err(Error::Layout(format!("expected {} values, got {}", own.len(), flat.len())));
        }
        let mut pos = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum(self.tensors())
    }

    /// Records all modules in `g`, as gradient-requiring leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundPetSet> {
        let mut modules = Vec::with_capacity(self.modules.len());
        let mut vars = Vec::new();
        for (p, m) in &self.modules {
            let bound = match m {
                PetModule::Adapter(a) => {
                    let b = a.bind(g, trainable)?;
                    vars.extend([b.w_down, b.w_up]);
                    vars.extend(b.scale);
                    BoundModule::Adapter(b)
                }
                PetModule::Lora(l) => {
                    let b = l.bind(g, trainable)?;
                    for f in [&b.query, &b.value] {
                        vars.extend([f.w_down, f.w_up, f.scale]);
                    }
                    BoundModule::Lora(b)
                }
                PetModule::Prefix(pp) => {
                    let b = pp.bind(g, trainable)?;
                    vars.extend([b.keys, b.values]);
                    vars.extend(b.key_scale);
                    vars.extend(b.value_scale);
                    BoundModule::Prefix(b)
                }
            };
            modules.push((*p, bound));
        }
        Ok(BoundPetSet { modules, vars })
    }

    pub fn to_bundle(&self) -> Bundle {
        let meta = PetMeta { config: self.config.clone(), dim: self.dim, plan: self.plan() };
        let mut b = Bundle::new("pet", serde_json::to_value(meta).expect("plain data"));
        for (n, t) in self.named_tensors() {
            b.push(n, t);
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        b.expect_kind("pet")?;
        let meta: PetMeta =
            serde_json::from_value(b.meta.clone()).map_err(|e| Error::Checkpoint(format!("pet meta: {e}")))?;
        // Rebuild the skeleton deterministically, then overwrite every value.
        let mut rng = rng::seeded(0);
        let modules = meta.plan.iter().map(|p| (*p, PetModule::init(&meta.config, meta.dim, &mut rng))).collect();
        let mut set = Self { config: meta.config, dim: meta.dim, modules };
        let names: Vec<String> = set.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(set.tensors_mut()) {
            let t = b.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(set)
    }
}

#[derive(Clone, Debug)]
pub enum BoundModule {
    Adapter(BoundAdapter),
    Lora(BoundLora),
    Prefix(BoundPrefix),
}

/// A PET set recorded on a graph; the model's forward pass queries it per block.
#[derive(Clone, Debug)]
pub struct BoundPetSet {
    modules: Vec<(AttachmentPoint, BoundModule)>,
    vars: Vec<Var>,
}

impl BoundPetSet {
    /// Leaves in [`PetSet::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn find(&self, block: usize) -> impl Iterator<Item = &BoundModule> {
        self.modules.iter().filter(move |(p, _)| p.block == block).map(|(_, m)| m)
    }

    pub fn adapter(&self, block: usize) -> Option<&BoundAdapter> {
        self.find(block).find_map(|m| match m {
            BoundModule::Adapter(a) => Some(a),
            _ => None,
        })
    }

    pub fn lora(&self, block: usize) -> Option<&BoundLora> {
        self.find(block).find_map(|m| match m {
            BoundModule::Lora(l) => Some(l),
            _ => None,
        })
    }

    pub fn prefix(&self, block: usize) -> Option<&BoundPrefix> {
        self.find(block).find_map(|m| match m {
            BoundModule::Prefix(p) => Some(p),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn bb(depth: usize, dim: usize) -> BackboneConfig {
        BackboneConfig { depth, dim, heads: 4, ..BackboneConfig::default() }
    }

    fn cfg(kind: PetKind, size: usize) -> PetConfig {
        PetConfig { kind, size, ..PetConfig::default() }
    }

    #[test]
    fn default_plan_covers_first_half_rounded_up() {
        for (depth, want) in [(1, 1), (4, 2), (5, 3), (12, 6)] {
            let plan = cfg(PetKind::Adapter, 2).attachment_plan(depth).unwrap();
            assert_eq!(plan.iter().map(|p| p.block).collect::<Vec<_>>(), (0..want).collect::<Vec<_>>());
        }
        let shifted = PetConfig { start_block: 2, blocks: Some(2), ..cfg(PetKind::Lora, 2) };
        let plan = shifted.attachment_plan(4).unwrap();
        assert_eq!(plan, vec![AttachmentPoint { block: 2, site: Site::AttnQvLora }, AttachmentPoint { block: 3, site: Site::AttnQvLora }]);
        assert!(PetConfig { start_block: 3, blocks: Some(2), ..cfg(PetKind::Lora, 2) }.attachment_plan(4).is_err());
        assert!(PetConfig { blocks: Some(0), ..cfg(PetKind::Lora, 2) }.attachment_plan(4).is_err());
    }

    #[test]
    fn param_counts_match_closed_forms() {
        let (d, k) = (32, 2);
        for r in [1, 4, 8] {
            let mut rng = rng::seeded(r as u64);
            let count = |c: PetConfig, rng: &mut Rng| PetSet::new(&c, &bb(4, d), rng).unwrap().flatten().0.len();
            assert_eq!(count(cfg(PetKind::Adapter, r), &mut rng), k * (2 * d * r + 1));
            let seq = PetConfig { adapter_mode: AdapterMode::Sequential, ..cfg(PetKind::Adapter, r) };
            assert_eq!(count(seq, &mut rng), k * 2 * d * r);
            assert_eq!(count(cfg(PetKind::Lora, r), &mut rng), k * 2 * (2 * d * r + 1));
            assert_eq!(count(cfg(PetKind::Prefix, r), &mut rng), k * (2 * r * d + 2));
            let plain = PetConfig { prefix: PrefixVariant::UNCALIBRATED, ..cfg(PetKind::Prefix, r) };
            assert_eq!(count(plain, &mut rng), k * 2 * r * d);
        }
    }

    #[test]
    fn flatten_round_trip_and_layouts() {
        for kind in [PetKind::Adapter, PetKind::Lora, PetKind::Prefix] {
            let mut r = rng::seeded(3);
            let mut a = PetSet::new(&cfg(kind, 3), &bb(4, 16), &mut r).unwrap();
            let b = PetSet::new(&cfg(kind, 3), &bb(4, 16), &mut r).unwrap();
            assert_eq!(a.layout(), b.layout());
            for t in a.tensors_mut() {
                for v in t.data_mut() {
                    *v = r.random_range(-1.0..1.0);
                }
            }
            let (flat, layout) = a.flatten();
            assert_eq!(layout.len(), flat.len());
            let mut c = b.clone();
            c.unflatten(&flat, &layout).unwrap();
            assert_eq!(c, a);
            assert!(c.unflatten(&flat[1..], &layout).is_err());
            let other = PetSet::new(&cfg(kind, 2), &bb(4, 16), &mut r).unwrap();
            assert!(c.unflatten(&flat, &other.layout()).is_err());
        }
    }

    #[test]
    fn initial_values() {
        let mut r = rng::seeded(4);
        let a = PetSet::new(&cfg(PetKind::Adapter, 2), &bb(4, 16), &mut r).unwrap();
        let PetModule::Adapter(ad) = &a.modules()[0].1 else { panic!() };
        assert!(ad.w_up.data().iter().all(|&v| v == 0.0));
        assert_eq!(ad.scale.as_ref().unwrap().item().unwrap(), 0.1);
        let p = PetSet::new(&cfg(PetKind::Prefix, 2), &bb(4, 16), &mut r).unwrap();
        let PetModule::Prefix(pp) = &p.modules()[0].1 else { panic!() };
        assert_eq!(pp.key_scale.as_ref().unwrap().item().unwrap(), 1.0);
        assert_eq!(pp.value_scale.as_ref().unwrap().item().unwrap(), 1.0);
        assert!(pp.keys.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn construction_errors() {
        let mut r = rng::seeded(5);
        assert!(PetSet::new(&cfg(PetKind::Adapter, 0), &bb(4, 16), &mut r).is_err());
        assert!(PetSet::new(&cfg(PetKind::Lora, 17), &bb(4, 16), &mut r).is_err());
        assert!(PetSet::new(&cfg(PetKind::Prefix, 17), &bb(4, 16), &mut r).is_ok());

        let a = PetSet::new(&cfg(PetKind::Adapter, 2), &bb(4, 16), &mut r).unwrap();
        let l = PetSet::new(&cfg(PetKind::Lora, 2), &bb(4, 16), &mut r).unwrap();
        let mixed = vec![a.modules()[0].clone(), (AttachmentPoint { block: 1, site: Site::AttnQvLora }, l.modules()[0].1.clone())];
        assert!(matches!(PetSet::from_modules(&cfg(PetKind::Adapter, 2), 16, mixed), Err(Error::Layout(_))));
        let dup = vec![a.modules()[0].clone(), a.modules()[0].clone()];
        assert!(PetSet::from_modules(&cfg(PetKind::Adapter, 2), 16, dup).is_err());

        assert!(a.check_compatible(&bb(4, 16)).is_ok());
        assert!(a.check_compatible(&bb(4, 32)).is_err());
        assert!(a.check_compatible(&bb(1, 16)).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        for kind in [PetKind::Adapter, PetKind::Lora, PetKind::Prefix] {
            let mut r = rng::seeded(6);
            let mut a = PetSet::new(&cfg(kind, 3), &bb(4, 16), &mut r).unwrap();
            for t in a.tensors_mut() {
                for v in t.data_mut() {
                    *v += r.random_range(-1.0..1.0);
                }
            }
            let bytes = a.to_bundle().to_bytes();
            let back = PetSet::from_bundle(&Bundle::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, a);
            assert_eq!(back.checksum(), a.checksum());
        }
    }

    #[test]
    fn kind_names_parse() {
        for kind in [PetKind::Adapter, PetKind::Lora, PetKind::Prefix] {
            assert_eq!(kind.name().parse::<PetKind>().unwrap(), kind);
        }
        assert!("prompt".parse::<PetKind>().is_err());
    }
}
