//! Biased motif-plus-base graph classification data.
//!
//! Each example is a label-determining motif bridged to a base graph whose
//! kind correlates with the label in the train/val splits with strength
//! `bias`. Test bases are drawn uniformly, so a model that relies on the
//! base pays for it on test.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LabeledExample};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotifKind {
    Cycle,
    House,
    Crane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseKind {
    Tree,
    Ladder,
    Wheel,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::Cycle, MotifKind::House, MotifKind::Crane];

    pub fn class_index(self) -> usize {
        self as usize
    }
}

impl BaseKind {
    pub const ALL: [BaseKind; 3] = [BaseKind::Tree, BaseKind::Ladder, BaseKind::Wheel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Tree => "tree",
            BaseKind::Ladder => "ladder",
            BaseKind::Wheel => "wheel",
        }
    }
}

/// Edge list on nodes `0..num_nodes`, not yet carrying features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatMode {
    /// One-hot of `min(degree, feat_dim - 1)`.
    DegreeOneHot,
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub bias: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_size_range: (usize, usize),
    pub feat_mode: FeatMode,
    pub feat_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bias: 0.9,
            n_train: 600,
            n_val: 200,
            n_test: 600,
            base_size_range: (20, 30),
            feat_mode: FeatMode::DegreeOneHot,
            feat_dim: 11,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.bias) {
            return bad(format!("bias {} outside [0, 1]", self.bias));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be positive".into());
        }
        let (lo, hi) = self.base_size_range;
        if lo < 4 || lo > hi {
            return bad(format!("base size range ({lo}, {hi}) must satisfy 4 <= min <= max"));
        }
        if self.feat_dim < 2 {
            return bad("feat_dim must be at least 2".into());
        }
        Ok(())
    }
}

pub fn make_motif(kind: MotifKind) -> Fragment {
    let edges = match kind {
        MotifKind::Cycle => vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
        // square 0-1-2-3 with apex 4 over the 0-1 side
        MotifKind::House => vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
        // mast 0-1-2, boom 2-3-4 braced by 1-3, hook 4-5
        MotifKind::Crane => vec![(0, 1), (1, 2), (2, 3), (3, 4), (1, 3), (4, 5)],
    };
    let num_nodes = if kind == MotifKind::Crane { 6 } else { 5 };
    Fragment { num_nodes, edges }
}

pub fn make_base<R: Rng>(kind: BaseKind, size: usize, rng: &mut R) -> Result<Fragment> {
    if size < 4 {
        return Err(Error::SizeTooSmall(size));
    }
    Ok(match kind {
        BaseKind::Tree => {
            let edges = (1..size).map(|i| (rng.gen_range(0..i), i)).collect();
            Fragment { num_nodes: size, edges }
        }
        BaseKind::Ladder => {
            let rungs = size / 2;
            let mut edges = Vec::with_capacity(3 * rungs - 2);
            for k in 0..rungs {
                edges.push((k, rungs + k));
                if k + 1 < rungs {
                    edges.push((k, k + 1));
                    edges.push((rungs + k, rungs + k + 1));
                }
            }
            Fragment { num_nodes: 2 * rungs, edges }
        }
        BaseKind::Wheel => {
            let rim = size - 1;
            let mut edges = Vec::with_capacity(2 * rim);
            for k in 1..=rim {
                edges.push((0, k));
                edges.push((k, if k == rim { 1 } else { k + 1 }));
            }
            Fragment { num_nodes: size, edges }
        }
    })
}

/// Bridged base + motif. Base nodes come first; masks mark the motif.
#[derive(Clone, Debug)]
pub struct Attached {
    pub fragment: Fragment,
    pub gt_edge_mask: Vec<bool>,
    pub gt_node_mask: Vec<bool>,
}

pub fn attach<R: Rng>(base: &Fragment, motif: &Fragment, rng: &mut R) -> Attached {
    let off = base.num_nodes;
    let mut edges = base.edges.clone();
    let mut gt_edge_mask = vec![false; base.edges.len()];
    edges.extend(motif.edges.iter().map(|&(u, v)| (u + off, v + off)));
    gt_edge_mask.extend(std::iter::repeat(true).take(motif.edges.len()));
    let b = rng.gen_range(0..base.num_nodes);
    let m = rng.gen_range(0..motif.num_nodes);
    edges.push((b, off + m));
    gt_edge_mask.push(false);
    let num_nodes = off + motif.num_nodes;
    let gt_node_mask = (0..num_nodes).map(|i| i >= off).collect();
    Attached { fragment: Fragment { num_nodes, edges }, gt_edge_mask, gt_node_mask }
}

fn features<R: Rng>(frag: &Fragment, mode: FeatMode, dim: usize, rng: &mut R) -> Result<Tensor> {
    let n = frag.num_nodes;
    let mut data = vec![0.0; n * dim];
    match mode {
        FeatMode::DegreeOneHot => {
            let mut deg = vec![0usize; n];
            for &(u, v) in &frag.edges {
                deg[u] += 1;
                deg[v] += 1;
            }
            for (i, d) in deg.into_iter().enumerate() {
                data[i * dim + d.min(dim - 1)] = 1.0;
            }
        }
        FeatMode::UniformRandom => data.iter_mut().for_each(|x| *x = rng.gen()),
    }
    Tensor::matrix(n, dim, data)
}

fn generate_split<R: Rng>(cfg: &SynthConfig, count: usize, bias: Option<f64>, rng: &mut R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let motif_kind = MotifKind::ALL[rng.gen_range(0..3)];
        let label = motif_kind.class_index();
        let base_kind = match bias {
            Some(b) => {
                if rng.gen::<f64>() < b {
                    BaseKind::ALL[label]
                } else {
                    let others: Vec<BaseKind> = BaseKind::ALL.into_iter().filter(|k| k.index() != label).collect();
                    *others.choose(rng).expect("two alternatives")
                }
            }
            None => BaseKind::ALL[rng.gen_range(0..3)],
        };
        let size = rng.gen_range(cfg.base_size_range.0..=cfg.base_size_range.1);
        let base = make_base(base_kind, size, rng)?;
        let joined = attach(&base, &make_motif(motif_kind), rng);
        let feats = features(&joined.fragment, cfg.feat_mode, cfg.feat_dim, rng)?;
        let graph = Graph::new(joined.fragment.num_nodes, &joined.fragment.edges, feats)?;
        let node_labels = joined.gt_node_mask.iter().map(|&m| usize::from(m)).collect();
        out.push(LabeledExample {
            graph,
            label,
            gt_edge_mask: Some(joined.gt_edge_mask),
            gt_node_mask: Some(joined.gt_node_mask),
            node_labels: Some(node_labels),
            env: Some(base_kind.name().to_string()),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Biased train/val, unbiased test. Each split draws from its own
/// sub-stream of the data seed.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Splits> {
    cfg.validate()?;
    let split = |i: u64, n: usize, bias: Option<f64>| {
        let mut rng = substream(cfg.seed, Stream::Data, i);
        generate_split(cfg, n, bias, &mut rng)
    };
    Ok(Splits {
        train: split(0, cfg.n_train, Some(cfg.bias))?,
        val: split(1, cfg.n_val, Some(cfg.bias))?,
        test: split(2, cfg.n_test, None)?,
    })
}
