//! RISnet: a permutation-equivariant network from pilot features to phase
//! shifts.
//!
//! Every layer acts on a grid of feature vectors indexed by (user, unit),
//! where a unit is a block before the expansion layer and an RIS element
//! after it. A layer has four weight/bias pairs, one per feature category:
//!
//! | category | input pooled over                         |
//! |----------|-------------------------------------------|
//! | `cc`     | this user, this unit                      |
//! | `ca`     | this user, mean over all units            |
//! | `oc`     | mean over other users, this unit          |
//! | `oa`     | mean over other users and all units       |
//!
//! Each category produces `width / 4` outputs (`ReLU` applied before the
//! pooling) and the four are concatenated. Because pooling is by means and
//! weights are shared across units and users, the layer is equivariant to
//! permutations of either axis.
//!
//! The expansion layer holds one four-category weight group per position
//! `j` inside a block. Group `j` applied to the block grid yields the
//! features of element `ν(n, j)` for every block `n`, which turns `I` block
//! features into `I · J = N` element features.
//!
//! The head averages the element features over users, maps each to a pair
//! `(a, b)` and emits the phase `φ = atan2(b, a) / π`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph, NodeId, Tape};
use crate::channel::RisConfig;
use crate::error::{Error, Result};
use crate::probing::{FeatureScaler, FeatureTensor, ProbeSchedule};
use crate::rng::stream_rng;

pub const CATEGORIES: [&str; 4] = ["cc", "ca", "oc", "oa"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Length of each input feature vector (`4M`).
    pub input_dim: usize,
    /// Feature width `F` of every hidden layer; a multiple of 4.
    pub width: usize,
    pub pre_layers: usize,
    pub post_layers: usize,
    /// Elements per probing block (`J`), i.e. weight groups in the expansion.
    pub block_size: usize,
}

impl NetworkConfig {
    /// Two block layers, the expansion, one element layer, width 32.
    pub fn with_defaults(bs_antennas: usize, block_size: usize) -> Self {
        Self {
            input_dim: 4 * bs_antennas,
            width: 32,
            pre_layers: 2,
            post_layers: 1,
            block_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("network.input_dim", "must be positive"));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::config(
                "network.width",
                format!("must be a positive multiple of 4, got {}", self.width),
            ));
        }
        if self.block_size == 0 {
            return Err(Error::config("network.block_size", "must be positive"));
        }
        Ok(())
    }
}

/// Dense `rows × cols` weight matrix (row-major) and bias of length `rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T> Dense<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.weight[r * self.cols..(r + 1) * self.cols]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Dense<U> {
        Dense {
            rows: self.rows,
            cols: self.cols,
            weight: self.weight.iter().map(&mut *f).collect(),
            bias: self.bias.iter().map(&mut *f).collect(),
        }
    }
}

impl<T: Copy> Dense<T> {
    /// `ReLU(W x + b)` on a graph.
    fn relu_affine<G: Graph<V = T>>(&self, g: &mut G, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|r| {
                let pre = g.affine(self.row(r), x, self.bias[r]);
                g.relu(pre)
            })
            .collect()
    }
}

/// Four-category weights of one layer, in `cc, ca, oc, oa` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub categories: [Dense<T>; 4],
}

impl<T> LayerParams<T> {
    pub fn in_dim(&self) -> usize {
        self.categories[0].cols
    }

    pub fn out_dim(&self) -> usize {
        4 * self.categories[0].rows
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        let [a, b, c, d] = &self.categories;
        LayerParams {
            categories: [a.map(f), b.map(f), c.map(f), d.map(f)],
        }
    }
}

/// One weight group per within-block position.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionParams<T> {
    pub groups: Vec<LayerParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f64> {
    pub config: NetworkConfig,
    pub pre: Vec<LayerParams<T>>,
    pub expansion: ExpansionParams<T>,
    pub post: Vec<LayerParams<T>>,
    /// `2 × width` map to the `(a, b)` pair of each element.
    pub head: Dense<T>,
}

impl<T> NetworkParams<T> {
    /// Every dense block with a stable name, in serialization order.
    pub fn tensors(&self) -> Vec<(String, &Dense<T>)> {
        fn push_layer<'a, T>(prefix: String, layer: &'a LayerParams<T>, out: &mut Vec<(String, &'a Dense<T>)>) {
            for (cat, dense) in CATEGORIES.iter().zip(&layer.categories) {
                out.push((format!("{prefix}.{cat}"), dense));
            }
        }
        let mut out = Vec::new();
        for (i, l) in self.pre.iter().enumerate() {
            push_layer(format!("pre{i}"), l, &mut out);
        }
        for (j, l) in self.expansion.groups.iter().enumerate() {
            push_layer(format!("expand{j}"), l, &mut out);
        }
        for (i, l) in self.post.iter().enumerate() {
            push_layer(format!("post{i}"), l, &mut out);
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, d)| d.weight.len() + d.bias.len())
            .sum()
    }

    /// Applies `f` to every parameter in serialization order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NetworkParams<U> {
        let f = &mut f;
        NetworkParams {
            config: self.config.clone(),
            pre: self.pre.iter().map(|l| l.map(f)).collect(),
            expansion: ExpansionParams {
                groups: self.expansion.groups.iter().map(|l| l.map(f)).collect(),
            },
            post: self.post.iter().map(|l| l.map(f)).collect(),
            head: self.head.map(f),
        }
    }
}

impl<T: Copy> NetworkParams<T> {
    /// All parameters in serialization order (per tensor: weights, then bias).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, d) in self.tensors() {
            out.extend_from_slice(&d.weight);
            out.extend_from_slice(&d.bias);
        }
        out
    }
}

impl NetworkParams<f64> {
    /// Rebuilds parameters of `config`'s shape from a flat vector.
    pub fn from_flat(config: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        let template = zero_params(config)?;
        if flat.len() != template.num_parameters() {
            return Err(Error::Shape {
                op: "NetworkParams::from_flat",
                left: (template.num_parameters(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut it = flat.iter();
        Ok(template.map(|_| *it.next().expect("length checked")))
    }

    /// Euclidean norm of all parameters.
    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn layer_shapes(config: &NetworkConfig) -> (Vec<usize>, usize, Vec<usize>) {
    // Input dims of pre layers, expansion, post layers.
    let f = config.width;
    let pre: Vec<usize> = (0..config.pre_layers)
        .map(|i| if i == 0 { config.input_dim } else { f })
        .collect();
    let expand_in = if config.pre_layers == 0 { config.input_dim } else { f };
    let post = vec![f; config.post_layers];
    (pre, expand_in, post)
}

fn build_params(
    config: &NetworkConfig,
    mut init: impl FnMut(usize, usize) -> Vec<f64>,
) -> Result<NetworkParams<f64>> {
    config.validate()?;
    let q = config.width / 4;
    let mut dense = |rows: usize, cols: usize| Dense {
        rows,
        cols,
        weight: init(rows, cols),
        bias: vec![0.0; rows],
    };
    let mut layer = |cols: usize| LayerParams {
        categories: [dense(q, cols), dense(q, cols), dense(q, cols), dense(q, cols)],
    };
    let (pre_in, expand_in, post_in) = layer_shapes(config);
    let pre = pre_in.into_iter().map(&mut layer).collect();
    let groups = (0..config.block_size).map(|_| layer(expand_in)).collect();
    let post = post_in.into_iter().map(&mut layer).collect();
    let head = Dense {
        rows: 2,
        cols: config.width,
        weight: init(2, config.width),
        bias: vec![0.0; 2],
    };
    Ok(NetworkParams {
        config: config.clone(),
        pre,
        expansion: ExpansionParams { groups },
        post,
        head,
    })
}

pub fn zero_params(config: &NetworkConfig) -> Result<NetworkParams<f64>> {
    build_params(config, |r, c| vec![0.0; r * c])
}

/// Glorot-uniform weights: each `rows × cols` matrix is drawn uniformly from
/// `±√(6 / (rows + cols))`; biases start at zero.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<f64>> {
    let mut rng = stream_rng(seed, 0);
    build_params(config, |rows, cols| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect()
    })
}

/// Feature vectors on a (user, unit) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<V> {
    pub users: usize,
    pub units: usize,
    pub dim: usize,
    /// Indexed `[(u * units + k) * dim + d]`.
    pub data: Vec<V>,
}

impl<V: Copy> Grid<V> {
    pub fn get(&self, u: usize, k: usize) -> &[V] {
        let start = (u * self.units + k) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn map<W>(&self, f: impl FnMut(&V) -> W) -> Grid<W> {
        Grid {
            users: self.users,
            units: self.units,
            dim: self.dim,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Grid<f64> {
    pub fn from_features(features: &FeatureTensor) -> Self {
        Grid {
            users: features.users(),
            units: features.blocks(),
            dim: features.dim(),
            data: features.as_slice().to_vec(),
        }
    }
}

/// One four-category layer. Needs at least two users because the
/// other-user categories average over `U − 1` users.
pub fn layer_forward<G: Graph>(
    g: &mut G,
    params: &LayerParams<G::V>,
    input: &Grid<G::V>,
) -> Result<Grid<G::V>> {
    let (users, units) = (input.users, input.units);
    if users < 2 {
        return Err(Error::Contract(format!(
            "RISnet layers need at least 2 users, got {users}"
        )));
    }
    if units == 0 {
        return Err(Error::Contract("RISnet layer on zero units".into()));
    }
    if input.dim != params.in_dim() {
        return Err(Error::Shape {
            op: "layer_forward",
            left: (params.categories[0].rows, params.in_dim()),
            right: (input.dim, 1),
        });
    }
    let q = params.categories[0].rows;
    let [cc, ca, oc, oa] = &params.categories;

    // Activated per-(user, unit) outputs of every category.
    let activate = |g: &mut G, dense: &Dense<G::V>| -> Vec<Vec<G::V>> {
        (0..users * units)
            .map(|idx| dense.relu_affine(g, input.get(idx / units, idx % units)))
            .collect()
    };
    let r_cc = activate(g, cc);
    let r_ca = activate(g, ca);
    let r_oc = activate(g, oc);
    let r_oa = activate(g, oa);

    // Per-user means over units for the all-unit categories.
    let unit_mean = |g: &mut G, r: &[Vec<G::V>], u: usize| -> Vec<G::V> {
        (0..q)
            .map(|d| {
                let col: Vec<G::V> = (0..units).map(|k| r[u * units + k][d]).collect();
                g.mean(&col)
            })
            .collect()
    };
    let ca_mean: Vec<Vec<G::V>> = (0..users).map(|u| unit_mean(g, &r_ca, u)).collect();
    let oa_unit_mean: Vec<Vec<G::V>> = (0..users).map(|u| unit_mean(g, &r_oa, u)).collect();
    let oa_mean: Vec<Vec<G::V>> = (0..users)
        .map(|u| {
            (0..q)
                .map(|d| {
                    let col: Vec<G::V> = (0..users)
                        .filter(|&v| v != u)
                        .map(|v| oa_unit_mean[v][d])
                        .collect();
                    g.mean(&col)
                })
                .collect()
        })
        .collect();

    let out_dim = 4 * q;
    let mut data = Vec::with_capacity(users * units * out_dim);
    for u in 0..users {
        for k in 0..units {
            data.extend_from_slice(&r_cc[u * units + k]);
            data.extend_from_slice(&ca_mean[u]);
            for d in 0..q {
                let col: Vec<G::V> = (0..users)
                    .filter(|&v| v != u)
                    .map(|v| r_oc[v * units + k][d])
                    .collect();
                let m = g.mean(&col);
                data.push(m);
            }
            data.extend_from_slice(&oa_mean[u]);
        }
    }
    Ok(Grid {
        users,
        units,
        dim: out_dim,
        data,
    })
}

/// Unwraps block features to element features: group `j` applied to the
/// block grid gives element `ν(n, j)` of every block `n`.
pub fn expansion_forward<G: Graph>(
    g: &mut G,
    params: &ExpansionParams<G::V>,
    input: &Grid<G::V>,
    schedule: &ProbeSchedule,
) -> Result<Grid<G::V>> {
    let j_count = schedule.block_size();
    if params.groups.len() != j_count {
        return Err(Error::Shape {
            op: "expansion_forward",
            left: (params.groups.len(), 1),
            right: (j_count, 1),
        });
    }
    if input.units != schedule.num_blocks() {
        return Err(Error::Shape {
            op: "expansion_forward",
            left: (input.units, input.dim),
            right: (schedule.num_blocks(), 1),
        });
    }
    let n_total = schedule.ris_elements();
    let users = input.users;
    let out_dim = params.groups.first().map(|l| l.out_dim()).unwrap_or(0);
    let mut slots: Vec<Option<Vec<G::V>>> = vec![None; users * n_total];
    for (j, group) in params.groups.iter().enumerate() {
        let out = layer_forward(g, group, input)?;
        for u in 0..users {
            for block in 0..input.units {
                let n = schedule.element(block, j);
                slots[u * n_total + n] = Some(out.get(u, block).to_vec());
            }
        }
    }
    let mut data = Vec::with_capacity(users * n_total * out_dim);
    for slot in slots {
        data.extend(slot.expect("schedule partitions the elements"));
    }
    Ok(Grid {
        users,
        units: n_total,
        dim: out_dim,
        data,
    })
}

/// Phases plus their factors `(cos πφ, sin πφ)` as graph values.
pub struct HeadOutput<V> {
    pub phases: Vec<V>,
    pub factors: Vec<(V, V)>,
}

/// User-mean, linear map to `(a, b)`, then `φ = atan2(b, a) / π`.
pub fn phase_head<G: Graph>(
    g: &mut G,
    head: &Dense<G::V>,
    input: &Grid<G::V>,
) -> Result<HeadOutput<G::V>> {
    if input.dim != head.cols || head.rows != 2 {
        return Err(Error::Shape {
            op: "phase_head",
            left: (head.rows, head.cols),
            right: (input.dim, 1),
        });
    }
    let mut phases = Vec::with_capacity(input.units);
    let mut factors = Vec::with_capacity(input.units);
    for n in 0..input.units {
        let pooled: Vec<G::V> = (0..input.dim)
            .map(|d| {
                let col: Vec<G::V> = (0..input.users).map(|u| input.get(u, n)[d]).collect();
                g.mean(&col)
            })
            .collect();
        let a = g.affine(head.row(0), &pooled, head.bias[0]);
        let b = g.affine(head.row(1), &pooled, head.bias[1]);
        let angle = g.atan2(b, a);
        let phase = g.scale(angle, 1.0 / PI);
        let shift = g.scale(phase, PI);
        let c = g.cos(shift);
        let s = g.sin(shift);
        phases.push(phase);
        factors.push((c, s));
    }
    Ok(HeadOutput { phases, factors })
}

/// Runs the whole network on `features` (U × I × input_dim).
pub fn forward<G: Graph>(
    g: &mut G,
    params: &NetworkParams<G::V>,
    features: &FeatureTensor,
    schedule: &ProbeSchedule,
) -> Result<HeadOutput<G::V>> {
    if features.dim() != params.config.input_dim {
        return Err(Error::Shape {
            op: "forward",
            left: (params.config.input_dim, 1),
            right: (features.dim(), 1),
        });
    }
    if features.blocks() != schedule.num_blocks() {
        return Err(Error::Shape {
            op: "forward",
            left: (features.blocks(), 1),
            right: (schedule.num_blocks(), 1),
        });
    }
    let mut grid = Grid::from_features(features).map(|&x| g.constant(x));
    for layer in &params.pre {
        grid = layer_forward(g, layer, &grid)?;
    }
    grid = expansion_forward(g, &params.expansion, &grid, schedule)?;
    for layer in &params.post {
        grid = layer_forward(g, layer, &grid)?;
    }
    phase_head(g, &params.head, &grid)
}

/// Inference without gradient bookkeeping.
pub fn infer(
    params: &NetworkParams<f64>,
    features: &FeatureTensor,
    schedule: &ProbeSchedule,
) -> Result<RisConfig> {
    let out = forward(&mut Eval, params, features, schedule)?;
    Ok(RisConfig { phases: out.phases })
}

/// Records every parameter as a leaf on `tape`.
pub fn lift(tape: &mut Tape, params: &NetworkParams<f64>) -> NetworkParams<NodeId> {
    params.map(|&x| tape.leaf(x))
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_FORMAT: &str = "risnet-params/1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetworkConfig,
    pub seed: u64,
    /// Training step the parameters were saved after.
    #[serde(default)]
    pub step: usize,
    pub parameter_count: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub scaler: Option<FeatureScaler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f64>,
    pub seed: u64,
    pub step: usize,
    pub scaler: Option<FeatureScaler>,
}

/// Writes `params.json` and `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let params = &ckpt.params;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        parameter_count: params.num_parameters(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, d)| TensorEntry {
                name,
                rows: d.rows,
                cols: d.cols,
            })
            .collect(),
        scaler: ckpt.scaler.clone(),
    };
    let bin: Vec<u8> = params.flatten().iter().flat_map(|x| x.to_le_bytes()).collect();
    let bin_path = dir.join("params.bin");
    fs::write(&bin_path, bin).map_err(io(&bin_path))?;
    let json_path = dir.join("params.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    fs::write(&json_path, text + "\n").map_err(io(&json_path))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let json_path = dir.join("params.json");
    let text = fs::read_to_string(&json_path).map_err(|source| Error::Io {
        path: json_path.clone(),
        source,
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: json_path.clone(),
            source,
        })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::CorruptCheckpoint(format!("unknown format `{}`", manifest.format)));
    }
    let template = zero_params(&manifest.config)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let expected: Vec<TensorEntry> = template
        .tensors()
        .into_iter()
        .map(|(name, d)| TensorEntry {
            name,
            rows: d.rows,
            cols: d.cols,
        })
        .collect();
    if expected != manifest.tensors || manifest.parameter_count != template.num_parameters() {
        return Err(Error::CorruptCheckpoint(
            "tensor list does not match the network config".into(),
        ));
    }
    let bin_path = dir.join("params.bin");
    let bytes = fs::read(&bin_path).map_err(|source| Error::Io {
        path: bin_path.clone(),
        source,
    })?;
    if bytes.len() != 8 * manifest.parameter_count {
        return Err(Error::CorruptCheckpoint(format!(
            "params.bin holds {} bytes, expected {}",
            bytes.len(),
            8 * manifest.parameter_count
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Checkpoint {
        params: NetworkParams::from_flat(&manifest.config, &flat)?,
        seed: manifest.seed,
        step: manifest.step,
        scaler: manifest.scaler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;
    use crate::probing::make_schedule;
    use crate::props::oracle;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_grid(users: usize, units: usize, dim: usize, seed: u64) -> Grid<f64> {
        let mut rng = stream_rng(seed, 0);
        Grid {
            users,
            units,
            dim,
            data: (0..users * units * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    fn random_layer(in_dim: usize, out_dim: usize, seed: u64) -> LayerParams<f64> {
        let cfg = NetworkConfig {
            input_dim: in_dim,
            width: out_dim,
            pre_layers: 1,
            post_layers: 0,
            block_size: 1,
        };
        let mut p = init_params(&cfg, seed).unwrap();
        let mut rng = stream_rng(seed, 1);
        for d in &mut p.pre[0].categories {
            for b in &mut d.bias {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        p.pre.remove(0)
    }

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_dim: 8,
            width: 8,
            pre_layers: 1,
            post_layers: 1,
            block_size: 4,
        }
    }

    #[test]
    fn init_is_reproducible_with_zero_bias() {
        let cfg = NetworkConfig::with_defaults(4, 4);
        let a = init_params(&cfg, 3).unwrap();
        assert_eq!(a, init_params(&cfg, 3).unwrap());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        for (_, d) in a.tensors() {
            assert!(d.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_variance_matches_glorot() {
        let cfg = NetworkConfig {
            input_dim: 64,
            width: 64,
            pre_layers: 2,
            post_layers: 0,
            block_size: 4,
        };
        let p = init_params(&cfg, 11).unwrap();
        // All category matrices here are 16 × 64.
        let w: Vec<f64> = p
            .tensors()
            .iter()
            .filter(|(name, _)| name != "head")
            .flat_map(|(_, d)| d.weight.clone())
            .collect();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (16.0 + 64.0);
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn zero_width_is_rejected() {
        let mut cfg = tiny_config();
        cfg.width = 0;
        assert!(matches!(init_params(&cfg, 0), Err(Error::Config { .. })));
        cfg.width = 6;
        assert!(init_params(&cfg, 0).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let layer = random_layer(4, 8, 1).map(&mut |_: &f64| 0.0);
        let mut layer2 = random_layer(4, 8, 1);
        for d in &mut layer2.categories {
            d.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let input = Grid {
            users: 2,
            units: 3,
            dim: 4,
            data: vec![0.0; 24],
        };
        for l in [&layer, &layer2] {
            let out = layer_forward(&mut Eval, l, &input).unwrap();
            assert!(out.data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identical_units_make_cc_equal_ca() {
        let layer = random_layer(4, 8, 2);
        let mut base = random_grid(2, 1, 4, 5);
        base.units = 1;
        let mut data = Vec::new();
        for u in 0..2 {
            for _ in 0..3 {
                data.extend_from_slice(base.get(u, 0));
            }
        }
        let input = Grid {
            users: 2,
            units: 3,
            dim: 4,
            data,
        };
        // Use the cc weights for the ca category too.
        let mut same = layer.clone();
        same.categories[1] = same.categories[0].clone();
        let out = layer_forward(&mut Eval, &same, &input).unwrap();
        for u in 0..2 {
            for k in 0..3 {
                let f = out.get(u, k);
                for d in 0..2 {
                    assert!((f[d] - f[2 + d]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn layer_matches_loop_oracle() {
        let layer = random_layer(4, 8, 7);
        let input = random_grid(2, 3, 4, 8);
        let out = layer_forward(&mut Eval, &layer, &input).unwrap();
        let expected = oracle::layer(&layer, &input);
        for (a, b) in out.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_rejects_single_user() {
        let layer = random_layer(4, 8, 7);
        let input = random_grid(1, 3, 4, 8);
        assert!(matches!(
            layer_forward(&mut Eval, &layer, &input),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unit_block_expansion_is_a_layer() {
        let sched = make_schedule((2, 3), (1, 1)).unwrap();
        let layer = random_layer(4, 8, 9);
        let params = ExpansionParams {
            groups: vec![layer.clone()],
        };
        let input = random_grid(2, 6, 4, 10);
        let a = expansion_forward(&mut Eval, &params, &input, &sched).unwrap();
        let b = layer_forward(&mut Eval, &layer, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_groups_give_identical_elements() {
        let sched = make_schedule((2, 4), (1, 2)).unwrap();
        let layer = random_layer(4, 8, 12);
        let params = ExpansionParams {
            groups: vec![layer.clone(), layer],
        };
        let input = random_grid(2, 4, 4, 13);
        let out = expansion_forward(&mut Eval, &params, &input, &sched).unwrap();
        for u in 0..2 {
            for block in 0..4 {
                assert_eq!(
                    out.get(u, sched.element(block, 0)),
                    out.get(u, sched.element(block, 1))
                );
            }
        }
    }

    #[test]
    fn expansion_matches_loop_oracle() {
        let sched = make_schedule((2, 2), (1, 2)).unwrap();
        let params = ExpansionParams {
            groups: vec![random_layer(4, 8, 20), random_layer(4, 8, 21)],
        };
        let input = random_grid(2, 2, 4, 22);
        let out = expansion_forward(&mut Eval, &params, &input, &sched).unwrap();
        let expected = oracle::expansion(&params, &input, &sched);
        for (a, b) in out.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expansion_rejects_group_mismatch() {
        let sched = make_schedule((2, 2), (1, 2)).unwrap();
        let params = ExpansionParams {
            groups: vec![random_layer(4, 8, 20)],
        };
        let input = random_grid(2, 2, 4, 22);
        assert!(matches!(
            expansion_forward(&mut Eval, &params, &input, &sched),
            Err(Error::Shape { .. })
        ));
    }

    fn head_for(a: f64, b: f64) -> f64 {
        let head = Dense {
            rows: 2,
            cols: 2,
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        };
        let input = Grid {
            users: 2,
            units: 1,
            dim: 2,
            data: vec![a, b, a, b],
        };
        phase_head(&mut Eval, &head, &input).unwrap().phases[0]
    }

    #[test]
    fn head_phase_values() {
        assert_eq!(head_for(1.0, 0.0), 0.0);
        assert_eq!(head_for(-1.0, 0.0), 1.0);
        let f = RisConfig {
            phases: vec![head_for(-1.0, 0.0)],
        }
        .factors()[0];
        assert!((f.re + 1.0).abs() < 1e-15 && f.im.abs() < 1e-15);
    }

    #[test]
    fn head_factors_are_unit_modulus() {
        let mut rng = stream_rng(77, 0);
        let head = Dense {
            rows: 2,
            cols: 3,
            weight: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: vec![0.1, -0.2],
        };
        let input = random_grid(2, 10_000, 3, 78);
        let out = phase_head(&mut Eval, &head, &input).unwrap();
        for (c, s) in out.factors {
            assert!((c.hypot(s) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_size_forward() {
        let sched = make_schedule((36, 36), (9, 9)).unwrap();
        let cfg = NetworkConfig::with_defaults(4, sched.block_size());
        let p = init_params(&cfg, 1).unwrap();
        let mut rng = stream_rng(5, 0);
        let data = (0..2 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats = FeatureTensor::new(2, 16, 16, data).unwrap();
        let ris = infer(&p, &feats, &sched).unwrap();
        assert_eq!(ris.len(), 1296);
    }

    #[test]
    fn zero_params_give_zero_phases() {
        let sched = make_schedule((4, 4), (2, 2)).unwrap();
        let p = zero_params(&NetworkConfig::with_defaults(4, 4)).unwrap();
        let feats = FeatureTensor::new(2, 4, 16, vec![0.5; 2 * 4 * 16]).unwrap();
        let ris = infer(&p, &feats, &sched).unwrap();
        assert!(ris.phases.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tape_and_eval_agree() {
        let sched = make_schedule((4, 2), (2, 1)).unwrap();
        let cfg = NetworkConfig {
            block_size: 2,
            ..tiny_config()
        };
        let p = init_params(&cfg, 2).unwrap();
        let mut rng = stream_rng(6, 0);
        let feats = FeatureTensor::new(
            3,
            4,
            8,
            (0..3 * 4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let eval = infer(&p, &feats, &sched).unwrap();
        let mut tape = Tape::new();
        let lifted = lift(&mut tape, &p);
        let out = forward(&mut tape, &lifted, &feats, &sched).unwrap();
        let taped: Vec<f64> = out.phases.iter().map(|&v| tape.value(v)).collect();
        assert_eq!(eval.phases, taped);
    }

    #[test]
    fn flatten_round_trip() {
        let p = init_params(&tiny_config(), 3).unwrap();
        let back = NetworkParams::from_flat(&p.config, &p.flatten()).unwrap();
        assert_eq!(p, back);
        assert!(NetworkParams::from_flat(&p.config, &[0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            params: init_params(&tiny_config(), 4).unwrap(),
            seed: 4,
            step: 17,
            scaler: Some(FeatureScaler {
                mean: vec![0.1; 8],
                std: vec![1.0 / 3.0; 8],
            }),
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), ckpt);
        // Truncation is reported rather than panicking.
        let bin = dir.path().join("params.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_invariant_to_user_order(seed in 0u64..1000, users in 2usize..5) {
            let sched = make_schedule((4, 4), (2, 2)).unwrap();
            let cfg = NetworkConfig { block_size: 4, ..tiny_config() };
            let p = init_params(&cfg, seed).unwrap();
            let mut rng = stream_rng(seed, 9);
            let feats = FeatureTensor::new(
                users, 4, 8,
                (0..users * 4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ).unwrap();
            let mut perm: Vec<usize> = (0..users).collect();
            perm.rotate_left(1);
            let a = infer(&p, &feats, &sched).unwrap();
            let b = infer(&p, &feats.permute_users(&perm), &sched).unwrap();
            for (x, y) in a.phases.iter().zip(&b.phases) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn block_layers_equivariant_to_block_order(seed in 0u64..1000) {
            let layer = random_layer(4, 8, seed);
            let input = random_grid(2, 4, 4, seed + 1);
            let perm = [2usize, 0, 3, 1];
            let permuted = Grid {
                data: (0..2).flat_map(|u| perm.iter().flat_map(move |&k| {
                    let start = (u * 4 + k) * 4;
                    start..start + 4
                })).map(|i| input.data[i]).collect(),
                ..input.clone()
            };
            let a = layer_forward(&mut Eval, &layer, &input).unwrap();
            let b = layer_forward(&mut Eval, &layer, &permuted).unwrap();
            for u in 0..2 {
                for (k, &src) in perm.iter().enumerate() {
                    for (x, y) in b.get(u, k).iter().zip(a.get(u, src)) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
