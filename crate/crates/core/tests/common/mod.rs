#![allow(dead_code)]

use std::collections::HashMap;

use ear_core::autodiff::{grad_check, Graph, NodeId, OpKind};
use ear_core::erasure::PromptPair;
use ear_core::model::{ModelConfig, ModelParams, Vocab};
use ear_core::world::SyntheticWorld;
use ear_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES_PER_KIND: u64 = 50;
pub const FD_STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform in ±[0.1, 1], away from the relu kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

struct Builder {
    g: Graph,
    values: HashMap<String, Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn input(&mut self, name: &str, t: Tensor, grad: bool) -> NodeId {
        self.values.insert(name.to_string(), t);
        self.g.input(name, grad)
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let t = random(&mut self.rng, shape);
        self.input(name, t, true)
    }

    /// Weighted sum of squares, so every output coordinate matters.
    fn reduce(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let w = off_zero(&mut self.rng, shape);
        let w = self.input("reduce_w", w, false);
        let y = self.g.mul(x, w);
        self.g.sum_squares(y)
    }
}

/// One randomly shaped graph that exercises `kind`; returns the worst
/// relative gradient error.
pub fn check_instance(kind: OpKind, seed: u64) -> f64 {
    check_instance_eps(kind, seed, FD_STEP)
}

pub fn check_instance_eps(kind: OpKind, seed: u64, eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64) << 32);
    let n = rng.gen_range(1..5);
    let m = rng.gen_range(2..5);
    let k = rng.gen_range(1..5);
    let mut b = Builder {
        g: Graph::new(),
        values: HashMap::new(),
        rng,
    };
    let root = match kind {
        OpKind::Input => {
            let x = b.param("x", &[n, m]);
            b.reduce(x, &[n, m])
        }
        OpKind::MatMul => {
            let a = b.param("a", &[n, k]);
            if seed.is_multiple_of(2) {
                let w = b.param("w", &[k, m]);
                let y = b.g.matmul(a, w);
                b.reduce(y, &[n, m])
            } else {
                let w = b.param("w", &[m, k]);
                let y = b.g.matmul_nt(a, w);
                b.reduce(y, &[n, m])
            }
        }
        OpKind::Add | OpKind::Mul => {
            let x = b.param("x", &[n, m]);
            let y = b.param("y", &[n, m]);
            let z = if kind == OpKind::Add { b.g.add(x, y) } else { b.g.mul(x, y) };
            b.reduce(z, &[n, m])
        }
        OpKind::Relu => {
            let t = off_zero(&mut b.rng, &[n, m]);
            let x = b.input("x", t, true);
            let y = b.g.relu(x);
            b.reduce(y, &[n, m])
        }
        OpKind::LayerNorm => {
            let x = b.param("x", &[n, m]);
            let gain = b.param("gain", &[m]);
            let y = b.g.layer_norm(x, gain, 1e-5);
            b.reduce(y, &[n, m])
        }
        OpKind::Softmax => {
            if seed.is_multiple_of(2) {
                let x = b.param("x", &[n, m]);
                let y = b.g.softmax(x);
                b.reduce(y, &[n, m])
            } else {
                let x = b.param("x", &[m, m]);
                let y = b.g.causal_softmax(x);
                b.reduce(y, &[m, m])
            }
        }
        OpKind::Embedding => {
            let table = b.param("table", &[m, k]);
            let idx: Vec<usize> = (0..n + 1).map(|_| b.rng.gen_range(0..m)).collect();
            let y = b.g.embedding(table, idx);
            b.reduce(y, &[n + 1, k])
        }
        OpKind::CrossEntropy => {
            let x = b.param("x", &[n, m]);
            let targets: Vec<usize> = (0..n).map(|_| b.rng.gen_range(0..m)).collect();
            b.g.cross_entropy(x, targets)
        }
        OpKind::SumSquares => {
            let x = b.param("x", &[n, m]);
            b.g.sum_squares(x)
        }
        OpKind::Slice => {
            let x = b.param("x", &[n + 1, m + 1]);
            if seed.is_multiple_of(2) {
                let y = b.g.slice(x, 0, 1, n + 1);
                b.reduce(y, &[n, m + 1])
            } else {
                let y = b.g.slice(x, 1, 0, m);
                b.reduce(y, &[n + 1, m])
            }
        }
        OpKind::Concat => {
            let x = b.param("x", &[n, m]);
            if seed.is_multiple_of(2) {
                let y = b.param("y", &[k, m]);
                let z = b.g.concat(&[x, y], 0);
                b.reduce(z, &[n + k, m])
            } else {
                let y = b.param("y", &[n, k]);
                let z = b.g.concat(&[x, y, x], 1);
                b.reduce(z, &[n, 2 * m + k])
            }
        }
        OpKind::Scale => {
            let x = b.param("x", &[n, m]);
            let f = b.rng.gen_range(-3.0..3.0);
            let y = b.g.scale(x, f);
            b.reduce(y, &[n, m])
        }
    };
    let Builder { mut g, values, .. } = b;
    g.forward(&values).unwrap();
    grad_check(&mut g, root, eps).unwrap()
}

/// Worst error over every seeded instance of every op kind.
pub fn grad_check_sweep() -> Vec<(OpKind, f64)> {
    OpKind::ALL
        .iter()
        .map(|&kind| {
            let worst = (0..INSTANCES_PER_KIND)
                .map(|s| check_instance(kind, s))
                .fold(0.0, f64::max);
            (kind, worst)
        })
        .collect()
}

/// An untrained model with a randomized image head, so latents and logits
/// vary with the prompt.
pub fn small_setup(seed: u64) -> (SyntheticWorld, Vocab, ModelParams) {
    let world = SyntheticWorld::new(0);
    let vocab = Vocab::from_world(&world);
    let mut params = ModelParams::init(ModelConfig::for_vocab(&vocab, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.by_name_mut("image_head").unwrap().data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    (world, vocab, params)
}

pub fn random_pair(world: &SyntheticWorld, rng: &mut ChaCha8Rng) -> PromptPair {
    let names: Vec<&str> = world.concept_names().collect();
    let c = rng.gen_range(0..names.len());
    let s = (c + rng.gen_range(1..names.len())) % names.len();
    let bg = &world.backgrounds[rng.gen_range(0..world.backgrounds.len())].name;
    let pos = &world.positions[rng.gen_range(0..world.positions.len())].name;
    PromptPair {
        concept: names[c].to_string(),
        target_prompt: format!("a {} at {pos} on {bg}", names[c]),
        surrogate_prompt: format!("a {} at {pos} on {bg}", names[s]),
        source: "test".into(),
        iteration: 0,
        seed: rng.gen(),
    }
}

pub mod erasure_oracle {
    use std::collections::BTreeMap;

    use ear_core::autodiff::Layered;
    use ear_core::erasure::{
        erase_step, select_trainable, EraseConfig, EraseState, GradMap, PromptPair, StepContext,
        UpdatePolicy, WindowObjective,
    };
    use ear_core::erasure::partition_windows;
    use ear_core::model::{forward_latents, generate, LatentSeq, ModelGraph, ModelParams, Sampling, Vocab};
    use ear_core::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const WGA_TOL: f64 = 1e-10;
    pub const WGA_CASES: u64 = 20;
    pub const MU_LADDER: [f64; 5] = [0.0, 0.01, 0.05, 0.1, f64::INFINITY];

    /// Gradient of the summed squared distance to the guidance target over
    /// the whole sequence, from a graph built here rather than by the
    /// erasure module.
    pub fn one_pass_gradient(
        params: &ModelParams,
        vocab: &Vocab,
        pair: &PromptPair,
        eta: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) -> GradMap {
        let t = params.config().image_tokens;
        let target = vocab.tokenize(&pair.target_prompt).unwrap();
        let surrogate = vocab.tokenize(&pair.surrogate_prompt).unwrap();
        let teacher = generate(params, &target, t, Sampling::Greedy).unwrap();
        let h_tar = forward_latents(params, &target, &teacher).unwrap();
        let h_sur = forward_latents(params, &surrogate, &teacher).unwrap();
        let g: Vec<f64> = h_tar
            .as_tensor()
            .data()
            .iter()
            .zip(h_sur.as_tensor().data())
            .map(|(a, s)| s + eta * (s - a))
            .collect();
        let g = Tensor::new(h_sur.as_tensor().shape().to_vec(), g).unwrap();

        let mut mg = ModelGraph::build(params.config(), &target, &teacher[..t - 1], trainable).unwrap();
        let gid = mg.graph.input("oracle_guidance", false);
        let diff = mg.graph.sub(mg.latents, gid);
        let loss = mg.graph.sum_squares(diff);
        let extra: BTreeMap<String, Tensor> = [("oracle_guidance".to_string(), g)].into();
        mg.graph.forward(&Layered(params, &extra)).unwrap();
        mg.graph.backward(loss).unwrap().into_named()
    }

    /// Largest coordinate difference, relative to the largest coordinate.
    pub fn relative_gap(a: &GradMap, b: &GradMap) -> f64 {
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (k, ta) in a {
            for (x, y) in ta.data().iter().zip(b[k].data()) {
                diff = diff.max((x - y).abs());
                scale = scale.max(x.abs()).max(y.abs());
            }
        }
        diff / scale.max(1.0)
    }

    fn applied(params: &ModelParams, vocab: &Vocab, pair: &PromptPair, cfg: &EraseConfig) -> GradMap {
        let mut state = EraseState::new(params, cfg).unwrap();
        erase_step(&mut state, vocab, pair, cfg, 0)
            .unwrap()
            .applied_gradient
            .expect("accumulate-all returns its gradient")
    }

    /// Accumulate-all at `mu = 0` against the one-pass oracle, and the
    /// single-window baseline against the oracle at `eta = 0`.
    pub fn wga_case(seed: u64) -> (f64, f64) {
        let (world, vocab, params) = super::small_setup(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = super::random_pair(&world, &mut rng);
        let t = params.config().image_tokens;
        let depth = params.config().layers;
        let lo = rng.gen_range(0..depth);
        let hi = rng.gen_range(lo + 1..=depth);
        let choices = ["q", "k", "v", "o", "mlp", "norm", "all"];
        let projections = vec![
            choices[rng.gen_range(0..choices.len())].to_string(),
            choices[rng.gen_range(0..choices.len())].to_string(),
        ];
        let cfg = EraseConfig {
            eta: rng.gen_range(0.0..2.0),
            mu: 0.0,
            window: rng.gen_range(1..=t),
            layers: lo..hi,
            projections,
            policy: UpdatePolicy::AccumulateAll,
            ..EraseConfig::default()
        };
        let mask = select_trainable(&params, cfg.layers.clone(), &cfg.projections).unwrap();
        let oracle = one_pass_gradient(&params, &vocab, &pair, cfg.eta, &|n| mask.contains(n));
        let accum = relative_gap(&applied(&params, &vocab, &pair, &cfg), &oracle);

        let base = EraseConfig::full_sequence_baseline(t);
        let mask = select_trainable(&params, base.layers.clone(), &base.projections).unwrap();
        let oracle = one_pass_gradient(&params, &vocab, &pair, 0.0, &|n| mask.contains(n));
        let baseline = relative_gap(&applied(&params, &vocab, &pair, &base), &oracle);
        (accum, baseline)
    }

    /// Squared row offsets straddling the mu ladder.
    pub const ROW_LOSSES: [f64; 8] = [0.0, 0.004, 0.009, 0.02, 0.04, 0.06, 0.09, 0.2];

    /// The target latents shifted so that row `t` sits at squared distance
    /// `ROW_LOSSES[t % 8]`; with unchanged weights the window losses span
    /// the ladder.
    fn offset_guidance(h: &LatentSeq) -> LatentSeq {
        let d = h.dim();
        let rows: Vec<Vec<f64>> = (0..h.len())
            .map(|t| {
                let shift = (ROW_LOSSES[t % ROW_LOSSES.len()] / d as f64).sqrt();
                h.row(t).iter().map(|v| v + shift).collect()
            })
            .collect();
        LatentSeq::from_rows(&rows).unwrap()
    }

    /// Discard sets over the mu ladder from one forward pass; each set must
    /// contain the previous one, and `mu = 0` must discard nothing.
    pub fn discard_sets(seed: u64, window: usize) -> Vec<Vec<usize>> {
        let (world, vocab, params) = super::small_setup(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = super::random_pair(&world, &mut rng);
        let cfg = EraseConfig::default();
        let mask = select_trainable(&params, cfg.layers.clone(), &cfg.projections).unwrap();
        let mut ctx = StepContext::prepare(&params, &vocab, &pair, cfg.eta).unwrap();
        ctx.guidance = offset_guidance(&ctx.h_org_tar);
        let windows = partition_windows(ctx.teacher.len(), window).unwrap();
        let mut objective = WindowObjective::build(&params, &ctx, windows, &mask).unwrap();
        let losses = objective.evaluate(&params).unwrap();
        let grads: Vec<GradMap> = (0..losses.len()).map(|i| objective.gradient(i).unwrap()).collect();
        MU_LADDER
            .iter()
            .map(|&mu| {
                losses
                    .iter()
                    .zip(&grads)
                    .enumerate()
                    .filter(|(_, (&l, g))| ear_core::erasure::apply_tlm(l, mu, (*g).clone()).1.discarded())
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }

    pub fn nested(sets: &[Vec<usize>]) -> bool {
        sets.windows(2).all(|w| w[0].iter().all(|i| w[1].contains(i)))
    }
}

pub mod frechet_oracle {
    use ear_core::eval::{frechet_proxy, CovarianceMode, FeatureVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Mat = Vec<Vec<f64>>;

    fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let v: f64 = rng.gen();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    /// `n` draws of `mean + A z`.
    pub fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], a: &Mat) -> Vec<FeatureVector> {
        let d = mean.len();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| std_normal(rng)).collect();
                FeatureVector::new(
                    (0..d)
                        .map(|i| mean[i] + (0..d).map(|j| a[i][j] * z[j]).sum::<f64>())
                        .collect(),
                )
            })
            .collect()
    }

    pub fn random_matrix(rng: &mut ChaCha8Rng, d: usize) -> Mat {
        (0..d).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn identity(d: usize) -> Mat {
        (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    }

    fn mul(a: &Mat, b: &Mat) -> Mat {
        let d = a.len();
        (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| a[i][k] * b[k][j]).sum()).collect())
            .collect()
    }

    /// Gauss-Jordan with partial pivoting.
    fn inverse(m: &Mat) -> Mat {
        let d = m.len();
        let mut a = m.clone();
        let mut inv = identity(d);
        for col in 0..d {
            let p = (col..d)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, p);
            inv.swap(col, p);
            let pivot = a[col][col];
            for j in 0..d {
                a[col][j] /= pivot;
                inv[col][j] /= pivot;
            }
            for r in 0..d {
                if r != col {
                    let f = a[r][col];
                    for j in 0..d {
                        a[r][j] -= f * a[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
        inv
    }

    /// Principal square root by the Denman-Beavers iteration.
    fn sqrtm(m: &Mat) -> Mat {
        let d = m.len();
        let mut y = m.clone();
        let mut z = identity(d);
        for _ in 0..100 {
            let yi = inverse(&y);
            let zi = inverse(&z);
            let ny: Mat = (0..d).map(|i| (0..d).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
            let nz: Mat = (0..d).map(|i| (0..d).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
            let delta: f64 = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| (ny[i][j] - y[i][j]).abs()).sum();
            y = ny;
            z = nz;
            if delta < 1e-15 {
                break;
            }
        }
        y
    }

    fn moments(x: &[FeatureVector]) -> (Vec<f64>, Mat) {
        let n = x.len() as f64;
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|i| x.iter().map(|v| v.as_slice()[i]).sum::<f64>() / n).collect();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        x.iter()
                            .map(|v| (v.as_slice()[i] - mean[i]) * (v.as_slice()[j] - mean[j]))
                            .sum::<f64>()
                            / (n - 1.0)
                    })
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    /// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 sqrt(Sa Sb))` on the raw product.
    pub fn direct(a: &[FeatureVector], b: &[FeatureVector]) -> f64 {
        let (ma, sa) = moments(a);
        let (mb, sb) = moments(b);
        let d = ma.len();
        let mean: f64 = (0..d).map(|i| (ma[i] - mb[i]).powi(2)).sum();
        let root = sqrtm(&mul(&sa, &sb));
        mean + (0..d).map(|i| sa[i][i] + sb[i][i] - 2.0 * root[i][i]).sum::<f64>()
    }

    /// Worst |library - direct| over a few full-rank random pairs of clouds.
    pub fn direct_agreement(cases: u64) -> f64 {
        (0..cases)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = rng.gen_range(2..7);
                let m = random_matrix(&mut rng, d);
                let a = gaussian_cloud(&mut rng, 200, &vec![0.0; d], &m);
                let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let m = random_matrix(&mut rng, d);
                let b = gaussian_cloud(&mut rng, 150, &mean, &m);
                let lib = frechet_proxy(&a, &b, CovarianceMode::Full).unwrap();
                (lib - direct(&a, &b)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Shared covariance, means two apart; returns (measured, closed form).
    pub fn equal_covariance(seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let a = random_matrix(&mut rng, d);
        let shift = [2.0, 0.0, 0.0, 0.0];
        let x = gaussian_cloud(&mut rng, 10_000, &[0.0; 4], &a);
        let y = gaussian_cloud(&mut rng, 10_000, &shift, &a);
        (frechet_proxy(&x, &y, CovarianceMode::Full).unwrap(), 4.0)
    }

    /// Self-distance of a random cloud and of a rank-deficient one.
    pub fn self_distance() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 3);
        let full = gaussian_cloud(&mut rng, 300, &[1.0, -2.0, 0.5], &m);
        let flat: Vec<FeatureVector> = full
            .iter()
            .map(|v| {
                let s = v.as_slice();
                FeatureVector::new(vec![s[0], s[1], s[0] + s[1], 0.0, s[2]])
            })
            .collect();
        [&full, &flat]
            .iter()
            .map(|x| frechet_proxy(x, x, CovarianceMode::Full).unwrap().abs())
            .fold(0.0, f64::max)
    }
}
