//! Conditional U-Net denoiser and its low-rank adapters.
//!
//! Three resolution levels, each with residual conv blocks conditioned on a
//! shared embedding (sinusoidal timestep features concatenated with a
//! learned per-category vector). Group norm throughout, SiLU activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Trainable};
use crate::error::{invalid, Result};
use crate::tensor::{Binding, Graph, ParamSet, Tensor, Var};

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Channel width per resolution level, finest first.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub emb_dim: usize,
    pub num_categories: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            blocks_per_level: 2,
            groups: 4,
            time_dim: 32,
            cond_dim: 32,
            emb_dim: 128,
            num_categories: 8,
        }
    }
}

impl Architecture {
    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.blocks_per_level == 0 || self.groups == 0 {
            return invalid("architecture needs at least one level, block and group");
        }
        if self.channels.iter().any(|c| c % self.groups != 0) {
            return invalid(format!("channels {:?} not divisible by {} groups", self.channels, self.groups));
        }
        if self.time_dim % 2 != 0 || self.num_categories == 0 {
            return invalid("time_dim must be even and num_categories positive");
        }
        Ok(())
    }

    /// Smallest grid side the net accepts (one halving per extra level).
    pub fn min_side(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    /// Serialised as `key = value` lines.
    pub fn describe(&self) -> String {
        format!(
            "channels = {:?}\nblocks_per_level = {}\ngroups = {}\ntime_dim = {}\ncond_dim = {}\nemb_dim = {}\nnum_categories = {}\n",
            self.channels, self.blocks_per_level, self.groups, self.time_dim, self.cond_dim, self.emb_dim, self.num_categories
        )
    }
}

/// One residual block's parameter prefix and widths.
#[derive(Clone, Debug)]
struct Block {
    name: String,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<String>,
}

/// The conditional denoiser `f(x_t, t, c)`.
#[derive(Clone, Debug)]
pub struct UNet {
    arch: Architecture,
    params: ParamSet,
    down: Vec<Vec<Block>>,
    up: Vec<Vec<Block>>,
    lora: Option<LoraConfig>,
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng).with_grad(true)
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad(true)
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let (down, up) = Self::layout(&arch);
        let mut p = ParamSet::new();
        let c0 = arch.channels[0];
        let e = arch.emb_dim;
        p.insert("cond.table", Tensor::randn(&[arch.num_categories, arch.cond_dim], 1.0, rng).with_grad(true));
        p.insert("emb.0.w", kaiming(&[e, arch.time_dim + arch.cond_dim], arch.time_dim + arch.cond_dim, rng));
        p.insert("emb.0.b", zeros(&[e]));
        p.insert("emb.1.w", kaiming(&[e, e], e, rng));
        p.insert("emb.1.b", zeros(&[e]));
        p.insert("in.w", kaiming(&[c0, 3, 3, 3], 27, rng));
        p.insert("in.b", zeros(&[c0]));
        for b in down.iter().chain(&up).flatten() {
            let n = &b.name;
            p.insert(format!("{n}.gn1.g"), Tensor::full(&[b.cin], 1.0).with_grad(true));
            p.insert(format!("{n}.gn1.b"), zeros(&[b.cin]));
            p.insert(format!("{n}.conv1.w"), kaiming(&[b.cout, b.cin, 3, 3], 9 * b.cin, rng));
            p.insert(format!("{n}.conv1.b"), zeros(&[b.cout]));
            p.insert(format!("{n}.temb.w"), kaiming(&[b.cout, e], e, rng));
            p.insert(format!("{n}.temb.b"), zeros(&[b.cout]));
            p.insert(format!("{n}.gn2.g"), Tensor::full(&[b.cout], 1.0).with_grad(true));
            p.insert(format!("{n}.gn2.b"), zeros(&[b.cout]));
            p.insert(format!("{n}.conv2.w"), kaiming(&[b.cout, b.cout, 3, 3], 9 * b.cout, rng));
            p.insert(format!("{n}.conv2.b"), zeros(&[b.cout]));
            if b.cin != b.cout {
                p.insert(format!("{n}.skip.w"), kaiming(&[b.cout, b.cin, 1, 1], b.cin, rng));
                p.insert(format!("{n}.skip.b"), zeros(&[b.cout]));
            }
        }
        p.insert("out.gn.g", Tensor::full(&[c0], 1.0).with_grad(true));
        p.insert("out.gn.b", zeros(&[c0]));
        p.insert("out.w", kaiming(&[3, c0, 1, 1], c0, rng));
        p.insert("out.b", zeros(&[3]));
        Ok(Self {
            arch,
            params: p,
            down,
            up,
            lora: None,
        })
    }

    /// Rebuilds a net from stored parameters. Entries named `*.lora_a` /
    /// `*.lora_b` restore adapters and freeze the base weights.
    pub fn from_params(arch: Architecture, params: ParamSet, lora: Option<LoraConfig>) -> Result<Self> {
        arch.validate()?;
        let (down, up) = Self::layout(&arch);
        let mut net = Self {
            arch,
            params: ParamSet::new(),
            down,
            up,
            lora: None,
        };
        let reference = UNet::new(net.arch.clone(), &mut crate::rng::stream(0, &[]))?;
        for (name, t) in reference.params.iter() {
            let stored = params.require(name)?;
            if stored.shape() != t.shape() {
                return invalid(format!("parameter {name} has shape {:?}, expected {:?}", stored.shape(), t.shape()));
            }
        }
        net.params = params;
        if let Some(cfg) = lora {
            for target in &cfg.targets {
                net.params.require(&format!("{target}.lora_a"))?;
                net.params.require(&format!("{target}.lora_b"))?;
            }
            let flags: Vec<bool> = net.params.names().iter().map(|n| n.ends_with(".lora_a") || n.ends_with(".lora_b")).collect();
            for (t, f) in net.params.tensors_mut().iter_mut().zip(flags) {
                t.set_requires_grad(f);
            }
            net.lora = Some(cfg);
        } else {
            net.params.set_all_trainable(true);
        }
        Ok(net)
    }

    /// [`UNet::from_params`] with the adapter configuration read off the
    /// stored `*.lora_a` entries.
    pub fn restore(arch: Architecture, params: ParamSet) -> Result<Self> {
        let targets: Vec<String> = params.names().iter().filter_map(|n| n.strip_suffix(".lora_a")).map(str::to_string).collect();
        let lora = match targets.first() {
            None => None,
            Some(first) => {
                let rank = params.require(&format!("{first}.lora_a"))?.shape()[1];
                Some(LoraConfig {
                    rank,
                    scale: 1.0 / rank as f64,
                    targets,
                })
            }
        };
        Self::from_params(arch, params, lora)
    }

    fn layout(arch: &Architecture) -> (Vec<Vec<Block>>, Vec<Vec<Block>>) {
        let levels = arch.channels.len();
        let mut down = Vec::with_capacity(levels);
        let mut cin = arch.channels[0];
        for (l, &c) in arch.channels.iter().enumerate() {
            let blocks = (0..arch.blocks_per_level)
                .map(|i| {
                    let b = Block {
                        name: format!("down{l}.{i}"),
                        cin,
                        cout: c,
                    };
                    cin = c;
                    b
                })
                .collect();
            down.push(blocks);
        }
        let mut up = Vec::new();
        for l in (0..levels - 1).rev() {
            let c = arch.channels[l];
            let blocks = (0..arch.blocks_per_level)
                .map(|i| {
                    let b = Block {
                        name: format!("up{l}.{i}"),
                        cin: if i == 0 { cin + c } else { c },
                        cout: c,
                    };
                    cin = c;
                    b
                })
                .collect();
            up.push(blocks);
        }
        (down, up)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    /// Names of the dense and 1x1 projection weights that receive adapters.
    /// The 3-channel output head is excluded.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut t = vec!["emb.0.w".to_string(), "emb.1.w".to_string()];
        for b in self.down.iter().chain(&self.up).flatten() {
            t.push(format!("{}.temb.w", b.name));
            if b.cin != b.cout {
                t.push(format!("{}.skip.w", b.name));
            }
        }
        t
    }

    /// Freezes the base weights and adds rank-`rank` adapters
    /// `W + (1 / rank) * A B` with `A: d x r` random and `B: r x k` zero, so
    /// the adapted net initially computes exactly what the base net does.
    pub fn attach_lora<R: Rng + ?Sized>(&self, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return invalid("LoRA rank must be at least 1");
        }
        if self.lora.is_some() {
            return invalid("LoRA adapters are already attached");
        }
        let targets = self.lora_targets();
        let mut net = self.clone();
        net.params.set_all_trainable(false);
        for name in &targets {
            let shape = net.params.require(name)?.shape().to_vec();
            let (d, k) = (shape[0], shape[1..].iter().product::<usize>());
            if rank > d.min(k) {
                return invalid(format!("LoRA rank {rank} exceeds dimensions {d}x{k} of {name}"));
            }
            net.params.insert(
                format!("{name}.lora_a"),
                Tensor::randn(&[d, rank], (1.0 / rank as f64).sqrt(), rng).with_grad(true),
            );
            net.params.insert(format!("{name}.lora_b"), Tensor::zeros(&[rank, k]).with_grad(true));
        }
        net.lora = Some(LoraConfig {
            rank,
            scale: 1.0 / rank as f64,
            targets,
        });
        Ok(net)
    }

    /// Parameters excluding adapters.
    pub fn base_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| !n.ends_with(".lora_a") && !n.ends_with(".lora_b"))
            .cloned()
            .collect()
    }

    /// Weight with its adapter applied, if any.
    fn weight(&self, g: &mut Graph, bind: &mut Binding<'_>, name: &str) -> Result<Var> {
        let w = bind.var(g, name)?;
        let Some(cfg) = &self.lora else { return Ok(w) };
        if !cfg.targets.iter().any(|t| t == name) {
            return Ok(w);
        }
        let a = bind.var(g, &format!("{name}.lora_a"))?;
        let b = bind.var(g, &format!("{name}.lora_b"))?;
        let ab = g.matmul(a, b)?;
        let scaled = g.mul_scalar(ab, cfg.scale);
        let shape = g.shape(w).to_vec();
        let delta = g.reshape(scaled, &shape)?;
        g.add(w, delta)
    }

    fn dense(&self, g: &mut Graph, bind: &mut Binding<'_>, name: &str, x: Var) -> Result<Var> {
        let w = self.weight(g, bind, &format!("{name}.w"))?;
        let b = bind.var(g, &format!("{name}.b"))?;
        let k = g.shape(x)[0];
        let col = g.reshape(x, &[k, 1])?;
        let y = g.matmul(w, col)?;
        let d = g.shape(y)[0];
        let y = g.reshape(y, &[d])?;
        g.add(y, b)
    }

    fn conv(&self, g: &mut Graph, bind: &mut Binding<'_>, name: &str, x: Var) -> Result<Var> {
        let w = self.weight(g, bind, &format!("{name}.w"))?;
        let b = bind.var(g, &format!("{name}.b"))?;
        let y = g.conv2d(x, w)?;
        let c = g.shape(y)[0];
        let b = g.reshape(b, &[c, 1, 1])?;
        g.add(y, b)
    }

    fn norm_act(&self, g: &mut Graph, bind: &mut Binding<'_>, name: &str, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        let n = g.group_norm(x, self.arch.groups, GN_EPS)?;
        let gamma = bind.var(g, &format!("{name}.g"))?;
        let beta = bind.var(g, &format!("{name}.b"))?;
        let gamma = g.reshape(gamma, &[c, 1, 1])?;
        let beta = g.reshape(beta, &[c, 1, 1])?;
        let y = g.mul(n, gamma)?;
        let y = g.add(y, beta)?;
        Ok(g.silu(y))
    }

    fn res_block(&self, g: &mut Graph, bind: &mut Binding<'_>, b: &Block, x: Var, emb: Var) -> Result<Var> {
        let n = &b.name;
        let h = self.norm_act(g, bind, &format!("{n}.gn1"), x)?;
        let h = self.conv(g, bind, &format!("{n}.conv1"), h)?;
        let t = self.dense(g, bind, &format!("{n}.temb"), emb)?;
        let t = g.reshape(t, &[b.cout, 1, 1])?;
        let h = g.add(h, t)?;
        let h = self.norm_act(g, bind, &format!("{n}.gn2"), h)?;
        let h = self.conv(g, bind, &format!("{n}.conv2"), h)?;
        let skip = if b.cin != b.cout { self.conv(g, bind, &format!("{n}.skip"), x)? } else { x };
        g.add(h, skip)
    }

    fn embedding(&self, g: &mut Graph, bind: &mut Binding<'_>, t: usize, cond: usize) -> Result<Var> {
        if cond >= self.arch.num_categories {
            return invalid(format!("condition {cond} out of range for {} categories", self.arch.num_categories));
        }
        let temb = g.constant(timestep_embedding(t, self.arch.time_dim));
        let table = bind.var(g, "cond.table")?;
        let row = g.slice(table, 0, cond, 1)?;
        let cemb = g.reshape(row, &[self.arch.cond_dim])?;
        let e = g.concat(&[temb, cemb], 0)?;
        let e = self.dense(g, bind, "emb.0", e)?;
        let e = g.silu(e);
        let e = self.dense(g, bind, "emb.1", e)?;
        Ok(g.silu(e))
    }
}

/// Sinusoidal features `[sin(t w_i), cos(t w_i)]`, `w_i = 10000^(-i / (d/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::new(&[dim], data).expect("embedding shape")
}

impl Denoiser for UNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, bind: &mut Binding<'_>, x_t: Var, t: usize, cond: usize) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        let min = self.arch.min_side();
        if shape.len() != 3 || shape[0] != 3 || shape[1] % min != 0 || shape[2] % min != 0 {
            return invalid(format!("denoiser input must be [3, h, w] with sides divisible by {min}, got {shape:?}"));
        }
        let emb = self.embedding(g, bind, t, cond)?;
        let mut h = self.conv(g, bind, "in", x_t)?;
        let mut skips = Vec::new();
        let levels = self.down.len();
        for (l, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = self.res_block(g, bind, b, h, emb)?;
            }
            if l + 1 < levels {
                skips.push(h);
                h = g.avg_pool2(h)?;
            }
        }
        for blocks in &self.up {
            h = g.upsample2(h)?;
            let skip = skips.pop().expect("one skip per upsampling level");
            h = g.concat(&[h, skip], 0)?;
            for b in blocks {
                h = self.res_block(g, bind, b, h, emb)?;
            }
        }
        let h = self.norm_act(g, bind, "out.gn", h)?;
        self.conv(g, bind, "out", h)
    }
}

impl Trainable for UNet {
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::predict;
    use crate::rng::stream;

    fn small() -> Architecture {
        Architecture {
            channels: vec![8, 16, 16],
            blocks_per_level: 1,
            groups: 4,
            time_dim: 8,
            cond_dim: 8,
            emb_dim: 16,
            num_categories: 3,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = UNet::new(small(), &mut stream(0, &[])).unwrap();
        for side in [32, 64] {
            let x = Tensor::randn(&[3, side, side], 1.0, &mut stream(1, &[]));
            let y = predict(&net, &x, 500, 1).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn untrained_net_is_deterministic() {
        let a = UNet::new(small(), &mut stream(2, &[])).unwrap();
        let b = UNet::new(small(), &mut stream(2, &[])).unwrap();
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut stream(3, &[]));
        assert_eq!(predict(&a, &x, 10, 0).unwrap(), predict(&b, &x, 10, 0).unwrap());
    }

    #[test]
    fn rejects_bad_condition_and_shape() {
        let net = UNet::new(small(), &mut stream(0, &[])).unwrap();
        let x = Tensor::zeros(&[3, 16, 16]);
        assert!(predict(&net, &x, 1, 3).is_err());
        assert!(predict(&net, &Tensor::zeros(&[3, 10, 10]), 1, 0).is_err());
    }

    #[test]
    fn lora_at_init_is_exactly_the_base_net() {
        let base = UNet::new(small(), &mut stream(4, &[])).unwrap();
        let adapted = base.attach_lora(4, &mut stream(5, &[])).unwrap();
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut stream(6, &[]));
        let yb = predict(&base, &x, 321, 2).unwrap();
        let ya = predict(&adapted, &x, 321, 2).unwrap();
        assert_eq!(yb.max_abs_diff(&ya), 0.0);
    }

    #[test]
    fn lora_parameter_count_is_rank_times_dims() {
        let base = UNet::new(small(), &mut stream(4, &[])).unwrap();
        let adapted = base.attach_lora(4, &mut stream(5, &[])).unwrap();
        let mut want = 0;
        for t in adapted.lora().unwrap().targets.iter() {
            let s = base.params().require(t).unwrap().shape().to_vec();
            want += 4 * (s[0] + s[1..].iter().product::<usize>());
        }
        assert_eq!(adapted.params().trainable_numel(), want);
        // emb.1.w is a 16x16 dense layer
        let a = adapted.params().require("emb.1.w.lora_a").unwrap();
        let b = adapted.params().require("emb.1.w.lora_b").unwrap();
        assert_eq!(a.numel() + b.numel(), 4 * (16 + 16));
    }

    #[test]
    fn lora_rank_too_large_fails() {
        let base = UNet::new(small(), &mut stream(4, &[])).unwrap();
        assert!(base.attach_lora(9, &mut stream(5, &[])).is_err());
        assert!(base.attach_lora(0, &mut stream(5, &[])).is_err());
    }

    #[test]
    fn gradients_reach_only_adapters() {
        let base = UNet::new(small(), &mut stream(7, &[])).unwrap();
        let net = base.attach_lora(2, &mut stream(8, &[])).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(net.params());
        let x = g.constant(Tensor::randn(&[3, 16, 16], 1.0, &mut stream(9, &[])));
        let y = net.forward(&mut g, &mut bind, x, 100, 1).unwrap();
        let sq = g.square(y);
        let loss = g.mean(sq);
        let mut grads = g.backward(loss).unwrap();
        let pg = bind.gradients(&mut grads);
        let mut adapter_signal = 0.0;
        for ((name, _), grad) in net.params().iter().zip(&pg.0) {
            let m = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
                adapter_signal += m;
            } else {
                assert_eq!(m, 0.0, "{name}");
            }
        }
        assert!(adapter_signal > 0.0);
    }

    #[test]
    fn checkpoint_params_restore_the_same_net() {
        let base = UNet::new(small(), &mut stream(10, &[])).unwrap();
        let net = base.attach_lora(2, &mut stream(11, &[])).unwrap();
        let restored = UNet::from_params(small(), ParamSet::from_named(net.params().to_named()), net.lora().cloned()).unwrap();
        assert_eq!(restored.params().trainable_numel(), net.params().trainable_numel());
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut stream(12, &[]));
        assert_eq!(predict(&net, &x, 5, 0).unwrap(), predict(&restored, &x, 5, 0).unwrap());
    }

    #[test]
    fn restore_infers_adapters() {
        let base = UNet::new(small(), &mut stream(10, &[])).unwrap();
        let plain = UNet::restore(small(), ParamSet::from_named(base.params().to_named())).unwrap();
        assert!(plain.lora().is_none());
        let net = base.attach_lora(2, &mut stream(11, &[])).unwrap();
        let restored = UNet::restore(small(), ParamSet::from_named(net.params().to_named())).unwrap();
        assert_eq!(restored.lora(), net.lora());
        assert_eq!(restored.params().trainable_numel(), net.params().trainable_numel());
    }
}
