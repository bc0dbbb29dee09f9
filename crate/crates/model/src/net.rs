//! Network layout, parameter storage and the forward pass.

use std::fmt::Write as _;

use mganet_tensor::{multi_head_attention, positional_encoding, Element, Modality, Projection, QkvProjection, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
}

/// k3 conv, activation, k1 conv, plus a shortcut (k1 conv when channels change).
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    first: Conv,
    second: Conv,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    d1: ResBlock,
    d2: ResBlock,
    d3: ResBlock,
    d4: ResBlock,
    last: Conv,
}

#[derive(Debug, Clone, Copy)]
struct Mga {
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    e1: Conv,
    e2: ResBlock,
    e3: Conv,
    e4: ResBlock,
    e5: Conv,
    e6: ResBlock,
    e7: Conv,
    b8: ResBlock,
    qkv: Conv,
    attn_out: Conv,
    mask: Decoder,
    recon: Decoder,
    mga: Mga,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// One line of the symbolic layer trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub layer: String,
    pub spec: String,
    pub params: Option<Vec<usize>>,
    pub output: Option<Vec<usize>>,
    /// Rows of the published layer table; the rest (second decoder, MGA projections) are extra.
    pub in_table: bool,
}

fn tuple(v: &[usize]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("({})", parts.join(","))
}

impl ShapeRow {
    pub fn render(&self) -> String {
        let cell = |s: &str| if s.is_empty() { "-".to_string() } else { s.to_string() };
        format!(
            "{} | {} | {} | {}",
            self.layer,
            cell(&self.spec),
            self.params.as_deref().map_or("-".into(), tuple),
            self.output.as_deref().map_or("-".into(), tuple)
        )
    }
}

/// The layer trace of a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
    pub total_params: usize,
}

impl ShapeTable {
    /// The published-table rows, one per line.
    pub fn table_rows(&self) -> String {
        self.rows.iter().filter(|r| r.in_table).map(|r| r.render() + "\n").collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Layer | Specifications | Parameters | Output Dimension\n");
        out += &self.table_rows();
        out += "\nAdditional layers\n";
        for r in self.rows.iter().filter(|r| !r.in_table) {
            out += &r.render();
            out.push('\n');
        }
        let _ = writeln!(out, "\nTrainable parameters: {}", self.total_params);
        out
    }
}

struct Builder<'c> {
    cfg: &'c ModelConfig,
    params: Vec<ParamSpec>,
    rows: Vec<ShapeRow>,
    table: bool,
}

impl<'c> Builder<'c> {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.params.push(ParamSpec { name, shape });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, label: &str, cin: usize, cout: usize, k: usize, stride: usize, side: usize) -> Conv {
        let shape = vec![cout, cin, k, k, k];
        let weight = self.param(format!("{name}.weight"), shape.clone());
        let bias = self.param(format!("{name}.bias"), vec![cout]);
        self.rows.push(ShapeRow {
            layer: label.to_string(),
            spec: format!("Kernel size {k}, stride {stride}"),
            params: Some(shape),
            output: Some(vec![cout, side, side, side]),
            in_table: self.table,
        });
        Conv { weight, bias, stride }
    }

    fn header(&mut self, label: &str, spec: String) {
        self.rows.push(ShapeRow { layer: label.into(), spec, params: None, output: None, in_table: self.table });
    }

    fn res(&mut self, name: &str, label: &str, cin: usize, cout: usize, side: usize) -> ResBlock {
        let first = self.conv(&format!("{name}.1"), &format!("{label}.1"), cin, cout, 3, 1, side);
        let second = self.conv(&format!("{name}.2"), &format!("{label}.2"), cout, cout, 1, 1, side);
        let shortcut = (cin != cout).then(|| self.conv(&format!("{name}.3"), &format!("{label}.3"), cin, cout, 1, 1, side));
        ResBlock { first, second, shortcut }
    }

    /// D1..D3 of a decoder.
    fn decoder_upper(&mut self, prefix: &str, label: &str) -> [ResBlock; 3] {
        let n = self.cfg.input_side;
        let (c16, c32) = (self.cfg.channels(16), self.cfg.channels(32));
        let d1 = self.res(&format!("{prefix}1"), &format!("{label}1"), c32, c32, n / 8);
        let d2 = self.res(&format!("{prefix}2"), &format!("{label}2"), 2 * c32, c32, n / 4);
        let d3 = self.res(&format!("{prefix}3"), &format!("{label}3"), 2 * c32, c16, n / 2);
        [d1, d2, d3]
    }

    fn decoder_lower(&mut self, prefix: &str, label: &str, last_name: &str, last_label: &str) -> (ResBlock, Conv) {
        let n = self.cfg.input_side;
        let (c8, c16) = (self.cfg.channels(8), self.cfg.channels(16));
        let d4 = self.res(&format!("{prefix}4"), &format!("{label}4"), 2 * c16, c8, n);
        let last = self.conv(last_name, last_label, c8, 1, 3, 1, n);
        (d4, last)
    }
}

fn build_layout(cfg: &ModelConfig) -> Result<(Layout, Vec<ParamSpec>, Vec<ShapeRow>)> {
    cfg.validate()?;
    let n = cfg.input_side;
    let (c16, c32, c64) = (cfg.channels(16), cfg.channels(32), cfg.channels(64));
    let inner = cfg.inner();
    let mut b = Builder { cfg, params: Vec::new(), rows: Vec::new(), table: true };
    b.rows.push(ShapeRow { layer: "Input Image".into(), spec: String::new(), params: None, output: Some(vec![1, n, n, n]), in_table: true });
    let e1 = b.conv("encoder1", "Encoder 1", 1, c16, 3, 1, n);
    let e2 = b.res("encoder2", "Encoder 2", c16, c16, n);
    let e3 = b.conv("encoder3.1", "Encoder 3.1", c16, c16, 1, 2, n / 2);
    let e4 = b.res("encoder4", "Encoder 4", c16, c32, n / 2);
    let e5 = b.conv("encoder5.1", "Encoder 5.1", c32, c32, 1, 2, n / 4);
    let e6 = b.res("encoder6", "Encoder 6", c32, c64, n / 4);
    let e7 = b.conv("encoder7.1", "Encoder 7.1", c64, c64, 1, 2, n / 8);
    let b8 = b.res("bottleneck8", "Bottleneck 8", c64, c64, n / 8);
    let heads = format!("head dimension {}, number of heads {}", cfg.head_dim, cfg.heads);
    b.header("Attention", heads.clone());
    let qkv = b.conv("attention2.1", "Attention 2.1", c64, 3 * inner, 1, 1, n / 8);
    let attn_out = b.conv("attention2.2", "Attention 2.2", inner, c32, 1, 1, n / 8);
    let [m1, m2, m3] = b.decoder_upper("mask_decoder", "Decoder ");
    b.header("MGA", heads);
    let (m4, mlast) = b.decoder_lower("mask_decoder", "Decoder ", "mask_last", "Last convolution");
    b.table = false;
    let [r1, r2, r3] = b.decoder_upper("recon_decoder", "Reconstruction decoder ");
    let (r4, rlast) = b.decoder_lower("recon_decoder", "Reconstruction decoder ", "recon_last", "Reconstruction last convolution");
    let side = n / 2 / cfg.mga_pool;
    let mga = Mga {
        q: b.conv("mga.query", "MGA query", c16, inner, 1, 1, side),
        k: b.conv("mga.key", "MGA key", c16, inner, 1, 1, side),
        v: b.conv("mga.value", "MGA value", c16, inner, 1, 1, side),
        out: b.conv("mga.out", "MGA output", inner, c16, 1, 1, n / 2),
    };
    let layout = Layout {
        e1,
        e2,
        e3,
        e4,
        e5,
        e6,
        e7,
        b8,
        qkv,
        attn_out,
        mask: Decoder { d1: m1, d2: m2, d3: m3, d4: m4, last: mlast },
        recon: Decoder { d1: r1, d2: r2, d3: r3, d4: r4, last: rlast },
        mga,
    };
    Ok((layout, b.params, b.rows))
}

/// Symbolic layer trace; nothing is allocated besides the table itself.
pub fn shape_infer(cfg: &ModelConfig) -> Result<ShapeTable> {
    let (_, params, rows) = build_layout(cfg)?;
    let total_params = params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    Ok(ShapeTable { rows, total_params })
}

/// The two network outputs, each `[B, 1, N, N, N]`.
#[derive(Debug, Clone, Copy)]
pub struct Outputs<'t, T> {
    pub sdt: Var<'t, T>,
    pub recon: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct MgaNet<T = f32> {
    cfg: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Element> MgaNet<T> {
    /// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (layout, specs, _) = build_layout(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = 1usize;
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            if s.shape.len() == 5 {
                fan_in = s.shape[1..].iter().product();
            }
            // a bias follows its weight and shares the bound
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = s.shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            params.push(Tensor::new(s.shape.clone(), data)?);
        }
        Ok(Self { cfg: cfg.clone(), layout, specs, params })
    }

    /// Rebuild from stored tensors, checking them against the layout.
    pub fn from_params(cfg: &ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let (layout, specs, _) = build_layout(cfg)?;
        if params.len() != specs.len() {
            return Err(ModelError::Checkpoint(format!("{} tensors for {} parameters", params.len(), specs.len())));
        }
        for (s, p) in specs.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!("{} has shape {:?}, expected {:?}", s.name, p.shape(), s.shape)));
            }
        }
        Ok(Self { cfg: cfg.clone(), layout, specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Index of the named parameter tensor.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Switch the ablation flags without touching the weights.
    pub fn set_flags(&mut self, use_mga: bool, use_spe: bool, use_da: bool) {
        self.cfg.use_mga = use_mga;
        self.cfg.use_spe = use_spe;
        self.cfg.use_da = use_da;
    }

    /// FNV-1a over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &x in p.data() {
                for byte in x.as_f64().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Element>(&self) -> MgaNet<U> {
        MgaNet { cfg: self.cfg.clone(), layout: self.layout, specs: self.specs.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Put the parameters on a tape, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| if trainable { tape.var(p.clone()) } else { tape.constant(p.clone()) }).collect()
    }

    /// Forward pass on `[B, 1, N, N, N]` input with parameters from [`MgaNet::bind`].
    pub fn forward<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>, modality: Modality) -> Result<Outputs<'t, T>> {
        let n = self.cfg.input_side;
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [n, n, n] {
            return Err(ModelError::Tensor(mganet_tensor::TensorError::ShapeMismatch(format!(
                "input {shape:?}, expected [B, 1, {n}, {n}, {n}]"
            ))));
        }
        let batch = shape[0];
        let l = &self.layout;
        let slope = self.cfg.leaky_slope;
        let conv = |c: Conv, h: Var<'t, T>| h.conv3d(p[c.weight], p[c.bias], c.stride);
        let res = |b: ResBlock, h: Var<'t, T>| -> Result<Var<'t, T>> {
            let y = conv(b.second, conv(b.first, h)?.leaky_relu(slope))?;
            let s = match b.shortcut {
                Some(c) => conv(c, h)?,
                None => h,
            };
            Ok(y.add(s)?)
        };

        let e1 = conv(l.e1, x)?.leaky_relu(slope);
        let skip_full = res(l.e2, e1)?;
        let skip_half = res(l.e4, conv(l.e3, skip_full)?)?;
        let skip_quarter = conv(l.e5, skip_half)?;
        let e6 = res(l.e6, skip_quarter)?;
        let mut bottom = res(l.b8, conv(l.e7, e6)?)?;
        if self.cfg.use_spe {
            let side = n / 8;
            let pe = positional_encoding::<T>([side; 3], self.cfg.channels(64), modality)?;
            let mut data = Vec::with_capacity(batch * pe.len());
            for _ in 0..batch {
                data.extend_from_slice(pe.data());
            }
            let pe = Tensor::new(bottom.shape(), data)?;
            bottom = bottom.add(x.tape().constant(pe))?;
        }
        let proj = |c: Conv| Projection { weight: p[c.weight], bias: p[c.bias] };
        let attended = multi_head_attention(
            bottom,
            bottom,
            QkvProjection::Fused(proj(l.qkv)),
            proj(l.attn_out),
            self.cfg.heads,
            self.cfg.head_dim,
        )?;

        let upper = |d: Decoder| -> Result<Var<'t, T>> {
            let d1 = res(d.d1, attended)?;
            let d2 = res(d.d2, d1.upsample_nearest(2)?.concat_channels(skip_quarter)?)?;
            res(d.d3, d2.upsample_nearest(2)?.concat_channels(skip_half)?)
        };
        let lower = |d: Decoder, h: Var<'t, T>| -> Result<Var<'t, T>> {
            let d4 = res(d.d4, h.upsample_nearest(2)?.concat_channels(skip_full)?)?;
            Ok(conv(d.last, d4)?)
        };
        let mask_features = upper(l.mask)?;
        let mut recon_features = upper(l.recon)?;
        if self.cfg.use_mga {
            let pool = self.cfg.mga_pool;
            let shrink = |h: Var<'t, T>| if pool > 1 { h.avg_pool(pool) } else { Ok(h) };
            let q_src = shrink(recon_features)?;
            let kv_src = shrink(mask_features)?;
            let split = QkvProjection::Split { q: proj(l.mga.q), k: proj(l.mga.k), v: proj(l.mga.v) };
            let mut guided = multi_head_attention(q_src, kv_src, split, proj(l.mga.out), self.cfg.heads, self.cfg.head_dim)?;
            if pool > 1 {
                guided = guided.upsample_nearest(pool)?;
            }
            recon_features = recon_features.add(guided)?;
        }
        Ok(Outputs { sdt: lower(l.mask, mask_features)?, recon: lower(l.recon, recon_features)? })
    }

    /// Forward without gradients on a batch tensor; returns `(sdt, recon)` values.
    pub fn predict(&self, x: &Tensor<T>, modality: Modality) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(&p, tape.constant(x.clone()), modality)?;
        Ok((out.sdt.to_tensor(), out.recon.to_tensor()))
    }
}
