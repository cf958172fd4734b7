//! Configurable small encoders: an ordered layer chain over the autodiff
//! tape, He-normal initialization, and checkpoint I/O (a directory of
//! ETEN1 tensors plus a plain-text arch manifest, one layer per line).
//!
//! # Example
//!
//! ```
//! use episodica::encoder::{parse_arch, EncoderModel};
//! use episodica::tensor::Tensor;
//!
//! let arch = parse_arch("conv3x3 3 8 2; relu; global_avg_pool; dense 8 4")?;
//! let model = EncoderModel::init(arch, (3, 16, 16), 0)?;
//! let batch = Tensor::zeros(&[2, 3, 16, 16]);
//! assert_eq!(model.forward(&batch)?.shape(), &[2, 4]);
//! # Ok::<(), episodica::Error>(())
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_eten1, write_eten1, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense { input: usize, output: usize },
    Conv3x3 { cin: usize, cout: usize, stride: usize },
    Relu,
    GlobalAvgPool,
    L2NormalizeOutput,
}

impl Layer {
    pub fn manifest_line(&self) -> String {
        match self {
            Layer::Dense { input, output } => format!("dense {input} {output}"),
            Layer::Conv3x3 { cin, cout, stride } => format!("conv3x3 {cin} {cout} {stride}"),
            Layer::Relu => "relu".into(),
            Layer::GlobalAvgPool => "global_avg_pool".into(),
            Layer::L2NormalizeOutput => "l2_normalize_output".into(),
        }
    }

    pub fn parse(line: &str) -> Result<Layer> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let usage = |what: &str| Error::Config(format!("bad layer spec '{line}': {what}"));
        let num = |s: &str| s.parse::<usize>().map_err(|_| usage("expected integer"));
        match parts.as_slice() {
            ["dense", i, o] => Ok(Layer::Dense { input: num(i)?, output: num(o)? }),
            ["conv3x3", ci, co, s] => {
                Ok(Layer::Conv3x3 { cin: num(ci)?, cout: num(co)?, stride: num(s)? })
            }
            ["relu"] => Ok(Layer::Relu),
            ["global_avg_pool"] => Ok(Layer::GlobalAvgPool),
            ["l2_normalize_output"] => Ok(Layer::L2NormalizeOutput),
            _ => Err(usage("unknown layer")),
        }
    }
}

/// Parse a semicolon- or newline-separated arch spec.
pub fn parse_arch(text: &str) -> Result<Vec<Layer>> {
    text.split(|c| c == ';' || c == '\n')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(Layer::parse)
        .collect()
}

pub fn arch_to_manifest(arch: &[Layer]) -> String {
    arch.iter().map(|l| l.manifest_line() + "\n").collect()
}

/// Shape a batch flows through the chain, for validation at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Flow {
    /// (channels, height, width)
    Spatial(usize, usize, usize),
    /// feature dimension
    Flat(usize),
}

/// Encoder parameters plus architecture. Two models built from the same
/// arch have structurally congruent parameter maps, which is what the
/// momentum-encoder update requires.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    arch: Vec<Layer>,
    params: BTreeMap<String, Tensor>,
    input_shape: (usize, usize, usize),
    embed_dim: usize,
}

/// Tape handles for a model's parameters, produced by [`EncoderModel::bind`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl EncoderModel {
    /// He-normal weights, zero biases, deterministic in the seed.
    pub fn init(arch: Vec<Layer>, input_shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        let embed_dim = validate_arch(&arch, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (i, layer) in arch.iter().enumerate() {
            match *layer {
                Layer::Dense { input, output } => {
                    let std = (2.0 / input as f64).sqrt();
                    params.insert(
                        format!("layer{i}.weight"),
                        he_normal(&mut rng, &[input, output], std),
                    );
                    params.insert(format!("layer{i}.bias"), Tensor::zeros(&[output]));
                }
                Layer::Conv3x3 { cin, cout, .. } => {
                    let fan_in = cin * 9;
                    let std = (2.0 / fan_in as f64).sqrt();
                    params.insert(
                        format!("layer{i}.weight"),
                        he_normal(&mut rng, &[cout, cin, 3, 3], std),
                    );
                    params.insert(format!("layer{i}.bias"), Tensor::zeros(&[cout]));
                }
                _ => {}
            }
        }
        Ok(EncoderModel { arch, params, input_shape, embed_dim })
    }

    pub fn arch(&self) -> &[Layer] {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::Shape(format!(
                "set_param {name}: shape {:?} != {:?}",
                value.shape(),
                slot.shape()
            ))),
            None => Err(Error::Shape(format!("set_param: unknown parameter {name}"))),
        }
    }

    /// Record all parameters as leaves on a tape.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars =
            self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        BoundParams { vars }
    }

    /// Forward a rank-4 batch `(n, c, h, w)` through the chain on a tape.
    pub fn forward_on(&self, tape: &Tape, bound: &BoundParams, batch: Var) -> Result<Var> {
        let shape = tape.shape_of(batch);
        if shape.len() != 4
            || (shape[1], shape[2], shape[3]) != self.input_shape
        {
            return Err(Error::Shape(format!(
                "forward: batch shape {:?} does not match encoder input {:?}",
                shape, self.input_shape
            )));
        }
        let mut x = batch;
        let mut spatial = true;
        for (i, layer) in self.arch.iter().enumerate() {
            x = match *layer {
                Layer::Dense { .. } => {
                    if spatial {
                        x = tape.flatten(x)?;
                        spatial = false;
                    }
                    let w = bound.var(&format!("layer{i}.weight"));
                    let b = bound.var(&format!("layer{i}.bias"));
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                Layer::Conv3x3 { stride, .. } => {
                    let w = bound.var(&format!("layer{i}.weight"));
                    let b = bound.var(&format!("layer{i}.bias"));
                    tape.conv3x3(x, w, b, stride)?
                }
                Layer::Relu => tape.relu(x),
                Layer::GlobalAvgPool => {
                    spatial = false;
                    tape.global_avg_pool(x)?
                }
                Layer::L2NormalizeOutput => tape.l2_normalize(x)?,
            };
        }
        Ok(x)
    }

    /// Inference-only forward pass: `(n, c, h, w)` batch to `(n, embed_dim)`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let input = tape.leaf(batch.clone());
        let out = self.forward_on(&tape, &bound, input)?;
        Ok(tape.value(out))
    }

    /// Save as a checkpoint directory: `arch.txt` plus one ETEN1 per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = arch_to_manifest(&self.arch);
        manifest.push_str(&format!(
            "# input {} {} {}\n",
            self.input_shape.0, self.input_shape.1, self.input_shape.2
        ));
        fs::write(dir.join("arch.txt"), manifest)?;
        for (name, tensor) in &self.params {
            write_eten1(dir.join(format!("{name}.eten")), tensor)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("arch.txt"))
            .map_err(|e| Error::Data(format!("checkpoint {}: {e}", dir.display())))?;
        let mut input_shape = None;
        let mut layers = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# input ") {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|_| Error::Data("bad input shape".into())))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(Error::Data("input shape needs 3 dims".into()));
                }
                input_shape = Some((dims[0], dims[1], dims[2]));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            layers.push(Layer::parse(line)?);
        }
        let input_shape =
            input_shape.ok_or_else(|| Error::Data("checkpoint missing input shape".into()))?;
        let mut model = EncoderModel::init(layers, input_shape, 0)?;
        let names: Vec<String> = model.params.keys().cloned().collect();
        for name in names {
            let tensor = read_eten1(dir.join(format!("{name}.eten")))?;
            model.set_param(&name, tensor)?;
        }
        Ok(model)
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_shape_data(shape.to_vec(), data)
}

/// Check the layer chain composes over the input shape; returns embed_dim.
fn validate_arch(arch: &[Layer], input: (usize, usize, usize)) -> Result<usize> {
    if arch.is_empty() {
        return Err(Error::Config("empty architecture".into()));
    }
    let mut flow = Flow::Spatial(input.0, input.1, input.2);
    for (i, layer) in arch.iter().enumerate() {
        flow = match (*layer, flow) {
            (Layer::Dense { input, output }, Flow::Flat(d)) => {
                if d != input {
                    return Err(Error::Config(format!(
                        "layer {i}: dense expects {input} features, gets {d}"
                    )));
                }
                Flow::Flat(output)
            }
            (Layer::Dense { input, output }, Flow::Spatial(c, h, w)) => {
                if c * h * w != input {
                    return Err(Error::Config(format!(
                        "layer {i}: dense expects {input} features, gets {c}x{h}x{w}"
                    )));
                }
                Flow::Flat(output)
            }
            (Layer::Conv3x3 { cin, cout, stride }, Flow::Spatial(c, h, w)) => {
                if c != cin {
                    return Err(Error::Config(format!(
                        "layer {i}: conv expects {cin} channels, gets {c}"
                    )));
                }
                if stride == 0 {
                    return Err(Error::Config(format!("layer {i}: zero stride")));
                }
                Flow::Spatial(cout, (h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1)
            }
            (Layer::Conv3x3 { .. }, Flow::Flat(_)) => {
                return Err(Error::Config(format!("layer {i}: conv after flattening")));
            }
            (Layer::Relu, f) => f,
            (Layer::GlobalAvgPool, Flow::Spatial(c, _, _)) => Flow::Flat(c),
            (Layer::GlobalAvgPool, Flow::Flat(_)) => {
                return Err(Error::Config(format!("layer {i}: pool after flattening")));
            }
            (Layer::L2NormalizeOutput, Flow::Flat(d)) => Flow::Flat(d),
            (Layer::L2NormalizeOutput, Flow::Spatial(..)) => {
                return Err(Error::Config(format!(
                    "layer {i}: l2_normalize_output needs flat features"
                )));
            }
        };
    }
    match flow {
        Flow::Flat(d) => Ok(d),
        Flow::Spatial(..) => {
            Err(Error::Config("architecture must end with flat features".into()))
        }
    }
}
