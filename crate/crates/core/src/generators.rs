//! Implicit generators mapping a fixed input code to an (all-in-focus image,
//! defocus map) pair: an encoder-decoder convolutional net with skip
//! connections driven by a noise code, a sine-activated coordinate MLP, and a
//! Fourier-feature variant of the convolutional net.
//!
//! All three share one output contract: a 4-channel head where the first
//! three channels pass through a sigmoid (image in [0,1]) and the fourth
//! through a sigmoid mapped affinely onto [psi_lo, psi_hi] — the defocus
//! range is guaranteed architecturally, for any parameter values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tape::{PadMode, Tape, Var};
use crate::tensor::TensorData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Dip,
    Siren,
    Pip,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeneratorKind::Dip => write!(f, "dip"),
            GeneratorKind::Siren => write!(f, "siren"),
            GeneratorKind::Pip => write!(f, "pip"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Noise-code channels (dip).
    pub input_depth: usize,
    /// Trunk width (dip/pip).
    pub width: usize,
    /// Encoder/decoder levels (dip/pip); spatial extents must divide 2^levels.
    pub levels: usize,
    /// Skip-connection width (dip/pip).
    pub skip_width: usize,
    /// Per-channel normalization in the trunk (dip/pip).
    pub normalization: bool,
    /// Padding for trunk convolutions.
    pub pad: PadMode,
    /// Sine layers (siren), the first one included.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub omega0: f64,
    /// Fourier-feature pairs (pip); code has 2x this many channels.
    pub fourier_features: usize,
    /// Std of the Gaussian frequency matrix (pip), in cycles per half-image.
    pub frequency_scale: f64,
    /// Defocus head output range.
    pub psi_lo: f64,
    pub psi_hi: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn dip(seed: u64) -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Dip,
            input_depth: 32,
            width: 128,
            levels: 5,
            skip_width: 16,
            normalization: true,
            pad: PadMode::Reflect,
            hidden_layers: 5,
            hidden_width: 256,
            omega0: 30.0,
            fourier_features: 128,
            frequency_scale: 6.0,
            psi_lo: -4.0,
            psi_hi: 10.0,
            seed,
        }
    }

    pub fn siren(seed: u64) -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Siren,
            ..Self::dip(seed)
        }
    }

    pub fn pip(seed: u64) -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Pip,
            ..Self::dip(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi_lo >= self.psi_hi {
            return Err(Error::Config("generator psi range is empty".into()));
        }
        match self.kind {
            GeneratorKind::Dip | GeneratorKind::Pip => {
                if self.width == 0 || self.levels == 0 || self.skip_width == 0 {
                    return Err(Error::Config("trunk dimensions must be positive".into()));
                }
                if self.kind == GeneratorKind::Dip && self.input_depth == 0 {
                    return Err(Error::Config("input_depth must be positive".into()));
                }
                if self.kind == GeneratorKind::Pip && self.fourier_features == 0 {
                    return Err(Error::Config("fourier_features must be positive".into()));
                }
            }
            GeneratorKind::Siren => {
                if self.hidden_layers == 0 || self.hidden_width == 0 {
                    return Err(Error::Config("siren dimensions must be positive".into()));
                }
                if self.omega0 <= 0.0 {
                    return Err(Error::Config("omega0 must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Canonical digest over all fields (checkpoint compatibility check).
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update([match self.kind {
            GeneratorKind::Dip => 0u8,
            GeneratorKind::Siren => 1,
            GeneratorKind::Pip => 2,
        }]);
        for v in [
            self.input_depth,
            self.width,
            self.levels,
            self.skip_width,
            self.normalization as usize,
            self.hidden_layers,
            self.hidden_width,
            self.fourier_features,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update([match self.pad {
            PadMode::Zero => 0u8,
            PadMode::Reflect => 1,
            PadMode::Valid => 2,
        }]);
        for v in [self.omega0, self.frequency_scale, self.psi_lo, self.psi_hi] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        h.finalize().into()
    }
}

/// One trainable block with its construction-order name.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self) -> TensorData<T> {
        TensorData::new(self.shape.clone(), self.data.clone())
    }
}

/// Outputs of one generator forward pass on a tape.
pub struct GenForward {
    pub image: Var,
    pub psi: Var,
    /// Leaf vars aligned with [`Generator::params`] order.
    pub param_vars: Vec<Var>,
}

/// A built generator: parameter store plus the frozen input code. Mutated
/// only by the optimizer that owns it.
pub struct Generator<T: Real> {
    pub cfg: GeneratorConfig,
    pub h: usize,
    pub w: usize,
    params: Vec<Param<T>>,
    code: TensorData<T>,
}

pub fn build_generator<T: Real>(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<Generator<T>> {
    cfg.validate()?;
    match cfg.kind {
        GeneratorKind::Dip | GeneratorKind::Pip => {
            let div = 1usize << cfg.levels;
            if h % div != 0 || w % div != 0 {
                return Err(Error::Config(format!(
                    "spatial extents {}x{} must be divisible by 2^levels = {}",
                    h, w, div
                )));
            }
            if (h >> cfg.levels) == 0 || (w >> cfg.levels) == 0 {
                return Err(Error::Config("image too small for the level count".into()));
            }
            build_trunk(cfg, h, w)
        }
        GeneratorKind::Siren => build_siren(cfg, h, w),
    }
}

impl<T: Real> Generator<T> {
    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// The frozen input code (regenerated identically from the seed).
    pub fn code(&self) -> &TensorData<T> {
        &self.code
    }

    /// Run the generator on a tape against the given code (normally
    /// [`Generator::code`], optionally perturbed by the engine). Returns the
    /// image/psi heads and the parameter leaves for gradient extraction.
    pub fn forward(&self, tape: &mut Tape<T>, code: &TensorData<T>) -> Result<GenForward> {
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.tensor())).collect();
        let code_var = tape.constant(code.clone());
        let mut cur = Cursor { i: 0 };
        let head = match self.cfg.kind {
            GeneratorKind::Dip | GeneratorKind::Pip => self.trunk_forward(tape, code_var, &param_vars, &mut cur)?,
            GeneratorKind::Siren => self.siren_forward(tape, code_var, &param_vars, &mut cur)?,
        };
        debug_assert_eq!(cur.i, self.params.len(), "forward must consume every parameter");
        // Shared output contract: sigmoid image head, sigmoid+affine psi head.
        let img_raw = tape.slice0(head, 0, 3)?;
        let image = tape.sigmoid(img_raw)?;
        let psi_raw = tape.slice0(head, 3, 1)?;
        let psi_unit = tape.sigmoid(psi_raw)?;
        let lo = T::of_f64(self.cfg.psi_lo);
        let span = T::of_f64(self.cfg.psi_hi - self.cfg.psi_lo);
        let psi_chan = tape.affine(psi_unit, span, lo)?;
        let psi = tape.reshape(psi_chan, vec![self.h, self.w])?;
        Ok(GenForward { image, psi, param_vars })
    }

    fn trunk_forward(&self, tape: &mut Tape<T>, code: Var, vars: &[Var], cur: &mut Cursor) -> Result<Var> {
        let cfg = &self.cfg;
        let levels = cfg.levels;
        let conv_s2 = crate::tape::ConvCfg { stride: 2, pad: cfg.pad };
        let conv_s1 = crate::tape::ConvCfg { stride: 1, pad: cfg.pad };
        let conv_1x1 = crate::tape::ConvCfg { stride: 1, pad: PadMode::Valid };
        let alpha = T::of_f64(0.1);

        let mut block = |tape: &mut Tape<T>, x: Var, cc: crate::tape::ConvCfg, cur: &mut Cursor| -> Result<Var> {
            let w = cur.next(vars);
            let b = cur.next(vars);
            let y = tape.conv2d(x, w, cc)?;
            let y = tape.add(y, b)?;
            let y = if cfg.normalization {
                let scale = cur.next(vars);
                let shift = cur.next(vars);
                tape.instance_norm(y, scale, shift, T::of_f64(1e-5))?
            } else {
                y
            };
            tape.leaky_relu(y, alpha)
        };

        // Encoder; skip sources are the code and every level output but the last.
        let mut sources = vec![code];
        let mut e = code;
        for _ in 0..levels {
            e = block(tape, e, conv_s2, cur)?;
            e = block(tape, e, conv_s1, cur)?;
            sources.push(e);
        }
        sources.pop();

        // Decoder: upsample first, concatenate the skip, then the conv pair.
        let mut d = e;
        for lvl in (0..levels).rev() {
            d = tape.upsample2x(d)?;
            let sw = cur.next(vars);
            let sb = cur.next(vars);
            let s = tape.conv2d(sources[lvl], sw, conv_1x1)?;
            let s = tape.add(s, sb)?;
            let s = tape.leaky_relu(s, alpha)?;
            d = tape.concat0(&[d, s])?;
            d = block(tape, d, conv_s1, cur)?;
            d = block(tape, d, conv_s1, cur)?;
        }

        let hw = cur.next(vars);
        let hb = cur.next(vars);
        let out = tape.conv2d(d, hw, conv_1x1)?;
        tape.add(out, hb)
    }

    fn siren_forward(&self, tape: &mut Tape<T>, code: Var, vars: &[Var], cur: &mut Cursor) -> Result<Var> {
        let omega = T::of_f64(self.cfg.omega0);
        let mut hcur = code; // (H*W) x 2 coordinates
        for _ in 0..self.cfg.hidden_layers {
            let w = cur.next(vars);
            let b = cur.next(vars);
            let m = tape.matmul(hcur, w)?;
            let m = tape.add(m, b)?;
            hcur = tape.sine(m, omega)?;
        }
        let w = cur.next(vars);
        let b = cur.next(vars);
        let m = tape.matmul(hcur, w)?;
        let m = tape.add(m, b)?;
        // (H*W) x 4 -> 4 x H x W
        let t = tape.transpose2d(m)?;
        tape.reshape(t, vec![4, self.h, self.w])
    }
}

struct Cursor {
    i: usize,
}

impl Cursor {
    fn next(&mut self, vars: &[Var]) -> Var {
        let v = vars[self.i];
        self.i += 1;
        v
    }
}

// ── Construction ─────────────────────────────────────────────────────

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn new(seed: u64) -> Self {
        Builder {
            params: Vec::new(),
            rng: rng::stream(seed, "params"),
        }
    }

    fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> &mut Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of_f64(self.rng.random_range(-bound..bound))).collect();
        self.params.push(Param { name: name.into(), shape, data });
        self
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> &mut Self {
        let n: usize = shape.iter().product();
        self.params.push(Param {
            name: name.into(),
            shape,
            data: vec![T::of_f64(v); n],
        });
        self
    }

    /// Kaiming-uniform bound for a leaky-relu(0.1) conv layer.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, norm: bool) {
        let fan_in = (cin * k * k) as f64;
        let gain = (2.0 / (1.0 + 0.1f64 * 0.1)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        self.uniform(&format!("{name}.weight"), vec![cout, cin, k, k], bound);
        self.constant(&format!("{name}.bias"), vec![cout, 1, 1], 0.0);
        if norm {
            self.constant(&format!("{name}.scale"), vec![cout], 1.0);
            self.constant(&format!("{name}.shift"), vec![cout], 0.0);
        }
    }
}

fn build_trunk<T: Real>(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<Generator<T>> {
    let in_ch = match cfg.kind {
        GeneratorKind::Dip => cfg.input_depth,
        GeneratorKind::Pip => 2 * cfg.fourier_features,
        GeneratorKind::Siren => unreachable!(),
    };
    let f = cfg.width;
    let mut b = Builder::<T>::new(cfg.seed);
    let mut cin = in_ch;
    for lvl in 0..cfg.levels {
        b.conv(&format!("enc{lvl}.a"), f, cin, 3, cfg.normalization);
        b.conv(&format!("enc{lvl}.b"), f, f, 3, cfg.normalization);
        cin = f;
    }
    for lvl in (0..cfg.levels).rev() {
        let src = if lvl == 0 { in_ch } else { f };
        b.conv(&format!("skip{lvl}"), cfg.skip_width, src, 1, false);
        b.conv(&format!("dec{lvl}.a"), f, f + cfg.skip_width, 3, cfg.normalization);
        b.conv(&format!("dec{lvl}.b"), f, f, 3, cfg.normalization);
    }
    b.conv("head", 4, f, 1, false);

    let code = match cfg.kind {
        GeneratorKind::Dip => {
            let mut r = rng::stream(cfg.seed, "code");
            let data: Vec<T> = (0..in_ch * h * w).map(|_| T::of_f64(r.random_range(0.0..1.0))).collect();
            TensorData::new(vec![in_ch, h, w], data)
        }
        GeneratorKind::Pip => fourier_code(cfg, h, w),
        GeneratorKind::Siren => unreachable!(),
    };
    Ok(Generator {
        cfg: cfg.clone(),
        h,
        w,
        params: b.params,
        code,
    })
}

fn build_siren<T: Real>(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<Generator<T>> {
    let width = cfg.hidden_width;
    let mut b = Builder::<T>::new(cfg.seed);
    let mut fan_in = 2usize;
    for l in 0..cfg.hidden_layers {
        // Principled sine init: first layer U(+-1/n), deeper layers
        // U(+-sqrt(6/n)/omega0).
        let bound = if l == 0 {
            1.0 / fan_in as f64
        } else {
            (6.0 / fan_in as f64).sqrt() / cfg.omega0
        };
        b.uniform(&format!("sine{l}.weight"), vec![fan_in, width], bound);
        b.uniform(&format!("sine{l}.bias"), vec![width], 1.0 / (fan_in as f64).sqrt());
        fan_in = width;
    }
    let bound = (6.0 / fan_in as f64).sqrt() / cfg.omega0;
    b.uniform("head.weight", vec![fan_in, 4], bound);
    b.uniform("head.bias", vec![4], 1.0 / (fan_in as f64).sqrt());

    Ok(Generator {
        cfg: cfg.clone(),
        h,
        w,
        params: b.params,
        code: coord_code(h, w),
    })
}

/// (H*W) x 2 normalized pixel coordinates in [-1, 1], row-major (x then y).
pub fn coord_code<T: Real>(h: usize, w: usize) -> TensorData<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let u = if w > 1 { 2.0 * x as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
            let v = if h > 1 { 2.0 * y as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
            data.push(T::of_f64(u));
            data.push(T::of_f64(v));
        }
    }
    TensorData::new(vec![h * w, 2], data)
}

/// Fourier-feature image code: per feature j with frequency b_j drawn from
/// N(0, frequency_scale^2)^2, channels (sin, cos) of 2*pi*(b_j . (u, v)).
fn fourier_code<T: Real>(cfg: &GeneratorConfig, h: usize, w: usize) -> TensorData<T> {
    use rand_distr::{Distribution, Normal};
    let nf = cfg.fourier_features;
    let mut r = rng::stream(cfg.seed, "fourier");
    let normal = Normal::new(0.0, cfg.frequency_scale).expect("positive scale");
    let freqs: Vec<(f64, f64)> = (0..nf).map(|_| (normal.sample(&mut r), normal.sample(&mut r))).collect();
    let mut data = vec![T::zero(); 2 * nf * h * w];
    for (j, &(bx, by)) in freqs.iter().enumerate() {
        for y in 0..h {
            let v = if h > 1 { 2.0 * y as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
            for x in 0..w {
                let u = if w > 1 { 2.0 * x as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
                let phase = std::f64::consts::TAU * (bx * u + by * v);
                data[(2 * j) * h * w + y * w + x] = T::of_f64(phase.sin());
                data[(2 * j + 1) * h * w + y * w + x] = T::of_f64(phase.cos());
            }
        }
    }
    TensorData::new(vec![2 * nf, h, w], data)
}
