//! The three network modules (speaker encoder, residual encoder, decoder)
//! plus the shared classifier head and the MINE critic.
//!
//! Encoders: stride-2 convolutions along frequency (time extent 1, so every
//! frame is processed independently), a per-frame linear layer, time average
//! pooling, and a final projection to the embedding dimension. Decoder: two
//! fully-connected layers followed by stride-2 transposed convolutions up to
//! [frames, mel_bins].

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv_out_len, Tape, Tensor, ValueId};
use crate::error::{Error, Result};

/// Frequency-axis kernel width of the encoder convolutions.
const ENC_KW: usize = 5;
const ENC_STRIDE: (usize, usize) = (1, 2);
const ENC_PAD: (usize, usize) = (0, 2);
/// Transposed-convolution geometry (doubles both axes per layer).
const DEC_K: usize = 4;
const DEC_STRIDE: (usize, usize) = (2, 2);
const DEC_PAD: (usize, usize) = (1, 1);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Component {
    EncSpk,
    EncRes,
    Decoder,
    Classifier,
    Critic,
}

/// Set of components whose parameters are trainable in a given step.
#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const NONE: ComponentSet = ComponentSet(0);

    pub fn of(components: &[Component]) -> Self {
        let mut m = 0u8;
        for c in components {
            m |= 1 << *c as u8;
        }
        ComponentSet(m)
    }

    pub fn all() -> Self {
        Self::of(&[
            Component::EncSpk,
            Component::EncRes,
            Component::Decoder,
            Component::Classifier,
            Component::Critic,
        ])
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0 & (1 << c as u8) != 0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_classes: usize,
    pub bins: usize,
    pub mel_bins: usize,
    /// Frames per training segment; fixes the decoder's output geometry.
    pub frames: usize,
    pub enc_channels: Vec<usize>,
    pub enc_hidden: usize,
    pub dec_channels: Vec<usize>,
    pub dec_hidden: usize,
    pub critic_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 128,
            n_classes: 20,
            bins: 257,
            mel_bins: 64,
            frames: 98,
            enc_channels: vec![4, 8, 16],
            enc_hidden: 64,
            dec_channels: vec![16, 8, 8],
            dec_hidden: 64,
            critic_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.d_emb == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 || self.critic_hidden == 0
        {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return Err(Error::Config("enc_channels must be non-empty and positive".into()));
        }
        if self.dec_channels.is_empty() || self.dec_channels.contains(&0) {
            return Err(Error::Config("dec_channels must be non-empty and positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        let n_up = self.dec_channels.len();
        if n_up > 6 {
            return Err(Error::Config("at most 6 transposed-conv layers".into()));
        }
        let div = 1usize << n_up;
        if self.mel_bins % div != 0 || self.mel_bins / div == 0 {
            return Err(Error::Config(format!(
                "mel_bins {} must be divisible by 2^{n_up}",
                self.mel_bins
            )));
        }
        if self.enc_out_bins() == 0 {
            return Err(Error::Config(format!(
                "bins {} collapse to zero after {} stride-2 convolutions",
                self.bins,
                self.enc_channels.len()
            )));
        }
        Ok(())
    }

    /// Frequency bins remaining after the encoder's stride-2 convolutions.
    pub fn enc_out_bins(&self) -> usize {
        let mut b = self.bins;
        for _ in &self.enc_channels {
            if b + 2 * ENC_PAD.1 < ENC_KW {
                return 0;
            }
            b = conv_out_len(b, ENC_KW, ENC_STRIDE.1, ENC_PAD.1);
        }
        b
    }

    /// Decoder seed geometry: [c0, t0, mel0] grows to [1, t0*2^n, mel_bins].
    pub fn dec_seed(&self) -> (usize, usize, usize) {
        let n_up = self.dec_channels.len();
        let up = 1usize << n_up;
        let t0 = self.frames.div_ceil(up);
        (self.dec_channels[0], t0, self.mel_bins / up)
    }
}

/// Per-parameter node ids for one encoder.
#[derive(Debug, Clone)]
pub struct EncoderLayout {
    pub convs: Vec<(usize, usize)>,
    pub frame: (usize, usize),
    pub out: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct DecoderLayout {
    pub fc1: (usize, usize),
    pub fc2: (usize, usize),
    pub tconvs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct CriticLayout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub spk: EncoderLayout,
    pub res: EncoderLayout,
    pub dec: DecoderLayout,
    pub cls_w: usize,
    pub cls_b: usize,
    pub critic: CriticLayout,
}

/// All trainable parameters plus the config that shapes them. Parameter
/// order is fixed by construction and defines the checkpoint layout.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn push_encoder(
    params: &mut Vec<Param>,
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    comp: Component,
    prefix: &str,
) -> EncoderLayout {
    let mut convs = Vec::new();
    let mut c_in = 1usize;
    for (i, &c_out) in cfg.enc_channels.iter().enumerate() {
        let w = xavier(rng, vec![c_out, c_in, 1, ENC_KW], c_in * ENC_KW, c_out * ENC_KW);
        params.push(Param { name: format!("{prefix}.conv{}.w", i + 1), component: comp, tensor: w });
        params.push(Param {
            name: format!("{prefix}.conv{}.b", i + 1),
            component: comp,
            tensor: Tensor::zeros(vec![c_out]),
        });
        convs.push((params.len() - 2, params.len() - 1));
        c_in = c_out;
    }
    let feat = c_in * cfg.enc_out_bins();
    let w = xavier(rng, vec![feat, cfg.enc_hidden], feat, cfg.enc_hidden);
    params.push(Param { name: format!("{prefix}.frame.w"), component: comp, tensor: w });
    params.push(Param {
        name: format!("{prefix}.frame.b"),
        component: comp,
        tensor: Tensor::zeros(vec![cfg.enc_hidden]),
    });
    let frame = (params.len() - 2, params.len() - 1);
    let w = xavier(rng, vec![cfg.enc_hidden, cfg.d_emb], cfg.enc_hidden, cfg.d_emb);
    params.push(Param { name: format!("{prefix}.out.w"), component: comp, tensor: w });
    params.push(Param {
        name: format!("{prefix}.out.b"),
        component: comp,
        tensor: Tensor::zeros(vec![cfg.d_emb]),
    });
    let out = (params.len() - 2, params.len() - 1);
    EncoderLayout { convs, frame, out }
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();

        let spk = push_encoder(&mut params, &mut rng, &config, Component::EncSpk, "spk");
        let res = push_encoder(&mut params, &mut rng, &config, Component::EncRes, "res");

        // Decoder: concat(f_spk, f_res) -> fc1 -> fc2 -> seed volume -> tconvs.
        let (c0, t0, mel0) = config.dec_seed();
        let in_dim = 2 * config.d_emb;
        let w = xavier(&mut rng, vec![in_dim, config.dec_hidden], in_dim, config.dec_hidden);
        params.push(Param { name: "dec.fc1.w".into(), component: Component::Decoder, tensor: w });
        params.push(Param {
            name: "dec.fc1.b".into(),
            component: Component::Decoder,
            tensor: Tensor::zeros(vec![config.dec_hidden]),
        });
        let fc1 = (params.len() - 2, params.len() - 1);
        let seed_n = c0 * t0 * mel0;
        let w = xavier(&mut rng, vec![config.dec_hidden, seed_n], config.dec_hidden, seed_n);
        params.push(Param { name: "dec.fc2.w".into(), component: Component::Decoder, tensor: w });
        params.push(Param {
            name: "dec.fc2.b".into(),
            component: Component::Decoder,
            tensor: Tensor::zeros(vec![seed_n]),
        });
        let fc2 = (params.len() - 2, params.len() - 1);
        let mut tconvs = Vec::new();
        let n_up = config.dec_channels.len();
        for i in 0..n_up {
            let ci = config.dec_channels[i];
            let co = if i + 1 < n_up { config.dec_channels[i + 1] } else { 1 };
            let w = xavier(&mut rng, vec![ci, co, DEC_K, DEC_K], ci * DEC_K * DEC_K, co * DEC_K * DEC_K);
            params.push(Param {
                name: format!("dec.tconv{}.w", i + 1),
                component: Component::Decoder,
                tensor: w,
            });
            params.push(Param {
                name: format!("dec.tconv{}.b", i + 1),
                component: Component::Decoder,
                tensor: Tensor::zeros(vec![co]),
            });
            tconvs.push((params.len() - 2, params.len() - 1));
        }
        let dec = DecoderLayout { fc1, fc2, tconvs };

        // Shared classifier head: logits = emb @ W^T + b.
        let w = xavier(&mut rng, vec![config.n_classes, config.d_emb], config.d_emb, config.n_classes);
        params.push(Param { name: "cls.w".into(), component: Component::Classifier, tensor: w });
        params.push(Param {
            name: "cls.b".into(),
            component: Component::Classifier,
            tensor: Tensor::zeros(vec![config.n_classes]),
        });
        let (cls_w, cls_b) = (params.len() - 2, params.len() - 1);

        let critic =
            push_critic(&mut params, &mut rng, 2 * config.d_emb, config.critic_hidden, "critic");

        let layout = Layout { spk, res, dec, cls_w, cls_b, critic };
        Ok(ModelBundle { config, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn indices_of(&self, c: Component) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].component == c).collect()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Flat binary checkpoint: u64-LE header length, UTF-8 key=value header,
    /// then every parameter tensor in declaration order as f64 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let header = format!(
            "d_emb={}\nn_classes={}\nbins={}\nmel_bins={}\nframes={}\nenc_channels={}\nenc_hidden={}\ndec_channels={}\ndec_hidden={}\ncritic_hidden={}\n",
            c.d_emb,
            c.n_classes,
            c.bins,
            c.mel_bins,
            c.frames,
            join(&c.enc_channels),
            c.enc_hidden,
            join(&c.dec_channels),
            c.dec_hidden,
            c.critic_hidden,
        );
        let mut buf = Vec::with_capacity(8 + header.len() + 8 * self.n_scalars());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for p in &self.params {
            for &v in p.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut len_buf = [0u8; 8];
        f.read_exact(&mut len_buf)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
        let hlen = u64::from_le_bytes(len_buf) as usize;
        let mut hdr = vec![0u8; hlen];
        f.read_exact(&mut hdr)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
        let hdr = String::from_utf8(hdr)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;

        let mut cfg = ModelConfig::default();
        for line in hdr.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line: {line}")))?;
            let usize_of = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad value for {k}: {v}")))
            };
            let list_of = |v: &str| {
                v.split(',')
                    .map(|x| {
                        x.parse::<usize>()
                            .map_err(|_| Error::Checkpoint(format!("bad value for {k}: {v}")))
                    })
                    .collect::<Result<Vec<usize>>>()
            };
            match k {
                "d_emb" => cfg.d_emb = usize_of(v)?,
                "n_classes" => cfg.n_classes = usize_of(v)?,
                "bins" => cfg.bins = usize_of(v)?,
                "mel_bins" => cfg.mel_bins = usize_of(v)?,
                "frames" => cfg.frames = usize_of(v)?,
                "enc_channels" => cfg.enc_channels = list_of(v)?,
                "enc_hidden" => cfg.enc_hidden = usize_of(v)?,
                "dec_channels" => cfg.dec_channels = list_of(v)?,
                "dec_hidden" => cfg.dec_hidden = usize_of(v)?,
                "critic_hidden" => cfg.critic_hidden = usize_of(v)?,
                other => return Err(Error::Checkpoint(format!("unknown header key: {other}"))),
            }
        }

        let mut bundle = ModelBundle::new(cfg, 0)?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        let want = 8 * bundle.n_scalars();
        if data.len() != want {
            return Err(Error::Checkpoint(format!(
                "{}: parameter block is {} bytes, want {want}",
                path.display(),
                data.len()
            )));
        }
        let mut off = 0;
        for p in &mut bundle.params {
            for v in p.tensor.data_mut() {
                *v = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(bundle)
    }
}

fn push_critic(
    params: &mut Vec<Param>,
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    hidden: usize,
    prefix: &str,
) -> CriticLayout {
    let w = xavier(rng, vec![in_dim, hidden], in_dim, hidden);
    params.push(Param { name: format!("{prefix}.fc1.w"), component: Component::Critic, tensor: w });
    params.push(Param {
        name: format!("{prefix}.fc1.b"),
        component: Component::Critic,
        tensor: Tensor::zeros(vec![hidden]),
    });
    // Zero-initialized head: the DV estimate starts at exactly 0.
    params.push(Param {
        name: format!("{prefix}.out.w"),
        component: Component::Critic,
        tensor: Tensor::zeros(vec![hidden, 1]),
    });
    params.push(Param {
        name: format!("{prefix}.out.b"),
        component: Component::Critic,
        tensor: Tensor::zeros(vec![1]),
    });
    CriticLayout {
        w1: params.len() - 4,
        b1: params.len() - 3,
        w2: params.len() - 2,
        b2: params.len() - 1,
    }
}

/// Standalone critic parameters (used by the Gaussian MI benchmark, where
/// the critic sees 1-D samples rather than embeddings).
pub fn init_critic_params(pair_dim: usize, hidden: usize, seed: u64) -> Vec<Param> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    push_critic(&mut params, &mut rng, 2 * pair_dim, hidden, "critic");
    params
}

/// One computation graph over a bundle. Parameters register lazily on first
/// use: trainable components as differentiable params (keyed by their bundle
/// index), everything else as constants.
pub struct Forward<'t> {
    pub tape: &'t mut Tape,
    trainable: ComponentSet,
    ids: Vec<Option<ValueId>>,
}

impl<'t> Forward<'t> {
    pub fn new(tape: &'t mut Tape, bundle: &ModelBundle, trainable: ComponentSet) -> Self {
        Forward { tape, trainable, ids: vec![None; bundle.n_params()] }
    }

    /// Node for bundle parameter `i`, registering it on first use.
    pub fn p(&mut self, b: &ModelBundle, i: usize) -> ValueId {
        if let Some(id) = self.ids[i] {
            return id;
        }
        let param = b.param(i);
        let id = if self.trainable.contains(param.component) {
            self.tape.param(i, param.tensor.clone())
        } else {
            self.tape.leaf(param.tensor.clone())
        };
        self.ids[i] = Some(id);
        id
    }
}

/// Encoder forward for one segment: log-spectrogram [F, bins] -> [d_emb].
pub fn encode(
    f: &mut Forward,
    b: &ModelBundle,
    which: Component,
    spec: ValueId,
) -> Result<ValueId> {
    let layout = match which {
        Component::EncSpk => &b.layout().spk,
        Component::EncRes => &b.layout().res,
        _ => return Err(Error::InvalidArgument("encode expects an encoder component".into())),
    };
    let shape = f.tape.value(spec).shape().to_vec();
    if shape.len() != 2 || shape[1] != b.config.bins {
        return Err(Error::shape("encode", format!("{shape:?}, want [F, {}]", b.config.bins)));
    }
    let frames = shape[0];
    let mut x = f.tape.reshape(spec, &[1, frames, b.config.bins])?;
    let convs = layout.convs.clone();
    for (wi, bi) in convs {
        let w = f.p(b, wi);
        let bias = f.p(b, bi);
        let c = f.tape.conv2d(x, w, ENC_STRIDE, ENC_PAD)?;
        let cb = f.tape.channel_bias(c, bias)?;
        x = f.tape.relu(cb)?;
    }
    let rows = f.tape.channels_to_rows(x)?; // [F, C*bins']
    let (fw, fb) = layout.frame;
    let (ow, ob) = layout.out;
    let w = f.p(b, fw);
    let bias = f.p(b, fb);
    let h = f.tape.matmul(rows, w)?;
    let hb = f.tape.row_bias(h, bias)?;
    let hr = f.tape.relu(hb)?;
    let pooled = f.tape.mean_axis0(hr)?; // TAP
    let pr = f.tape.reshape(pooled, &[1, b.config.enc_hidden])?;
    let w = f.p(b, ow);
    let bias = f.p(b, ob);
    let e = f.tape.matmul(pr, w)?;
    let eb = f.tape.row_bias(e, bias)?;
    f.tape.reshape(eb, &[b.config.d_emb])
}

/// Decoder forward: (f_spk, f_res) -> reconstruction [frames, mel_bins].
pub fn decode(f: &mut Forward, b: &ModelBundle, f_spk: ValueId, f_res: ValueId) -> Result<ValueId> {
    let cfg = &b.config;
    let (c0, t0, mel0) = cfg.dec_seed();
    let cat = f.tape.concat_vec(f_spk, f_res)?;
    let x = f.tape.reshape(cat, &[1, 2 * cfg.d_emb])?;
    let dec = b.layout().dec.clone();
    let (w1, b1) = dec.fc1;
    let w = f.p(b, w1);
    let bias = f.p(b, b1);
    let h = f.tape.matmul(x, w)?;
    let hb = f.tape.row_bias(h, bias)?;
    let hr = f.tape.relu(hb)?;
    let (w2, b2) = dec.fc2;
    let w = f.p(b, w2);
    let bias = f.p(b, b2);
    let s = f.tape.matmul(hr, w)?;
    let sb = f.tape.row_bias(s, bias)?;
    let sr = f.tape.relu(sb)?;
    let mut vol = f.tape.reshape(sr, &[c0, t0, mel0])?;
    let n_up = dec.tconvs.len();
    for (i, (wi, bi)) in dec.tconvs.iter().enumerate() {
        let w = f.p(b, *wi);
        let bias = f.p(b, *bi);
        let t = f.tape.tconv2d(vol, w, DEC_STRIDE, DEC_PAD)?;
        let tb = f.tape.channel_bias(t, bias)?;
        // last layer stays linear: log-mel targets are signed
        vol = if i + 1 < n_up { f.tape.relu(tb)? } else { tb };
    }
    let up = 1usize << n_up;
    let full = f.tape.reshape(vol, &[t0 * up, cfg.mel_bins])?;
    f.tape.crop_rows(full, cfg.frames)
}

/// Classifier logits for a batch of embeddings [B, d_emb] -> [B, C].
/// With `freeze_w` the classifier is a constant inside this term (the
/// shared-parameter contract of the adversarial loss).
pub fn classify_rows(
    f: &mut Forward,
    b: &ModelBundle,
    emb_rows: ValueId,
    freeze_w: bool,
) -> Result<ValueId> {
    let (wi, bi) = (b.layout().cls_w, b.layout().cls_b);
    let mut w = f.p(b, wi);
    let mut bias = f.p(b, bi);
    if freeze_w {
        w = f.tape.stop_gradient(w);
        bias = f.tape.stop_gradient(bias);
    }
    let wt = f.tape.transpose(w)?; // [d, C]
    let logits = f.tape.matmul(emb_rows, wt)?;
    f.tape.row_bias(logits, bias)
}

/// Critic scores for a batch of concatenated pairs [B, 2*pair_dim] -> [B].
pub fn critic_apply(
    tape: &mut Tape,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
    pairs: ValueId,
) -> Result<ValueId> {
    let h = tape.matmul(pairs, w1)?;
    let hb = tape.row_bias(h, b1)?;
    let hr = tape.relu(hb)?;
    let o = tape.matmul(hr, w2)?;
    let ob = tape.row_bias(o, b2)?;
    let n = tape.value(ob).shape()[0];
    tape.reshape(ob, &[n])
}

/// Critic scores using the bundle's critic parameters.
pub fn critic_rows(f: &mut Forward, b: &ModelBundle, pairs: ValueId) -> Result<ValueId> {
    let c = b.layout().critic.clone();
    let w1 = f.p(b, c.w1);
    let b1 = f.p(b, c.b1);
    let w2 = f.p(b, c.w2);
    let b2 = f.p(b, c.b2);
    critic_apply(&mut f.tape, w1, b1, w2, b2, pairs)
}
