//! Full network assembly and checkpoint serialization.
//!
//! A model is a text encoder, the fusion encoder, and the boundary-enhanced
//! decoder, wired per [`ModelConfig`]: encoder fusion (efn) injects language
//! at backbone stages 3–5 with an optional co-attention variant; decoder
//! fusion (dfn) keeps the backbone language-free and fuses once at the
//! decoder's top input.
//!
//! Checkpoints are a flat named-tensor archive: magic, version, the flat
//! key=value config text, the vocabulary, then a manifest of every tensor
//! (name, shape) followed by all payloads as little-endian f64 in manifest
//! order.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coattn::{AttentionVariant, PpmSpec};
use crate::decoder::{decode, init_decoder_params, total_loss_terms, DecoderConfig, DecoderState, LossTerms};
use crate::encoder::{
    efn_forward, init_encoder_params, initial_fusion, EncoderConfig, EncoderOut, FusionMode,
};
use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Var};
use crate::text::{self, LinguisticContext, TextEncoderCfg, TokenSequence, Vocabulary};

pub const CKPT_MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub variant: Option<AttentionVariant>,
    pub bem: bool,
    pub encoder: EncoderConfig,
    pub text: TextEncoderCfg,
    pub ppm: PpmSpec,
}

impl ModelConfig {
    pub fn new(mode: FusionMode, variant: Option<AttentionVariant>, bem: bool, vocab_size: usize) -> Self {
        let encoder = EncoderConfig::default();
        let text = TextEncoderCfg {
            vocab_size,
            ..TextEncoderCfg::default()
        };
        Self {
            mode,
            variant,
            bem,
            encoder,
            text,
            ppm: PpmSpec::default(),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let mut in_channels = self.encoder.channels;
        if self.mode == FusionMode::Dfn {
            // the top stage is replaced by the fused multi-modal map
            in_channels[4] = self.encoder.c_mm;
        }
        DecoderConfig::new(in_channels)
    }

    /// Flat key=value form (structural dims are fixed by the artifact; the
    /// wiring choices and vocabulary size are what vary).
    pub fn to_kv(&self) -> String {
        format!(
            "mode={}\nvariant={}\nbem={}\nvocab_size={}\n",
            self.mode,
            self.variant.map_or("none".into(), |v| v.to_string()),
            if self.bem { "on" } else { "off" },
            self.text.vocab_size,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut mode = None;
        let mut variant = None;
        let mut bem = None;
        let mut vocab_size = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_arg("model_config", format!("bad line: {line}")))?;
            match k {
                "mode" => {
                    mode = Some(match v {
                        "efn" => FusionMode::Efn,
                        "dfn" => FusionMode::Dfn,
                        _ => return Err(invalid_arg("model_config", format!("bad mode {v}"))),
                    })
                }
                "variant" => {
                    variant = Some(match v {
                        "vcm" => Some(AttentionVariant::Vcm),
                        "acm" => Some(AttentionVariant::Acm),
                        "none" => None,
                        _ => return Err(invalid_arg("model_config", format!("bad variant {v}"))),
                    })
                }
                "bem" => {
                    bem = Some(match v {
                        "on" => true,
                        "off" => false,
                        _ => return Err(invalid_arg("model_config", format!("bad bem {v}"))),
                    })
                }
                "vocab_size" => {
                    vocab_size = Some(v.parse().map_err(|_| {
                        invalid_arg("model_config", format!("bad vocab_size {v}"))
                    })?)
                }
                _ => return Err(invalid_arg("model_config", format!("unknown key {k}"))),
            }
        }
        let missing = |k: &str| invalid_arg("model_config", format!("missing key {k}"));
        Ok(Self::new(
            mode.ok_or_else(|| missing("mode"))?,
            variant.ok_or_else(|| missing("variant"))?,
            bem.ok_or_else(|| missing("bem"))?,
            vocab_size.ok_or_else(|| missing("vocab_size"))?,
        ))
    }
}

pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut set = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    text::init_text_params(&cfg.text, "text", &mut set, &mut rng);
    init_encoder_params(&cfg.encoder, cfg.mode, cfg.variant, "enc", &mut set, &mut rng);
    if cfg.mode == FusionMode::Dfn {
        // initial fusion applied once, to the top backbone stage
        let cat_c = cfg.encoder.channels[4] + cfg.encoder.sent_dim + 8;
        set.insert(
            "dec.fuse.w",
            RawTensor::uniform_fan_in(&[cfg.encoder.c_mm, cat_c, 1, 1], cat_c, &mut rng),
        );
        set.insert("dec.fuse.b", RawTensor::zeros(&[cfg.encoder.c_mm]));
    }
    init_decoder_params(&cfg.decoder_config(), "dec", &mut set, &mut rng);
    set
}

pub struct ForwardOut<'t> {
    pub ling: LinguisticContext<'t>,
    pub encoder: EncoderOut<'t>,
    pub state: DecoderState<'t>,
}

/// One full forward pass over a single image/expression pair.
pub fn forward<'t>(
    binder: &Binder<'t, '_>,
    cfg: &ModelConfig,
    image: &RawTensor,
    tokens: &TokenSequence,
    retain_artifacts: bool,
) -> Result<ForwardOut<'t>> {
    let ling = text::encode(binder, &cfg.text, tokens, "text")?;
    let img = binder.tape.leaf(&image.shape, image.data.clone())?;
    let enc = efn_forward(
        img,
        &ling,
        binder,
        &cfg.encoder,
        cfg.mode,
        cfg.variant,
        &cfg.ppm,
        "enc",
        retain_artifacts,
    )?;
    let mut stages = enc.stages.clone();
    if cfg.mode == FusionMode::Dfn {
        stages[4] = initial_fusion(
            stages[4],
            ling.h_sent,
            binder.get("dec.fuse.w")?,
            binder.get("dec.fuse.b")?,
        )?;
    }
    let state = decode(
        &stages,
        binder,
        &cfg.decoder_config(),
        cfg.bem,
        (image.shape[1], image.shape[2]),
        "dec",
    )?;
    Ok(ForwardOut {
        ling,
        encoder: enc,
        state,
    })
}

/// Forward plus supervision against a ground-truth mask and boundary.
pub fn forward_loss<'t>(
    binder: &Binder<'t, '_>,
    cfg: &ModelConfig,
    image: &RawTensor,
    tokens: &TokenSequence,
    gt_mask: &RawTensor,
    gt_boundary: &RawTensor,
) -> Result<(Var<'t>, LossTerms, ForwardOut<'t>)> {
    let out = forward(binder, cfg, image, tokens, false)?;
    let (loss, terms) = total_loss_terms(&out.state, binder, gt_mask, gt_boundary, "dec")?;
    Ok((loss, terms, out))
}

// ── checkpoint archive ────────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    params: &ParamSet,
) -> io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_str(&mut buf, &cfg.to_kv());
    put_str(&mut buf, &vocab.to_lines());
    put_u32(&mut buf, params.len() as u32);
    for (name, t) in params.iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in params.iter() {
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "truncated checkpoint",
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> io::Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-utf8 string"))
    }
}

pub fn load_checkpoint(path: &Path) -> io::Result<(ModelConfig, Vocabulary, ParamSet)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let cfg_text = r.str()?;
    let cfg = ModelConfig::from_kv(&cfg_text)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    let vocab = Vocabulary::from_lines(&r.str()?);
    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        manifest.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, RawTensor::from_vec(&shape, data));
    }
    if r.pos != bytes.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "trailing bytes in checkpoint",
        ));
    }
    Ok((cfg, vocab, params))
}

/// Convenience used by eval/infer: sigmoid map of the final prediction.
pub fn predict_probs(
    cfg: &ModelConfig,
    params: &ParamSet,
    image: &RawTensor,
    tokens: &TokenSequence,
) -> Result<RawTensor> {
    let tape = crate::tensor::Tape::new();
    let binder = Binder::new(&tape, params, false);
    let out = forward(&binder, cfg, image, tokens, false)?;
    let s = out.state.prediction.shape();
    Ok(RawTensor::from_vec(
        &[s[1], s[2]],
        out.state.prediction.data(),
    ))
}
