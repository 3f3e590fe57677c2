//! Expression tokenization and the bidirectional GRU language encoder.

use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token table with reserved PAD=0 and UNK=1 ids. Non-reserved ids follow
/// first-seen order during dataset construction.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            token_to_id: HashMap::new(),
            id_to_token: vec!["<pad>".into(), "<unk>".into()],
        }
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 2
    }

    /// Line-delimited serialization; line number = id − 2.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token[2..] {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Self {
        let mut v = Self::new();
        for line in text.lines() {
            let t = line.trim();
            if !t.is_empty() {
                v.add(t);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercase, whitespace-split, map unknown words to UNK, truncate at
/// `max_len` tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let ids: Vec<usize> = text
        .split_whitespace()
        .take(max_len)
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID))
        .collect();
    if ids.is_empty() {
        return Err(invalid_arg("tokenize", "empty expression"));
    }
    Ok(TokenSequence { ids })
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoderCfg {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// hidden size per direction; h_t and h_sent have twice this width
    pub hidden: usize,
    pub max_len: usize,
}

impl Default for TextEncoderCfg {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            hidden: 64,
            max_len: 20,
        }
    }
}

/// Bound GRU cell parameters for one direction.
pub struct GruCellVars<'t> {
    pub wz: Var<'t>,
    pub uz: Var<'t>,
    pub bz: Var<'t>,
    pub wr: Var<'t>,
    pub ur: Var<'t>,
    pub br: Var<'t>,
    pub wh: Var<'t>,
    pub uh: Var<'t>,
    pub bh: Var<'t>,
}

/// One GRU step:
/// z = σ(W_z x + U_z h + b_z); r = σ(W_r x + U_r h + b_r);
/// h̃ = tanh(W_h x + U_h (r∘h) + b_h); h' = (1−z)∘h + z∘h̃.
pub fn gru_cell<'t>(x: Var<'t>, h_prev: Var<'t>, p: &GruCellVars<'t>) -> Result<Var<'t>> {
    let z = p.wz.matmul(x)?.add(p.uz.matmul(h_prev)?)?.add(p.bz)?.sigmoid()?;
    let r = p.wr.matmul(x)?.add(p.ur.matmul(h_prev)?)?.add(p.br)?.sigmoid()?;
    let hh = p
        .wh
        .matmul(x)?
        .add(p.uh.matmul(r.mul(h_prev)?)?)?
        .add(p.bh)?
        .tanh()?;
    z.affine(-1.0, 1.0)?.mul(h_prev)?.add(z.mul(hh)?)
}

pub struct LinguisticContext<'t> {
    /// [T, C_e] word embeddings e_t
    pub e_words: Var<'t>,
    /// [T, 2H] Bi-GRU outputs h_t (forward ‖ backward)
    pub h_words: Var<'t>,
    /// [2H, 1] sentence vector: concat(last forward state, last backward state)
    pub h_sent: Var<'t>,
}

pub fn init_text_params(cfg: &TextEncoderCfg, prefix: &str, set: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let (d, h) = (cfg.embed_dim, cfg.hidden);
    set.insert(
        format!("{prefix}.embed"),
        RawTensor::uniform_fan_in(&[cfg.vocab_size, d], d, rng),
    );
    for dir in ["fwd", "bwd"] {
        for gate in ["z", "r", "h"] {
            set.insert(
                format!("{prefix}.{dir}.w{gate}"),
                RawTensor::uniform_fan_in(&[h, d], d, rng),
            );
            set.insert(
                format!("{prefix}.{dir}.u{gate}"),
                RawTensor::uniform_fan_in(&[h, h], h, rng),
            );
            set.insert(format!("{prefix}.{dir}.b{gate}"), RawTensor::zeros(&[h, 1]));
        }
    }
}

fn bind_cell<'t>(binder: &Binder<'t, '_>, prefix: &str, dir: &str) -> Result<GruCellVars<'t>> {
    Ok(GruCellVars {
        wz: binder.get(&format!("{prefix}.{dir}.wz"))?,
        uz: binder.get(&format!("{prefix}.{dir}.uz"))?,
        bz: binder.get(&format!("{prefix}.{dir}.bz"))?,
        wr: binder.get(&format!("{prefix}.{dir}.wr"))?,
        ur: binder.get(&format!("{prefix}.{dir}.ur"))?,
        br: binder.get(&format!("{prefix}.{dir}.br"))?,
        wh: binder.get(&format!("{prefix}.{dir}.wh"))?,
        uh: binder.get(&format!("{prefix}.{dir}.uh"))?,
        bh: binder.get(&format!("{prefix}.{dir}.bh"))?,
    })
}

/// Run the Bi-GRU over `seq`. PAD ids never enter the recurrence: only the
/// first `seq.len()` real tokens are embedded and stepped over.
pub fn encode<'t>(
    binder: &Binder<'t, '_>,
    cfg: &TextEncoderCfg,
    seq: &TokenSequence,
    prefix: &str,
) -> Result<LinguisticContext<'t>> {
    if seq.is_empty() {
        return Err(invalid_arg("encode", "empty token sequence"));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(invalid_arg(
            "encode",
            format!("token id {bad} out of range {}", cfg.vocab_size),
        ));
    }
    let t_len = seq.len();
    let (d, h) = (cfg.embed_dim, cfg.hidden);
    let embed = binder.get(&format!("{prefix}.embed"))?;
    let e_words = embed.gather_rows(&seq.ids)?; // [T, d]

    let step_states = |cell: &GruCellVars<'t>, order: &[usize]| -> Result<Vec<Var<'t>>> {
        let mut state = binder.tape.leaf(&[h, 1], vec![0.0; h])?;
        let mut per_token = vec![None; t_len];
        for &t in order {
            let x = e_words.slice_rows(t, 1)?.reshape(&[d, 1])?;
            state = gru_cell(x, state, cell)?;
            per_token[t] = Some(state);
        }
        Ok(per_token.into_iter().map(|s| s.unwrap()).collect())
    };

    let fwd_cell = bind_cell(binder, prefix, "fwd")?;
    let bwd_cell = bind_cell(binder, prefix, "bwd")?;
    let fwd_order: Vec<usize> = (0..t_len).collect();
    let bwd_order: Vec<usize> = (0..t_len).rev().collect();
    let fwd = step_states(&fwd_cell, &fwd_order)?;
    let bwd = step_states(&bwd_cell, &bwd_order)?;

    let rows: Vec<Var<'t>> = (0..t_len)
        .map(|t| Var::concat(0, &[fwd[t], bwd[t]])?.reshape(&[1, 2 * h]))
        .collect::<Result<_>>()?;
    let h_words = Var::concat(0, &rows)?;
    let h_sent = Var::concat(0, &[fwd[t_len - 1], bwd[0]])?;
    Ok(LinguisticContext {
        e_words,
        h_words,
        h_sent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, InputKind};
    use crate::tensor::Tape;
    use rand_chacha::rand_core::SeedableRng;

    fn toy_vocab() -> Vocabulary {
        let mut v = Vocabulary::new();
        for t in ["red", "circle", "blue", "square"] {
            v.add(t);
        }
        v
    }

    #[test]
    fn tokenize_basics() {
        let v = toy_vocab();
        let seq = tokenize("red circle", &v, 20).unwrap();
        assert_eq!(seq.ids, vec![v.id("red").unwrap(), v.id("circle").unwrap()]);
        assert_eq!(tokenize("RED circle", &v, 20).unwrap(), seq);
        let unk = tokenize("xyzzy circle", &v, 20).unwrap();
        assert_eq!(unk.ids, vec![UNK_ID, v.id("circle").unwrap()]);
        assert!(tokenize("   ", &v, 20).is_err());
    }

    #[test]
    fn vocab_line_round_trip() {
        let v = toy_vocab();
        let v2 = Vocabulary::from_lines(&v.to_lines());
        assert_eq!(v.len(), v2.len());
        assert_eq!(v2.id("red"), v.id("red"));
        assert_eq!(v2.token(2), Some("red"));
    }

    #[test]
    fn gru_cell_zero_params_halves_state() {
        let tape = Tape::new();
        let (d, h) = (3, 4);
        let zeros2 = |r, c| tape.leaf(&[r, c], vec![0.0; r * c]).unwrap();
        let p = GruCellVars {
            wz: zeros2(h, d),
            uz: zeros2(h, h),
            bz: zeros2(h, 1),
            wr: zeros2(h, d),
            ur: zeros2(h, h),
            br: zeros2(h, 1),
            wh: zeros2(h, d),
            uh: zeros2(h, h),
            bh: zeros2(h, 1),
        };
        let x = tape.leaf(&[d, 1], vec![0.7, -0.2, 0.1]).unwrap();
        let hv = vec![1.0, -2.0, 0.5, 4.0];
        let h_prev = tape.leaf(&[h, 1], hv.clone()).unwrap();
        let out = gru_cell(x, h_prev, &p).unwrap().data();
        for (o, v) in out.iter().zip(&hv) {
            assert!((o - 0.5 * v).abs() < 1e-15);
        }
        // zero input, zero state, zero params -> zero output
        let x0 = zeros2(d, 1);
        let h0 = zeros2(h, 1);
        assert_eq!(gru_cell(x0, h0, &p).unwrap().data(), vec![0.0; h]);
    }

    #[test]
    fn gru_cell_gradcheck() {
        let (d, h) = (3, 4);
        let shapes: Vec<Vec<usize>> = vec![
            vec![d, 1],
            vec![h, 1],
            vec![h, d],
            vec![h, h],
            vec![h, 1],
            vec![h, d],
            vec![h, h],
            vec![h, 1],
            vec![h, d],
            vec![h, h],
            vec![h, 1],
        ];
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let err = max_rel_err(&refs, InputKind::Uniform, 42, |_, v| {
            let p = GruCellVars {
                wz: v[2],
                uz: v[3],
                bz: v[4],
                wr: v[5],
                ur: v[6],
                br: v[7],
                wh: v[8],
                uh: v[9],
                bh: v[10],
            };
            gru_cell(v[0], v[1], &p)?.sum()
        })
        .unwrap();
        assert!(err <= 1e-4, "gru_cell gradcheck err = {err}");
    }

    fn small_cfg(vocab_size: usize) -> TextEncoderCfg {
        TextEncoderCfg {
            vocab_size,
            embed_dim: 4,
            hidden: 3,
            max_len: 20,
        }
    }

    fn init_set(cfg: &TextEncoderCfg, seed: u64) -> ParamSet {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_text_params(cfg, "text", &mut set, &mut rng);
        set
    }

    #[test]
    fn encode_single_token_matches_manual_steps() {
        let cfg = small_cfg(6);
        let set = init_set(&cfg, 3);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &set, false);
        let seq = TokenSequence { ids: vec![4] };
        let ctx = encode(&binder, &cfg, &seq, "text").unwrap();
        assert_eq!(ctx.h_words.shape(), vec![1, 6]);
        assert_eq!(ctx.h_sent.shape(), vec![6, 1]);
        // T=1: h_words row equals h_sent
        assert_eq!(ctx.h_words.data(), ctx.h_sent.data());
    }

    #[test]
    fn h_sent_selects_h_words_endpoints() {
        let cfg = small_cfg(8);
        let set = init_set(&cfg, 9);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &set, false);
        let seq = TokenSequence { ids: vec![2, 5, 3] };
        let ctx = encode(&binder, &cfg, &seq, "text").unwrap();
        let h = cfg.hidden;
        let hw = ctx.h_words.data();
        let hs = ctx.h_sent.data();
        // forward half of the last row
        assert_eq!(&hs[..h], &hw[2 * 2 * h..2 * 2 * h + h]);
        // backward half of the first row
        assert_eq!(&hs[h..], &hw[h..2 * h]);
    }

    #[test]
    fn reversed_sequence_swaps_direction_roles() {
        let cfg = small_cfg(8);
        let set = init_set(&cfg, 11);
        // share parameters between directions by swapping: build a second set
        // with fwd/bwd exchanged
        let mut swapped = ParamSet::new();
        for (name, t) in set.iter() {
            let sname = if name.contains(".fwd.") {
                name.replace(".fwd.", ".bwd.")
            } else if name.contains(".bwd.") {
                name.replace(".bwd.", ".fwd.")
            } else {
                name.to_string()
            };
            swapped.insert(sname, t.clone());
        }
        let seq = TokenSequence { ids: vec![2, 5, 3] };
        let rev = TokenSequence { ids: vec![3, 5, 2] };
        let tape1 = Tape::new();
        let b1 = Binder::new(&tape1, &set, false);
        let ctx = encode(&b1, &cfg, &seq, "text").unwrap();
        let tape2 = Tape::new();
        let b2 = Binder::new(&tape2, &swapped, false);
        let ctx_rev = encode(&b2, &cfg, &rev, "text").unwrap();
        let h = cfg.hidden;
        let a = ctx.h_words.data();
        let b = ctx_rev.h_words.data();
        let t_len = 3;
        for t in 0..t_len {
            let rt = t_len - 1 - t;
            // forward half at t == backward half at reversed position
            assert_eq!(&a[t * 2 * h..t * 2 * h + h], &b[rt * 2 * h + h..rt * 2 * h + 2 * h]);
            assert_eq!(&a[t * 2 * h + h..t * 2 * h + 2 * h], &b[rt * 2 * h..rt * 2 * h + h]);
        }
    }

    #[test]
    fn encode_gradcheck() {
        // gradcheck through encode w.r.t. embedding + one gate matrix
        let cfg = small_cfg(6);
        let set = init_set(&cfg, 5);
        let seq = TokenSequence { ids: vec![2, 4, 3] };
        let err = max_rel_err(
            &[&[6, 4], &[3, 4]],
            InputKind::Uniform,
            13,
            |tape, v| {
                let mut probe = set.clone();
                probe.get_mut("text.embed").unwrap().data = v[0].data();
                probe.get_mut("text.fwd.wh").unwrap().data = v[1].data();
                // bind probe values through leaves so gradients flow from v
                let binder = Binder::new(tape, &probe, false);
                let embed = v[0];
                let e_words = embed.gather_rows(&seq.ids)?;
                let fwd = bind_cell(&binder, "text", "fwd")?;
                let fwd = GruCellVars { wh: v[1], ..fwd };
                let bwd = bind_cell(&binder, "text", "bwd")?;
                let mut state = tape.leaf(&[3, 1], vec![0.0; 3])?;
                for t in 0..3 {
                    let x = e_words.slice_rows(t, 1)?.reshape(&[4, 1])?;
                    state = gru_cell(x, state, &fwd)?;
                }
                let mut bstate = tape.leaf(&[3, 1], vec![0.0; 3])?;
                for t in (0..3).rev() {
                    let x = e_words.slice_rows(t, 1)?.reshape(&[4, 1])?;
                    bstate = gru_cell(x, bstate, &bwd)?;
                }
                Var::concat(0, &[state, bstate])?.sum()
            },
        )
        .unwrap();
        assert!(err <= 1e-4, "encode gradcheck err = {err}");
    }

    #[test]
    fn encode_rejects_out_of_range_ids() {
        let cfg = small_cfg(4);
        let set = init_set(&cfg, 2);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &set, false);
        let seq = TokenSequence { ids: vec![9] };
        assert!(encode(&binder, &cfg, &seq, "text").is_err());
    }
}
