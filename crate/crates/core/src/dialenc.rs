//! Utterance embeddings and the recurrent dialogue-context encoder.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nd::{GruParams, NdError, ParamId, ParamStore, Tape, Tensor, Var};

const MAGIC: &[u8; 8] = b"NGEMB\x00\x01\x00";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error("no external embedding for dialogue {dialogue} turn {turn}")]
    Missing { dialogue: u64, turn: u32 },
    #[error("embedding for dialogue {dialogue} turn {turn} has dim {got}, table dim is {want}")]
    Dim { dialogue: u64, turn: u32, got: usize, want: usize },
}

/// Precomputed utterance vectors keyed by `(dialogue id, turn index)`.
///
/// Binary layout, little endian: 8-byte magic, `u32` dim, `u64` entry count,
/// then per entry `u64` dialogue id, `u32` turn, `dim` x `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<(u64, u32), Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, dialogue: u64, turn: u32, v: Vec<f64>) -> Result<(), EmbeddingError> {
        if v.len() != self.dim {
            return Err(EmbeddingError::Dim { dialogue, turn, got: v.len(), want: self.dim });
        }
        self.entries.insert((dialogue, turn), v);
        Ok(())
    }

    pub fn get(&self, dialogue: u64, turn: u32) -> Result<&[f64], EmbeddingError> {
        self.entries.get(&(dialogue, turn)).map(Vec::as_slice).ok_or(EmbeddingError::Missing { dialogue, turn })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), EmbeddingError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (&(d, t), v) in &self.entries {
            w.write_all(&d.to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EmbeddingError::Format("magic mismatch".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut table = Self::new(dim);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let d = u64::from_le_bytes(b8);
            r.read_exact(&mut b4)?;
            let t = u32::from_le_bytes(b4);
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b8)?;
                v.push(f64::from_le_bytes(b8));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::Format(format!("non-finite value for dialogue {d} turn {t}")));
            }
            table.entries.insert((d, t), v);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(EmbeddingError::Format("trailing bytes".into()));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Trainable utterance encoder: mean of word embeddings, then one linear layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceEncoderParams {
    pub vocab: usize,
    pub word_dim: usize,
    pub dim: usize,
    embed: ParamId,
    w: ParamId,
    b: ParamId,
}

impl UtteranceEncoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        word_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            vocab,
            word_dim,
            dim,
            embed: store.uniform(format!("{prefix}.embed"), vocab, word_dim, 1.0 / (word_dim as f64).sqrt(), rng),
            w: store.glorot(format!("{prefix}.w"), word_dim, dim, rng),
            b: store.zeros(format!("{prefix}.b"), 1, dim),
        }
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    pub fn linear(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }

    /// `token_ids` must be non-empty; callers substitute a pad token for empty turns.
    pub fn encode(&self, tape: &mut Tape, token_ids: &[usize]) -> Result<Var, NdError> {
        if token_ids.is_empty() {
            return Err(NdError::Contract("utterance with no tokens".into()));
        }
        let table = tape.param(self.embed);
        let rows = tape.gather_rows(table, token_ids)?;
        let mean = tape.mean_rows(rows)?;
        tape.linear(mean, self.w, self.b)
    }
}

/// Where utterance vectors come from.
pub enum UtteranceSource<'a> {
    Trainable(&'a UtteranceEncoderParams),
    /// Looked up from a fixed table; no gradient reaches the table.
    External(&'a EmbeddingTable),
}

impl UtteranceSource<'_> {
    pub fn encode(&self, tape: &mut Tape, token_ids: &[usize], key: (u64, u32)) -> Result<Var, EncodeError> {
        match self {
            Self::Trainable(p) => Ok(p.encode(tape, token_ids)?),
            Self::External(table) => {
                let v = table.get(key.0, key.1)?.to_vec();
                Ok(tape.constant(Tensor::row_vector(v))?)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// GRU over utterance embeddings in turn order, from a zero initial state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextEncoderParams {
    pub gru: GruParams,
}

impl ContextEncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self { gru: GruParams::new(store, prefix, input, hidden, rng) }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    pub fn initial(&self, tape: &mut Tape) -> Result<Var, NdError> {
        tape.constant(Tensor::zeros(1, self.gru.hidden))
    }

    pub fn step(&self, tape: &mut Tape, e: Var, h: Var) -> Result<Var, NdError> {
        self.gru.cell(tape, e, h)
    }

    /// All hidden states `h_1..h_t`.
    pub fn encode(&self, tape: &mut Tape, embeddings: &[Var]) -> Result<Vec<Var>, NdError> {
        if embeddings.is_empty() {
            return Err(NdError::Contract("context over an empty utterance sequence".into()));
        }
        let mut h = self.initial(tape)?;
        let mut out = Vec::with_capacity(embeddings.len());
        for &e in embeddings {
            h = self.step(tape, e, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Context state carried between turns outside a tape, for incremental use.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextState {
    pub h: Tensor,
    pub turns: usize,
}

impl ContextState {
    pub fn zero(hidden: usize) -> Self {
        Self { h: Tensor::zeros(1, hidden), turns: 0 }
    }

    pub fn advance(&self, params: &ParamStore, enc: &ContextEncoderParams, e: &Tensor) -> Result<Self, NdError> {
        let mut tape = Tape::new(params);
        let ev = tape.constant(e.clone())?;
        let hv = tape.constant(self.h.clone())?;
        let out = enc.step(&mut tape, ev, hv)?;
        Ok(Self { h: tape.value(out).clone(), turns: self.turns + 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::grad_check;
    use crate::nd::rng::{stream, Stream};

    #[test]
    fn single_token_is_linear_of_embedding() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, Stream::Init, 0);
        let p = UtteranceEncoderParams::new(&mut store, "u", 10, 4, 3, &mut rng);
        let mut tape = Tape::new(&store);
        let v = p.encode(&mut tape, &[7]).unwrap();
        let row = Tensor::row_vector(store.get(p.embedding()).row(7).to_vec());
        let want = row.matmul(store.get(p.w)).unwrap();
        assert_eq!(tape.value(v).data(), want.data());
    }

    #[test]
    fn duplicated_sequence_has_same_mean() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, Stream::Init, 0);
        let p = UtteranceEncoderParams::new(&mut store, "u", 10, 4, 3, &mut rng);
        let mut tape = Tape::new(&store);
        let a = p.encode(&mut tape, &[1, 5, 2]).unwrap();
        let b = p.encode(&mut tape, &[1, 5, 2, 1, 5, 2]).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_file_round_trips_bit_exactly() {
        let mut rng = stream(3, Stream::Sampling, 0);
        let mut table = EmbeddingTable::new(5);
        for d in 0..4u64 {
            for t in 0..3u32 {
                table.insert(d, t, (0..5).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect()).unwrap();
            }
        }
        let mut buf = Vec::new();
        table.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 12 * (8 + 4 + 40));
        let back = EmbeddingTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        for d in 0..4u64 {
            for t in 0..3u32 {
                let a: Vec<u64> = table.get(d, t).unwrap().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = back.get(d, t).unwrap().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
        }
        assert!(matches!(back.get(9, 0), Err(EmbeddingError::Missing { .. })));
        buf.push(0);
        assert!(EmbeddingTable::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn external_source_has_no_parameter_gradient() {
        let mut store = ParamStore::new();
        let mut rng = stream(4, Stream::Init, 0);
        let ctx = ContextEncoderParams::new(&mut store, "c", 2, 3, &mut rng);
        let mut table = EmbeddingTable::new(2);
        table.insert(0, 0, vec![0.5, -1.0]).unwrap();
        let src = UtteranceSource::External(&table);
        let mut tape = Tape::new(&store);
        let e = src.encode(&mut tape, &[], (0, 0)).unwrap();
        assert_eq!(tape.value(e).data(), &[0.5, -1.0]);
        assert!(src.encode(&mut tape, &[], (0, 1)).is_err());
        let hs = ctx.encode(&mut tape, &[e]).unwrap();
        let s = tape.sum(hs[0]).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(ctx.gru.ids()[0]).is_some());
    }

    fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = stream(seed, Stream::Sampling, 1);
        (0..n).map(|_| Tensor::row_vector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())).collect()
    }

    #[test]
    fn incremental_matches_batch() {
        let mut store = ParamStore::new();
        let mut rng = stream(5, Stream::Init, 0);
        let ctx = ContextEncoderParams::new(&mut store, "c", 4, 6, &mut rng);
        let es = random_embeddings(7, 4, 5);
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = es.iter().map(|e| tape.constant(e.clone()).unwrap()).collect();
        let batch = ctx.encode(&mut tape, &vars).unwrap();
        let mut state = ContextState::zero(6);
        for (t, e) in es.iter().enumerate() {
            state = state.advance(&store, &ctx, e).unwrap();
            for (x, y) in state.h.data().iter().zip(tape.value(batch[t]).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(state.turns, 7);
    }

    #[test]
    fn one_turn_is_one_cell_step() {
        let mut store = ParamStore::new();
        let mut rng = stream(6, Stream::Init, 0);
        let ctx = ContextEncoderParams::new(&mut store, "c", 3, 3, &mut rng);
        let e = random_embeddings(1, 3, 6).remove(0);
        let mut tape = Tape::new(&store);
        let ev = tape.constant(e).unwrap();
        let h0 = tape.constant(Tensor::zeros(1, 3)).unwrap();
        let direct = ctx.gru.cell(&mut tape, ev, h0).unwrap();
        let via = ctx.encode(&mut tape, &[ev]).unwrap()[0];
        assert_eq!(tape.value(direct), tape.value(via));
    }

    #[test]
    fn empty_sequence_is_error() {
        let mut store = ParamStore::new();
        let mut rng = stream(7, Stream::Init, 0);
        let ctx = ContextEncoderParams::new(&mut store, "c", 3, 3, &mut rng);
        let mut tape = Tape::new(&store);
        assert!(ctx.encode(&mut tape, &[]).is_err());
    }

    #[test]
    fn zeroed_gru_keeps_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = stream(8, Stream::Init, 0);
        let ctx = ContextEncoderParams::new(&mut store, "c", 3, 4, &mut rng);
        for id in ctx.gru.ids() {
            store.get_mut(id).scale_in_place(0.0);
        }
        let mut state = ContextState::zero(4);
        for e in random_embeddings(5, 3, 8) {
            state = state.advance(&store, &ctx, &e).unwrap();
            assert!(state.h.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn context_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = stream(9, Stream::Init, 0);
        let utt = UtteranceEncoderParams::new(&mut store, "u", 8, 3, 4, &mut rng);
        let ctx = ContextEncoderParams::new(&mut store, "c", 4, 3, &mut rng);
        let turns = [vec![1, 2], vec![3], vec![4, 4, 7]];
        let report = grad_check(&mut store, 1e-5, |tape| {
            let es = turns.iter().map(|t| utt.encode(tape, t)).collect::<Result<Vec<_>, _>>()?;
            let hs = ctx.encode(tape, &es)?;
            let sq = tape.mul(hs[2], hs[2])?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
