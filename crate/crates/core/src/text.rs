//! Per-entity text representations.
//!
//! An encoder maps an entity description to a raw vector (width `raw_dim`);
//! an affine map followed by ReLU reduces it to the model width `d`.
//! Entities without a description share one trainable fallback row.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, EntityTexts, Symbols};
use crate::linalg::{dot, relu, Matrix};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a whose offset basis is XOR-ed with `seed` (seed 0 is plain FNV-1a).
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    HashedNgram,
    PrecomputedFile,
}

/// Serializable encoder settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderSpec {
    pub variant: EncoderKind,
    pub raw_dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,
    pub file_path: Option<PathBuf>,
}

impl Default for TextEncoderSpec {
    fn default() -> Self {
        TextEncoderSpec {
            variant: EncoderKind::HashedNgram,
            raw_dim: 4096,
            ngram_min: 1,
            ngram_max: 3,
            hash_seed: 0,
            file_path: None,
        }
    }
}

impl TextEncoderSpec {
    pub fn validate(&self, reduced_dim: usize) -> Result<()> {
        if self.raw_dim < reduced_dim {
            return Err(Error::Config(format!(
                "raw_dim {} is smaller than the reduced dimension {reduced_dim}",
                self.raw_dim
            )));
        }
        if self.variant == EncoderKind::HashedNgram && (self.ngram_min == 0 || self.ngram_min > self.ngram_max) {
            return Err(Error::Config(format!(
                "invalid n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.variant == EncoderKind::PrecomputedFile && self.file_path.is_none() {
            return Err(Error::Config("precomputed encoder needs a file_path".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<TextEncoder> {
        match self.variant {
            EncoderKind::HashedNgram => Ok(TextEncoder::Hashed(HashedNgramEncoder {
                raw_dim: self.raw_dim,
                ngram_min: self.ngram_min,
                ngram_max: self.ngram_max,
                seed: self.hash_seed,
            })),
            EncoderKind::PrecomputedFile => {
                let path = self
                    .file_path
                    .as_deref()
                    .ok_or_else(|| Error::Config("precomputed encoder needs a file_path".into()))?;
                Ok(TextEncoder::Precomputed(PrecomputedEncoder::load(path, self.raw_dim)?))
            }
        }
    }
}

/// Character n-gram counts hashed into `raw_dim` buckets, then L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct HashedNgramEncoder {
    pub raw_dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub seed: u64,
}

impl HashedNgramEncoder {
    pub fn bucket(&self, gram: &str) -> usize {
        (fnv1a(self.seed, gram.as_bytes()) % self.raw_dim as u64) as usize
    }

    /// Unnormalized bucket counts; their sum is the number of n-grams.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.raw_dim];
        let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
        let n_chars = bounds.len() - 1;
        for n in self.ngram_min..=self.ngram_max {
            if n > n_chars {
                break;
            }
            for start in 0..=n_chars - n {
                out[self.bucket(&text[bounds[start]..bounds[start + n]])] += 1.0;
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = self.counts(text);
        let norm = dot(&v, &v).sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

/// Vectors produced offline (e.g. transformer [CLS] outputs), keyed by entity name.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEncoder {
    pub raw_dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedEncoder {
    /// Reads TSV rows `id\tv1\t...\tv_raw_dim`.
    pub fn load(path: &Path, raw_dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_owned();
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("bad value `{f}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != raw_dim {
                return Err(parse_err(format!("expected {raw_dim} values, found {}", values.len())));
            }
            if vectors.insert(id.clone(), values).is_some() {
                return Err(parse_err(format!("duplicate id `{id}`")));
            }
        }
        Ok(PrecomputedEncoder { raw_dim, vectors })
    }

    pub fn from_map(raw_dim: usize, vectors: HashMap<String, Vec<f64>>) -> Self {
        PrecomputedEncoder { raw_dim, vectors }
    }

    pub fn lookup(&self, entity: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(entity)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no precomputed text vector for entity `{entity}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextEncoder {
    Hashed(HashedNgramEncoder),
    Precomputed(PrecomputedEncoder),
}

impl TextEncoder {
    pub fn raw_dim(&self) -> usize {
        match self {
            TextEncoder::Hashed(h) => h.raw_dim,
            TextEncoder::Precomputed(p) => p.raw_dim,
        }
    }

    /// Raw vector for one entity; the hashed variant reads `text`, the
    /// precomputed variant looks up `entity`.
    pub fn encode(&self, entity: &str, text: &str) -> Result<Vec<f64>> {
        match self {
            TextEncoder::Hashed(h) => Ok(h.encode(text)),
            TextEncoder::Precomputed(p) => p.lookup(entity),
        }
    }
}

/// One affine reduction `W` (d x raw_dim), `b` (1 x d).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w: Matrix,
    pub b: Matrix,
}

impl MlpParams {
    pub fn zeros(d: usize, raw_dim: usize) -> Self {
        MlpParams {
            w: Matrix::zeros(d, raw_dim),
            b: Matrix::zeros(1, d),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(d: usize, raw_dim: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w: xavier_uniform(d, raw_dim, rng),
            b: Matrix::zeros(1, d),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }
}

/// `ReLU(W m + b)`.
pub fn mlp_reduce(params: &MlpParams, m: &[f64]) -> Result<Vec<f64>> {
    if m.len() != params.in_dim() || params.b.cols() != params.out_dim() {
        return Err(Error::dim(format!(
            "mlp expects input {} / bias {}, got input {} / bias {}",
            params.in_dim(),
            params.out_dim(),
            m.len(),
            params.b.cols()
        )));
    }
    Ok(params
        .w
        .iter_rows()
        .zip(params.b.data())
        .map(|(row, b)| relu(dot(row, m) + b))
        .collect())
}

/// Trainable text-side parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TextParams {
    pub head: MlpParams,
    /// Separate reduction for tail positions; `None` shares `head`.
    pub tail: Option<MlpParams>,
    /// Shared row (1 x d) for entities without a description.
    pub fallback: Matrix,
}

impl TextParams {
    pub fn dim(&self) -> usize {
        self.head.out_dim()
    }
}

/// Raw encodings of the text-bearing entities.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTexts {
    /// One row per text-bearing entity, in entity order.
    pub rows: Matrix,
    /// `slot[e]` is the row of entity `e`, or `None` without text.
    pub slot: Vec<Option<usize>>,
}

impl RawTexts {
    pub fn encode(encoder: &TextEncoder, symbols: &Symbols, texts: &EntityTexts, num_entities: usize) -> Result<Self> {
        let mut slot = vec![None; num_entities];
        let mut data = Vec::new();
        let mut n = 0;
        for (id, text) in texts {
            if id.index() >= num_entities {
                continue;
            }
            let v = encoder.encode(symbols.entity_name(*id), text)?;
            data.extend_from_slice(&v);
            slot[id.index()] = Some(n);
            n += 1;
        }
        Ok(RawTexts {
            rows: Matrix::from_vec(n, encoder.raw_dim(), data)?,
            slot,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.slot.len()
    }

    pub fn raw(&self, e: EntityId) -> Option<&[f64]> {
        self.slot[e.index()].map(|s| self.rows.row(s))
    }
}

/// Entity feature table: reduced text for described entities, the fallback
/// row elsewhere. With separate head/tail reductions the row is their mean.
pub fn build_feature_table(raw: &RawTexts, params: &TextParams) -> Result<Matrix> {
    let d = params.dim();
    let mut out = Matrix::zeros(raw.num_entities(), d);
    for e in 0..raw.num_entities() {
        let row = match raw.raw(EntityId(e as u32)) {
            Some(m) => {
                let h = mlp_reduce(&params.head, m)?;
                match &params.tail {
                    None => h,
                    Some(tp) => {
                        let t = mlp_reduce(tp, m)?;
                        h.iter().zip(&t).map(|(a, b)| (a + b) * 0.5).collect()
                    }
                }
            }
            None => params.fallback.data().to_vec(),
        };
        out.row_mut(e).copy_from_slice(&row);
    }
    Ok(out)
}

pub(crate) fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bigrams(raw_dim: usize) -> HashedNgramEncoder {
        HashedNgramEncoder {
            raw_dim,
            ngram_min: 2,
            ngram_max: 2,
            seed: 0,
        }
    }

    // FNV-1a reference values from the published test vectors.
    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a(0, b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(0, b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(0, b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashedNgramEncoder {
            raw_dim: 16,
            ngram_min: 1,
            ngram_max: 3,
            seed: 0,
        };
        assert!(e.encode("").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn abab_bigrams_into_eight_buckets() {
        // FNV-1a("ab") = 0x089c4407b545986a, FNV-1a("ba") = 0x08a63307b54dd00c,
        // reduced mod 8 by an independent implementation.
        let enc = bigrams(8);
        let ab = enc.bucket("ab");
        let ba = enc.bucket("ba");
        assert_eq!((ab, ba), (AB_BUCKET, BA_BUCKET));
        let v = enc.encode("abab");
        let norm = 5f64.sqrt();
        assert!((v[ab] - 2.0 / norm).abs() < 1e-12);
        assert!((v[ba] - 1.0 / norm).abs() < 1e-12);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 2);
    }

    const AB_BUCKET: usize = 2;
    const BA_BUCKET: usize = 4;

    #[test]
    fn count_mass_is_number_of_ngrams() {
        let enc = HashedNgramEncoder {
            raw_dim: 7,
            ngram_min: 1,
            ngram_max: 3,
            seed: 11,
        };
        let text = "处罚 of roads";
        let n = text.chars().count();
        let expected = (n + (n - 1) + (n - 2)) as f64;
        assert_eq!(enc.counts(text).iter().sum::<f64>(), expected);
    }

    #[test]
    fn mlp_examples() {
        let zero = MlpParams::zeros(2, 3);
        assert_eq!(mlp_reduce(&zero, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let ident = MlpParams {
            w: Matrix::identity(2),
            b: Matrix::zeros(1, 2),
        };
        assert_eq!(mlp_reduce(&ident, &[-1.0, -0.5]).unwrap(), vec![0.0, 0.0]);

        let p = MlpParams {
            w: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
            b: Matrix::row_vector(&[1.0, -10.0]),
        };
        assert_eq!(mlp_reduce(&p, &[1.0, 1.0]).unwrap(), vec![4.0, 0.0]);
        assert!(mlp_reduce(&p, &[1.0]).is_err());
    }

    #[test]
    fn precomputed_missing_entity_is_named() {
        let enc = TextEncoder::Precomputed(PrecomputedEncoder::from_map(2, HashMap::new()));
        let err = enc.encode("law_007", "").unwrap_err();
        assert!(err.to_string().contains("law_007"));
    }

    #[test]
    fn textless_entities_get_fallback() {
        let raw = RawTexts {
            rows: Matrix::zeros(0, 4),
            slot: vec![None; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = TextParams {
            head: MlpParams::xavier(2, 4, &mut rng),
            tail: None,
            fallback: Matrix::row_vector(&[0.25, -1.0]),
        };
        let table = build_feature_table(&raw, &params).unwrap();
        for r in table.iter_rows() {
            assert_eq!(r, &[0.25, -1.0]);
        }
    }

    #[test]
    fn mlp_tape_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MlpParams {
            w: xavier_uniform(3, 5, &mut rng),
            b: Matrix::row_vector(&[0.1, -0.2, 0.3]),
        };
        let m = Matrix::row_vector(&[0.4, -0.3, 0.9, 0.2, -0.7]);
        let probe = [0.7, -1.3, 0.5];
        let loss = |w: &Matrix, b: &Matrix, m: &Matrix| {
            let p = MlpParams { w: w.clone(), b: b.clone() };
            let out = mlp_reduce(&p, m.data()).unwrap();
            dot(&out, &probe)
        };
        let mut t = Tape::new();
        let mv = t.leaf(m.clone());
        let wv = t.leaf(params.w.clone());
        let bv = t.leaf(params.b.clone());
        let pv = t.leaf(Matrix::from_vec(1, 3, probe.to_vec()).unwrap());
        let y = t.linear(mv, wv);
        let y = t.add_row(y, bv);
        let y = t.relu(y);
        let y = t.mul(y, pv);
        let s = t.row_sum(y);
        let s = t.mean(s);
        assert!(t.kink_distance() > 1e-3);
        assert_eq!(t.scalar(s), loss(&params.w, &params.b, &m));
        let g = t.backward(s);
        let h = 1e-4;
        let check = |analytic: &Matrix, which: usize| {
            for k in 0..analytic.data().len() {
                let (mut w1, mut b1, mut m1) = (params.w.clone(), params.b.clone(), m.clone());
                let (mut w2, mut b2, mut m2) = (params.w.clone(), params.b.clone(), m.clone());
                match which {
                    0 => {
                        w1.data_mut()[k] += h;
                        w2.data_mut()[k] -= h;
                    }
                    1 => {
                        b1.data_mut()[k] += h;
                        b2.data_mut()[k] -= h;
                    }
                    _ => {
                        m1.data_mut()[k] += h;
                        m2.data_mut()[k] -= h;
                    }
                }
                let fd = (loss(&w1, &b1, &m1) - loss(&w2, &b2, &m2)) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "coord {k} of param {which}: {a} vs {fd}");
            }
        };
        check(g.get(wv).unwrap(), 0);
        check(g.get(bv).unwrap(), 1);
        check(g.get(mv).unwrap(), 2);
    }
}
