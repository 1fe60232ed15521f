use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::{CellType, Seq2SeqConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensors, seeded_rng, write_tensors, Scalar, Tensor};
use crate::textproc::NUM_SPECIALS;

/// Named parameter set of one encoder-decoder. Teachers and students are
/// both instances of this type.
#[derive(Clone, Debug)]
pub struct Seq2SeqParams<T = f32> {
    pub config: Seq2SeqConfig,
    pub src_vocab: usize,
    pub trg_vocab: usize,
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

/// Name and shape of every parameter tensor for a configuration.
pub(crate) fn layout(
    config: &Seq2SeqConfig,
    src_vocab: usize,
    trg_vocab: usize,
) -> Vec<(String, Vec<usize>)> {
    let (e, h, g) = (
        config.embed_size,
        config.hidden_size,
        config.cell_type.gates(),
    );
    let d = h / 2;
    let mut out = vec![
        ("src_embed".to_string(), vec![src_vocab, e]),
        ("trg_embed".to_string(), vec![trg_vocab, e]),
    ];
    let mut rnn = |prefix: String, input: usize, units: usize| {
        out.push((format!("{prefix}.wx"), vec![input, g * units]));
        out.push((format!("{prefix}.wh"), vec![units, g * units]));
        out.push((format!("{prefix}.b"), vec![g * units]));
    };
    for l in 0..config.num_layers {
        let input = if l == 0 { e } else { h };
        rnn(format!("enc.l{l}.fwd"), input, d);
        rnn(format!("enc.l{l}.bwd"), input, d);
        rnn(format!("dec.l{l}"), input, h);
    }
    for l in 0..config.num_layers {
        out.push((format!("init.l{l}.w"), vec![d, h]));
        out.push((format!("init.l{l}.b"), vec![h]));
    }
    out.push(("att.w".to_string(), vec![2 * h, h]));
    out.push(("att.b".to_string(), vec![h]));
    out.push(("out.w".to_string(), vec![h, trg_vocab]));
    out.push(("out.b".to_string(), vec![trg_vocab]));
    out
}

fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Xavier-uniform weights, zero biases, LSTM forget-gate biases at +1.
/// Each tensor draws from its own stream keyed by name, so the result is a
/// pure function of `(config, vocab sizes, seed)`.
pub fn init_params(
    config: &Seq2SeqConfig,
    src_vocab: usize,
    trg_vocab: usize,
    seed: u64,
) -> Result<Seq2SeqParams> {
    config.validate()?;
    if src_vocab <= NUM_SPECIALS || trg_vocab <= NUM_SPECIALS {
        return Err(Error::Config(format!(
            "vocabularies need at least {} entries",
            NUM_SPECIALS + 1
        )));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in layout(config, src_vocab, trg_vocab) {
        let mut t = Tensor::<f32>::zeros(&shape);
        if let [fan_in, fan_out] = shape[..] {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = seeded_rng(seed, &[name_key(&name)]);
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound) as f32;
            }
        } else if config.cell_type == CellType::Lstm
            && name.ends_with(".b")
            && (name.starts_with("enc.") || name.starts_with("dec."))
        {
            let units = shape[0] / 4;
            t.data_mut()[units..2 * units].fill(1.0);
        }
        tensors.insert(name, Arc::new(t));
    }
    Ok(Seq2SeqParams {
        config: config.clone(),
        src_vocab,
        trg_vocab,
        tensors,
    })
}

impl<T: Scalar> Seq2SeqParams<T> {
    pub fn get(&self, name: &str) -> &Arc<Tensor<T>> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor<T> {
        Arc::make_mut(
            self.tensors
                .get_mut(name)
                .unwrap_or_else(|| panic!("missing parameter {name}")),
        )
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqParams<U> {
        Seq2SeqParams {
            config: self.config.clone(),
            src_vocab: self.src_vocab,
            trg_vocab: self.trg_vocab,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// All parameters flattened in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self, flat: &[T]) -> Self {
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors.values_mut() {
            let t = Arc::make_mut(t);
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        out
    }
}

impl Seq2SeqParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(
            path,
            self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref())),
        )
    }

    pub fn load(
        path: &Path,
        config: &Seq2SeqConfig,
        src_vocab: usize,
        trg_vocab: usize,
    ) -> Result<Self> {
        let mut raw = read_tensors(path)?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in layout(config, src_vocab, trg_vocab) {
            let t = raw.remove(&name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("missing {name}"),
            })?;
            if t.shape() != shape {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            tensors.insert(name, Arc::new(t));
        }
        Ok(Self {
            config: config.clone(),
            src_vocab,
            trg_vocab,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_params;

    fn tiny() -> Seq2SeqConfig {
        Seq2SeqConfig {
            embed_size: 6,
            hidden_size: 8,
            ..Seq2SeqConfig::large()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = init_params(&tiny(), 9, 11, 5).unwrap();
        let b = init_params(&tiny(), 9, 11, 5).unwrap();
        let c = init_params(&tiny(), 9, 11, 6).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn count_matches_formula() {
        for layers in [1, 2] {
            for cell in [CellType::Lstm, CellType::Gru] {
                let cfg = Seq2SeqConfig {
                    num_layers: layers,
                    cell_type: cell,
                    ..tiny()
                };
                let p = init_params(&cfg, 13, 17, 0).unwrap();
                assert_eq!(p.count(), count_params(&cfg, 13, 17));
            }
        }
    }

    #[test]
    fn xavier_bounds_and_biases() {
        let p = init_params(&tiny(), 9, 11, 1).unwrap();
        let w = p.get("dec.l0.wx");
        let bound = (6.0f32 / (6 + 32) as f32).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let b = p.get("dec.l0.b");
        assert!(b.data()[..8].iter().all(|&v| v == 0.0));
        assert!(b.data()[8..16].iter().all(|&v| v == 1.0));
        assert!(p.get("out.b").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vocab_too_small() {
        assert!(init_params(&tiny(), 4, 10, 0).is_err());
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let p = init_params(&tiny(), 9, 11, 2).unwrap();
        p.save(&path).unwrap();
        let q = Seq2SeqParams::load(&path, &tiny(), 9, 11).unwrap();
        assert_eq!(p.flatten(), q.flatten());
        assert!(Seq2SeqParams::load(&path, &tiny(), 9, 12).is_err());
    }
}
