//! Checkpoints: config snapshot, every model tensor, Adam moments and the
//! training RNG position, in one MOEC container.
//!
//! Meta is the line `checkpoint` followed by the rendered config. Tensor
//! names follow [`Model::named_tensors`]; Adam moments are stored as
//! `adam.m.<name>` / `adam.v.<name>`, the step count as the raw bits of
//! `adam.step`, and the RNG state as the raw bits of `rng.state`
//! (seed, low and high words of the stream position).

use std::collections::BTreeMap;
use std::path::Path;

use patchmoe::{AdamState, Matrix, Model, RngState, SeededRng, TrainConfig};

use crate::config::{parse_config, render_config};
use crate::container::{Container, Tensor};
use crate::{CliError, CliResult};

const META_TAG: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Option<AdamState>,
    pub rng: Option<RngState>,
}

fn matrix_tensor(name: String, m: &Matrix) -> Tensor {
    Tensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
}

fn tensor_matrix(t: &Tensor) -> CliResult<Matrix> {
    match t.dims[..] {
        [r, c] => Ok(Matrix::from_vec(r, c, t.data.clone())?),
        _ => Err(CliError::usage(format!("tensor {} has rank {}, expected 2", t.name, t.dims.len()))),
    }
}

fn bits(name: &str, words: &[u64]) -> Tensor {
    Tensor::new(name, vec![words.len()], words.iter().map(|&w| f64::from_bits(w)).collect())
}

fn words(c: &Container, name: &str, n: usize) -> CliResult<Option<Vec<u64>>> {
    match c.get(name) {
        None => Ok(None),
        Some(t) if t.dims == [n] => Ok(Some(t.data.iter().map(|v| v.to_bits()).collect())),
        Some(t) => Err(CliError::usage(format!("{name} has dims {:?}, expected [{n}]", t.dims))),
    }
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut tensors: Vec<Tensor> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, m)| matrix_tensor(n, &m))
            .collect();
        if let Some(adam) = &self.adam {
            let names: Vec<String> = self.model.trainable().into_iter().map(|(n, _)| n).collect();
            for (n, m) in names.iter().zip(&adam.m) {
                tensors.push(matrix_tensor(format!("adam.m.{n}"), m));
            }
            for (n, v) in names.iter().zip(&adam.v) {
                tensors.push(matrix_tensor(format!("adam.v.{n}"), v));
            }
            tensors.push(bits("adam.step", &[adam.step]));
        }
        if let Some(s) = self.rng {
            tensors.push(bits("rng.state", &[s.seed, s.word_pos as u64, (s.word_pos >> 64) as u64]));
        }
        Container {
            meta: format!("{META_TAG}\n{}", render_config(&self.config)),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> CliResult<Self> {
        let body = c
            .meta
            .strip_prefix(META_TAG)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| CliError::usage("file is not a checkpoint"))?;
        let config = parse_config(body)?;
        let mut model = Model::init(&config.arch, &mut SeededRng::new(0))?;
        let mut map = BTreeMap::new();
        for t in &c.tensors {
            if !t.name.starts_with("adam.") && !t.name.starts_with("rng.") {
                map.insert(t.name.clone(), tensor_matrix(t)?);
            }
        }
        if map.len() != model.named_tensors().len() {
            return Err(CliError::usage(format!(
                "checkpoint holds {} model tensors, architecture expects {}",
                map.len(),
                model.named_tensors().len()
            )));
        }
        model.load_tensors(&map)?;

        let adam = match words(c, "adam.step", 1)? {
            None => None,
            Some(step) => {
                let mut st = AdamState::for_model(&model);
                for (i, (n, _)) in model.trainable().into_iter().enumerate() {
                    for (prefix, slot) in [("adam.m.", &mut st.m[i]), ("adam.v.", &mut st.v[i])] {
                        let t = c
                            .get(&format!("{prefix}{n}"))
                            .ok_or_else(|| CliError::usage(format!("missing {prefix}{n}")))?;
                        let m = tensor_matrix(t)?;
                        if m.shape() != slot.shape() {
                            return Err(CliError::usage(format!("{prefix}{n} has the wrong shape")));
                        }
                        *slot = m;
                    }
                }
                st.step = step[0];
                Some(st)
            }
        };
        let rng = words(c, "rng.state", 3)?.map(|w| RngState {
            seed: w[0],
            word_pos: (w[1] as u128) | ((w[2] as u128) << 64),
        });
        Ok(Self {
            config,
            model,
            adam,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
