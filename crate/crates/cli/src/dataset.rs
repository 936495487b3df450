//! Dataset files: images, masks, labels and class ids in one MOEC
//! container. Meta lines are `dataset`, `split = ...`, `image_size = ...`,
//! `count = ...`; tensors are `images` and `masks` as `[N, H, W]`,
//! `labels` and `classes` as `[N]`.

use std::path::Path;

use patchmoe::{Matrix, SyntheticSample};

use crate::container::{Container, Tensor};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub image_size: usize,
    pub samples: Vec<SyntheticSample>,
}

fn meta_value<'a>(meta: &'a str, key: &str) -> CliResult<&'a str> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| CliError::usage(format!("dataset meta lacks {key}")))
}

fn parse_usize(meta: &str, key: &str) -> CliResult<usize> {
    meta_value(meta, key)?
        .parse()
        .map_err(|_| CliError::usage(format!("dataset meta {key} is not an integer")))
}

impl Dataset {
    pub fn to_container(&self) -> Container {
        let (n, s) = (self.samples.len(), self.image_size);
        let mut images = Vec::with_capacity(n * s * s);
        let mut masks = Vec::with_capacity(n * s * s);
        for x in &self.samples {
            images.extend_from_slice(x.image.data());
            masks.extend(x.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
        Container {
            meta: format!("dataset\nsplit = {}\nimage_size = {s}\ncount = {n}\n", self.split),
            tensors: vec![
                Tensor::new("images", vec![n, s, s], images),
                Tensor::new("masks", vec![n, s, s], masks),
                Tensor::new("labels", vec![n], self.samples.iter().map(|x| x.label as u8 as f64).collect()),
                Tensor::new("classes", vec![n], self.samples.iter().map(|x| x.class_id as f64).collect()),
            ],
        }
    }

    pub fn from_container(c: &Container) -> CliResult<Self> {
        if c.meta.lines().next() != Some("dataset") {
            return Err(CliError::usage("file is not a dataset"));
        }
        let split = meta_value(&c.meta, "split")?.to_string();
        let s = parse_usize(&c.meta, "image_size")?;
        let n = parse_usize(&c.meta, "count")?;
        let get = |name: &str, dims: Vec<usize>| -> CliResult<&Tensor> {
            let t = c.get(name).ok_or_else(|| CliError::usage(format!("dataset lacks {name}")))?;
            if t.dims != dims {
                return Err(CliError::usage(format!("dataset {name} has dims {:?}, expected {dims:?}", t.dims)));
            }
            Ok(t)
        };
        let images = get("images", vec![n, s, s])?;
        let masks = get("masks", vec![n, s, s])?;
        let labels = get("labels", vec![n])?;
        let classes = get("classes", vec![n])?;
        let px = s * s;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let class = classes.data[i];
            if class < 0.0 || class.fract() != 0.0 {
                return Err(CliError::usage(format!("dataset class id {class} is not a nonnegative integer")));
            }
            let mask: Vec<bool> = masks.data[i * px..(i + 1) * px].iter().map(|&m| m != 0.0).collect();
            let label = labels.data[i] != 0.0;
            if label != mask.iter().any(|&m| m) {
                return Err(CliError::usage(format!("dataset sample {i}: label disagrees with mask")));
            }
            samples.push(SyntheticSample {
                image: Matrix::from_vec(s, s, images.data[i * px..(i + 1) * px].to_vec())?,
                mask,
                label,
                class_id: class as usize,
            });
        }
        Ok(Self {
            split,
            image_size: s,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
