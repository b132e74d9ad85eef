//! Classifier files: magic, JSON header, binary parameters.
//!
//! Layout: `FPCLF\0` | u32 version | u64 header length | header JSON | payload.
//! The payload is little-endian. Logistic: mean, scale, weights, bias as f64.
//! Forest: u32 tree count, then per tree a u32 node count and its nodes, each
//! a tag byte followed by `(u32 feature, f64 threshold, u32 left, u32 right)`
//! for splits or `k` f64 probabilities for leaves.

use serde::{Deserialize, Serialize};

use super::forest::{Forest, Node, Tree};
use super::logistic::{LogisticModel, TrainReport};
use super::{ClassifierKind, FeatureRecipe, Model, PixelClassifier, PixelClfError, TrainConfig};

pub const CLASSIFIER_MAGIC: &[u8; 6] = b"FPCLF\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ClassifierKind,
    recipe_checksum: String,
    recipe: FeatureRecipe,
    channel_names: Vec<String>,
    classes: Vec<u32>,
    seed: u64,
    hyperparameters: TrainConfig,
    training: Option<TrainReport>,
}

pub fn encode_classifier(clf: &PixelClassifier) -> Vec<u8> {
    let header = Header {
        kind: clf.kind,
        recipe_checksum: clf.recipe_checksum.clone(),
        recipe: clf.recipe.clone(),
        channel_names: clf.channel_names.clone(),
        classes: clf.classes.clone(),
        seed: clf.config.forest.seed,
        hyperparameters: clf.config.clone(),
        training: clf.training_report().cloned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CLASSIFIER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let f64s = |out: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    match &clf.model {
        Model::Logistic(m) => {
            f64s(&mut out, &m.mean);
            f64s(&mut out, &m.scale);
            f64s(&mut out, &m.weights);
            f64s(&mut out, &m.bias);
        }
        Model::Forest(f) => {
            out.extend_from_slice(&(f.trees.len() as u32).to_le_bytes());
            for t in &f.trees {
                out.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
                for n in &t.nodes {
                    match n {
                        Node::Split { feature, threshold, left, right } => {
                            out.push(0);
                            out.extend_from_slice(&feature.to_le_bytes());
                            out.extend_from_slice(&threshold.to_le_bytes());
                            out.extend_from_slice(&left.to_le_bytes());
                            out.extend_from_slice(&right.to_le_bytes());
                        }
                        Node::Leaf { distribution } => {
                            out.push(1);
                            f64s(&mut out, distribution);
                        }
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PixelClfError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            PixelClfError::Archive(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PixelClfError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PixelClfError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PixelClfError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PixelClfError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| PixelClfError::Archive("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_classifier(bytes: &[u8]) -> Result<PixelClassifier, PixelClfError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(6).ok() != Some(&CLASSIFIER_MAGIC[..]) {
        return Err(PixelClfError::Archive("not a classifier file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PixelClfError::Archive(format!("unsupported version {version}")));
    }
    let hlen = r.u64()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| PixelClfError::Archive(format!("header: {e}")))?;
    if header.recipe.checksum() != header.recipe_checksum {
        return Err(PixelClfError::Archive("recipe checksum does not match recipe".into()));
    }
    let (d, k) = (header.channel_names.len(), header.classes.len());
    let model = match header.kind {
        ClassifierKind::Logistic => Model::Logistic(LogisticModel {
            mean: r.f64s(d)?,
            scale: r.f64s(d)?,
            weights: r.f64s(k * d)?,
            bias: r.f64s(k)?,
            report: header
                .training
                .clone()
                .ok_or_else(|| PixelClfError::Archive("logistic header lacks training report".into()))?,
        }),
        ClassifierKind::RandomForest => {
            let trees = r.u32()? as usize;
            let mut out = Vec::with_capacity(trees.min(1 << 16));
            for _ in 0..trees {
                let count = r.u32()? as usize;
                let mut nodes = Vec::with_capacity(count.min(1 << 20));
                for _ in 0..count {
                    nodes.push(match r.u8()? {
                        0 => {
                            let feature = r.u32()?;
                            let threshold = r.f64s(1)?[0];
                            let (left, right) = (r.u32()?, r.u32()?);
                            if feature as usize >= d || left as usize >= count || right as usize >= count {
                                return Err(PixelClfError::Archive("tree node out of range".into()));
                            }
                            Node::Split { feature, threshold, left, right }
                        }
                        1 => Node::Leaf { distribution: r.f64s(k)? },
                        t => return Err(PixelClfError::Archive(format!("bad node tag {t}"))),
                    });
                }
                if nodes.is_empty() {
                    return Err(PixelClfError::Archive("empty tree".into()));
                }
                out.push(Tree { nodes });
            }
            Model::Forest(Forest {
                dim: d,
                classes: k,
                trees: out,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(PixelClfError::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(PixelClassifier {
        kind: header.kind,
        recipe: header.recipe,
        recipe_checksum: header.recipe_checksum,
        channel_names: header.channel_names,
        classes: header.classes,
        config: header.hyperparameters,
        model,
    })
}
