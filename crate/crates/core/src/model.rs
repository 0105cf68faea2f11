//! The matching network.
//!
//! Image pathway: a two-layer conv stack (16 and 32 maps, 3x3, padding 1,
//! each followed by ReLU and 2x2 max pooling), a hidden dense layer with
//! ReLU, dropout, and a dense head. The Object-CNN applies it to each 28x28
//! quadrant separately and emits one 64-d embedding per quadrant; the
//! Scene-CNN applies a wider variant to the whole 56x56 scene and emits all
//! four embeddings at once from a 256-wide head.
//!
//! Word pathway: a 10x64 embedding table initialized to a rectangular
//! identity.
//!
//! Attention is `sigmoid(u_i · v_j / sqrt(d))`, the per-word sub-output is the
//! maximum over quadrants, and the match probability is the product of the
//! sub-outputs in caption order.

use std::collections::HashMap;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::ops::{sigmoid, Mode};
use crate::kernel::{Gradients, Graph, NodeId, Real, Tensor};
use crate::mnist::{DIGIT_SIDE, N_CLASSES};
use crate::scenegen::{extract_quadrant, QUADRANTS, SCENE_PIXELS, SCENE_SIDE};

pub const EMBED_DIM: usize = 64;
pub const VOCAB: usize = N_CLASSES;
pub const CONV1_MAPS: usize = 16;
pub const CONV2_MAPS: usize = 32;
pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
pub const DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    ObjectCnn,
    SceneCnn,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::ObjectCnn => "object_cnn",
            Arch::SceneCnn => "scene_cnn",
        }
    }

    /// Side length of one image fed to the conv stack.
    pub fn input_side(self) -> usize {
        match self {
            Arch::ObjectCnn => DIGIT_SIDE,
            Arch::SceneCnn => SCENE_SIDE,
        }
    }

    pub fn hidden_width(self) -> usize {
        match self {
            Arch::ObjectCnn => 128,
            Arch::SceneCnn => 256,
        }
    }

    /// Values emitted by the dense head per encoded image.
    pub fn head_width(self) -> usize {
        match self {
            Arch::ObjectCnn => EMBED_DIM,
            Arch::SceneCnn => QUADRANTS * EMBED_DIM,
        }
    }

    pub fn flat_width(self) -> usize {
        let s = self.input_side() / 4;
        s * s * CONV2_MAPS
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object_cnn" => Ok(Arch::ObjectCnn),
            "scene_cnn" => Ok(Arch::SceneCnn),
            _ => Err(Error::Config(format!("unknown architecture '{s}'"))),
        }
    }
}

pub const PARAM_NAMES: [&str; 9] =
    ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b", "embedding"];
pub const EMBEDDING_SLOT: usize = 8;

/// All learnable state, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub arch: Arch,
    pub tensors: Vec<Tensor<T>>,
}

pub fn param_shapes(arch: Arch) -> [Vec<usize>; 9] {
    let (h, f, o) = (arch.hidden_width(), arch.flat_width(), arch.head_width());
    [
        vec![CONV1_MAPS, 1, KERNEL, KERNEL],
        vec![CONV1_MAPS],
        vec![CONV2_MAPS, CONV1_MAPS, KERNEL, KERNEL],
        vec![CONV2_MAPS],
        vec![h, f],
        vec![h],
        vec![o, h],
        vec![o],
        vec![VOCAB, EMBED_DIM],
    ]
}

/// Fresh parameters: fan-in scaled uniform weights in `[-1/√fan_in, 1/√fan_in]`,
/// zero biases, and an embedding table with ones on the leading diagonal.
pub fn init_params(arch: Arch, seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_shapes(arch)
        .iter()
        .enumerate()
        .map(|(slot, shape)| {
            if slot == EMBEDDING_SLOT {
                Tensor::from_fn(shape, |i| if i / EMBED_DIM == i % EMBED_DIM { 1.0 } else { 0.0 })
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let b = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
                Tensor::from_fn(shape, |_| dist.sample(&mut rng))
            }
        })
        .collect();
    ModelParams { arch, tensors }
}

impl<T: Real> ModelParams<T> {
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        PARAM_NAMES.iter().map(|n| n.to_string()).zip(self.tensors.iter().cloned()).collect()
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.tensors[EMBEDDING_SLOT]
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { arch: self.arch, tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Order-sensitive digest of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for &v in t.data() {
                h ^= v.to_bits_u64();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl ModelParams<f32> {
    pub fn from_named(arch: Arch, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let shapes = param_shapes(arch);
        if named.len() != PARAM_NAMES.len() {
            return Err(Error::Consistency(format!("checkpoint has {} tensors, expected 9", named.len())));
        }
        for ((name, t), (want, shape)) in named.iter().zip(PARAM_NAMES.iter().zip(&shapes)) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(Error::Consistency(format!(
                    "checkpoint entry {name} {:?} does not match {want} {shape:?} for {}",
                    t.shape(),
                    arch.as_str()
                )));
            }
        }
        Ok(ModelParams { arch, tensors: named.into_iter().map(|(_, t)| t).collect() })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::kernel::checkpoint::save(path, &self.named())
    }

    pub fn load(path: &std::path::Path, arch: Arch) -> Result<Self> {
        Self::from_named(arch, crate::kernel::checkpoint::load(path)?)
    }
}

/// k x 4 word-by-quadrant attention scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub words: Vec<u8>,
    pub scores: Vec<f32>,
}

impl AttentionMap {
    pub fn row(&self, j: usize) -> &[f32] {
        &self.scores[j * QUADRANTS..(j + 1) * QUADRANTS]
    }

    pub fn rows(&self) -> usize {
        self.words.len()
    }

    /// Quadrant with the highest score for word row `j` (lowest index on ties).
    pub fn argmax(&self, j: usize) -> usize {
        argmax_first(self.row(j))
    }
}

pub fn argmax_first(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub attention: AttentionMap,
    pub sub_outputs: Vec<f32>,
    pub match_probability: f32,
}

fn check_caption(caption: &[u8]) -> Result<()> {
    if caption.is_empty() {
        return Err(Error::Dimension("empty caption".into()));
    }
    if let Some(&bad) = caption.iter().find(|&&w| w as usize >= VOCAB) {
        return Err(Error::Index(format!("word id {bad} outside vocabulary of {VOCAB}")));
    }
    Ok(())
}

fn check_scene(scene: &[f32]) -> Result<()> {
    if scene.len() != SCENE_PIXELS {
        return Err(Error::Dimension(format!(
            "scene must be {SCENE_SIDE}x{SCENE_SIDE} ({SCENE_PIXELS} values), got {}",
            scene.len()
        )));
    }
    Ok(())
}

/// One scene/caption pair fed to the network.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub scene: &'a [f32],
    pub caption: &'a [u8],
}

/// The recorded forward pass of a batch.
pub struct BatchPass<T: Real> {
    pub graph: Graph<T>,
    /// `[n_examples * 4, d]` image embeddings, quadrants in row-major order.
    pub image_embeddings: NodeId,
    /// `[n_words, d]` word embeddings, captions concatenated.
    pub word_embeddings: NodeId,
    /// Flat attention scores, four per caption word.
    pub attention: NodeId,
    pub sub_outputs: NodeId,
    pub probabilities: NodeId,
    /// Word offsets of each example into the concatenated captions.
    pub offsets: Vec<usize>,
    pub loss: Option<NodeId>,
}

impl<T: Real> BatchPass<T> {
    pub fn probabilities(&self) -> &[T] {
        self.graph.value(self.probabilities).data()
    }

    pub fn loss_value(&self) -> Option<T> {
        self.loss.map(|l| self.graph.value(l).data()[0])
    }

    pub fn output(&self, e: usize, caption: &[u8]) -> ModelOutput {
        let (a, b) = (self.offsets[e], self.offsets[e + 1]);
        let att = self.graph.value(self.attention).data();
        let subs = self.graph.value(self.sub_outputs).data();
        ModelOutput {
            attention: AttentionMap {
                words: caption.to_vec(),
                scores: att[a * QUADRANTS..b * QUADRANTS].iter().map(|v| v.to_f64() as f32).collect(),
            },
            sub_outputs: subs[a..b].iter().map(|v| v.to_f64() as f32).collect(),
            match_probability: self.probabilities()[e].to_f64() as f32,
        }
    }

    pub fn backward(&self) -> Result<Gradients<T>> {
        let loss = self.loss.ok_or_else(|| Error::Usage("forward pass was run without labels".into()))?;
        self.graph.backward(loss)
    }
}

/// Hashable identity of an encoder input; identical pixels share one
/// trunk evaluation.
fn pixel_key(px: &[f32]) -> Vec<u32> {
    px.iter().map(|v| v.to_bits()).collect()
}

/// Runs the network on a batch, recording every operation. Encoder inputs
/// with identical pixels are encoded once and shared; dropout masks are
/// still drawn per occurrence. When `labels` is given, the mean BCE loss is
/// recorded too.
pub fn forward_batch<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    examples: &[Example<'_>],
    labels: Option<&[bool]>,
    mode: Mode,
    rng: &mut R,
) -> Result<BatchPass<T>> {
    if examples.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    for ex in examples {
        check_scene(ex.scene)?;
        check_caption(ex.caption)?;
    }
    let arch = params.arch;
    let side = arch.input_side();

    // unique encoder inputs and, per occurrence, which one it is
    let mut unique: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut pixels: Vec<T> = Vec::new();
    let mut occurrence = Vec::new();
    let mut add_unit = |px: &[f32], pixels: &mut Vec<T>| {
        let n = unique.len();
        let id = *unique.entry(pixel_key(px)).or_insert_with(|| {
            pixels.extend(px.iter().map(|&v| T::from_f64(v as f64)));
            n
        });
        occurrence.push(id);
    };
    for ex in examples {
        match arch {
            Arch::ObjectCnn => {
                for q in 0..QUADRANTS {
                    add_unit(&extract_quadrant(ex.scene, q), &mut pixels);
                }
            }
            Arch::SceneCnn => add_unit(ex.scene, &mut pixels),
        }
    }
    let n_unique = pixels.len() / (side * side);

    let mut g = Graph::new();
    let p: Vec<NodeId> = params.tensors.iter().enumerate().map(|(i, t)| g.param(t.clone(), i)).collect();
    let x = g.input(Tensor::new(&[n_unique, 1, side, side], pixels)?);
    let h = g.conv2d(x, p[0], p[1], PADDING)?;
    let h = g.relu(h);
    let h = g.maxpool2x2(h)?;
    let h = g.conv2d(h, p[2], p[3], PADDING)?;
    let h = g.relu(h);
    let h = g.maxpool2x2(h)?;
    let h = g.reshape(h, &[n_unique, arch.flat_width()])?;
    let h = g.dense(h, p[4], p[5])?;
    let h = g.relu(h);
    let h = g.gather_rows(h, &occurrence)?;
    let h = g.dropout(h, DROPOUT, mode, rng)?;
    let head = g.dense(h, p[6], p[7])?;
    let image_embeddings = g.reshape(head, &[examples.len() * QUADRANTS, EMBED_DIM])?;

    let words: Vec<usize> = examples.iter().flat_map(|e| e.caption.iter().map(|&w| w as usize)).collect();
    let word_embeddings = g.embedding(p[EMBEDDING_SLOT], &words)?;

    let mut offsets = Vec::with_capacity(examples.len() + 1);
    let mut pairs = Vec::with_capacity(words.len() * QUADRANTS);
    offsets.push(0);
    for (e, ex) in examples.iter().enumerate() {
        let base = *offsets.last().unwrap();
        for j in 0..ex.caption.len() {
            for q in 0..QUADRANTS {
                pairs.push((e * QUADRANTS + q, base + j));
            }
        }
        offsets.push(base + ex.caption.len());
    }
    let scores = g.pair_dot(image_embeddings, word_embeddings, &pairs)?;
    let scaled = g.scale(scores, T::ONE / T::from_f64(EMBED_DIM as f64).sqrt());
    let attention = g.sigmoid(scaled);
    let sub_outputs = g.group_max(attention, QUADRANTS)?;
    let probabilities = g.segment_prod(sub_outputs, &offsets)?;
    let loss = match labels {
        Some(l) => Some(g.bce_mean(probabilities, l)?),
        None => None,
    };
    Ok(BatchPass {
        graph: g,
        image_embeddings,
        word_embeddings,
        attention,
        sub_outputs,
        probabilities,
        offsets,
        loss,
    })
}

fn image_embeddings<R: Rng + ?Sized>(
    scene: &[f32],
    params: &ModelParams<f32>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let pass = forward_batch(params, &[Example { scene, caption: &[0] }], None, mode, rng)?;
    Ok(pass.graph.value(pass.image_embeddings).clone())
}

/// Four 64-d quadrant embeddings from the shared per-quadrant encoder.
pub fn embed_quadrants_object<R: Rng + ?Sized>(
    scene: &[f32],
    params: &ModelParams<f32>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if params.arch != Arch::ObjectCnn {
        return Err(Error::Usage("parameters are not an Object-CNN".into()));
    }
    image_embeddings(scene, params, mode, rng)
}

/// Four 64-d embeddings read off one encoding of the unsegmented scene.
pub fn embed_scene_cnn<R: Rng + ?Sized>(
    scene: &[f32],
    params: &ModelParams<f32>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if params.arch != Arch::SceneCnn {
        return Err(Error::Usage("parameters are not a Scene-CNN".into()));
    }
    image_embeddings(scene, params, mode, rng)
}

pub fn embed_words(caption: &[u8], params: &ModelParams<f32>) -> Result<Tensor<f32>> {
    check_caption(caption)?;
    let table = params.embedding();
    let mut data = Vec::with_capacity(caption.len() * EMBED_DIM);
    for &w in caption {
        data.extend_from_slice(table.row(w as usize));
    }
    Tensor::new(&[caption.len(), EMBED_DIM], data)
}

/// `a_jq = sigmoid(u_q · v_j / sqrt(d))`, words by quadrants.
pub fn attention_scores(u: &Tensor<f32>, v: &Tensor<f32>, words: &[u8]) -> Result<AttentionMap> {
    let (us, vs) = (u.shape(), v.shape());
    if us.len() != 2 || vs.len() != 2 || us[0] != QUADRANTS || us[1] != vs[1] || vs[0] != words.len() {
        return Err(Error::Dimension(format!(
            "attention needs u [4, d] and v [k, d] with k = {} words, got {us:?} and {vs:?}",
            words.len()
        )));
    }
    let scale = 1.0 / (us[1] as f32).sqrt();
    let mut scores = Vec::with_capacity(words.len() * QUADRANTS);
    for j in 0..vs[0] {
        for q in 0..QUADRANTS {
            let s: f32 = u.row(q).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
            scores.push(sigmoid(s * scale));
        }
    }
    Ok(AttentionMap { words: words.to_vec(), scores })
}

/// Row maxima and their product, accumulated in caption order.
pub fn aggregate_output(attention: &AttentionMap) -> (Vec<f32>, f32) {
    let subs: Vec<f32> = (0..attention.rows())
        .map(|j| attention.row(j).iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let prod = subs.iter().fold(1.0f32, |acc, &o| acc * o);
    (subs, prod)
}

/// Single-example forward pass.
pub fn forward<R: Rng + ?Sized>(
    scene: &[f32],
    caption: &[u8],
    params: &ModelParams<f32>,
    mode: Mode,
    rng: &mut R,
) -> Result<ModelOutput> {
    let pass = forward_batch(params, &[Example { scene, caption }], None, mode, rng)?;
    Ok(pass.output(0, caption))
}

/// Evaluation-mode outputs for many examples, processed in chunks.
pub fn predict(params: &ModelParams<f32>, examples: &[Example<'_>], chunk: usize) -> Result<Vec<ModelOutput>> {
    // evaluation never draws from the stream
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(examples.len());
    for part in examples.chunks(chunk.max(1)) {
        let pass = forward_batch(params, part, None, Mode::Eval, &mut rng)?;
        for (e, ex) in part.iter().enumerate() {
            out.push(pass.output(e, ex.caption));
        }
    }
    Ok(out)
}
