//! The main embedding network and the similarity-correction network.
//!
//! The main net maps image and text features into a joint space with one
//! perceptron per modality, then turns a pair of embeddings into a unit
//! similarity feature `W_s |u - v|^2 / ||W_s |u - v|^2||`. The correction
//! net is a small perceptron with a logistic output that maps that feature
//! to a score in `(0, 1)`.
//!
//! Parameters live as plain [`Tensor`]s in [`MainNetParams`] and
//! [`MetaNetParams`]; to differentiate, bind them onto a [`Graph`] with
//! [`MainNetParams::bind`] / [`MetaNetParams::bind`].

pub mod checkpoint;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Guard on the similarity-feature normalization.
pub const SIMILARITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_img: usize,
    pub d_txt: usize,
    #[serde(default = "default_d_emb")]
    pub d_emb: usize,
    #[serde(default = "default_d_sim")]
    pub d_sim: usize,
    #[serde(default = "default_meta_hidden")]
    pub meta_hidden: usize,
}

fn default_d_emb() -> usize {
    64
}
fn default_d_sim() -> usize {
    32
}
fn default_meta_hidden() -> usize {
    32
}

impl ModelDims {
    pub fn new(d_img: usize, d_txt: usize) -> Self {
        Self {
            d_img,
            d_txt,
            d_emb: default_d_emb(),
            d_sim: default_d_sim(),
            meta_hidden: default_meta_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_img, self.d_txt, self.d_emb, self.d_sim, self.meta_hidden].contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.d_sim >= self.d_emb {
            return Err(Error::InvalidArgument(format!(
                "d_sim ({}) must be smaller than d_emb ({})",
                self.d_sim, self.d_emb
            )));
        }
        Ok(())
    }
}

/// An affine layer `x W + b` with `W: [in, out]` and `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        Self {
            weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)),
            bias: Tensor::matrix(1, fan_out, draw(fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Affine layers with a rectifier between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn check_chain(&self, what: &'static str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument(format!("{what}: no layers")));
        }
        for l in &self.layers {
            if l.bias.shape() != [1, l.out_dim()] {
                return Err(Error::Dimension {
                    what,
                    expected: l.out_dim(),
                    got: l.bias.cols(),
                });
            }
        }
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Dimension {
                    what,
                    expected: w[0].out_dim(),
                    got: w[1].in_dim(),
                });
            }
        }
        Ok(())
    }
}

/// Parameters `W = {W_f, W_g, W_s}` of the main net.
#[derive(Debug, Clone, PartialEq)]
pub struct MainNetParams {
    pub image: Mlp,
    pub text: Mlp,
    /// `[d_emb, d_sim]`, applied as `x W_s`.
    pub projection: Tensor,
}

impl MainNetParams {
    /// Two-layer branches of width `d_emb` and a `d_emb -> d_sim` projection.
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let image = Mlp::init(&[dims.d_img, dims.d_emb, dims.d_emb], rng);
        let text = Mlp::init(&[dims.d_txt, dims.d_emb, dims.d_emb], rng);
        let projection = Linear::init(dims.d_emb, dims.d_sim, rng).weight;
        Self {
            image,
            text,
            projection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.check_chain("image branch")?;
        self.text.check_chain("text branch")?;
        let d_emb = self.image.out_dim();
        if self.text.out_dim() != d_emb {
            return Err(Error::Dimension {
                what: "text embedding",
                expected: d_emb,
                got: self.text.out_dim(),
            });
        }
        if self.projection.rows() != d_emb {
            return Err(Error::Dimension {
                what: "similarity projection",
                expected: d_emb,
                got: self.projection.rows(),
            });
        }
        Ok(())
    }

    pub fn d_img(&self) -> usize {
        self.image.in_dim()
    }

    pub fn d_txt(&self) -> usize {
        self.text.in_dim()
    }

    pub fn d_sim(&self) -> usize {
        self.projection.cols()
    }

    /// All tensors in a fixed order: image layers, text layers, projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.image
            .tensors()
            .chain(self.text.tensors())
            .chain(std::iter::once(&self.projection))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.image
            .tensors_mut()
            .chain(self.text.tensors_mut())
            .chain(std::iter::once(&mut self.projection))
            .collect()
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> MainNetVars<'g> {
        let layers = |m: &Mlp| -> Vec<(Var<'g>, Var<'g>)> {
            m.layers
                .iter()
                .map(|l| (graph.leaf(l.weight.clone()), graph.leaf(l.bias.clone())))
                .collect()
        };
        MainNetVars {
            image: layers(&self.image),
            text: layers(&self.text),
            projection: graph.leaf(self.projection.clone()),
        }
    }
}

/// Parameters `Θ` of the similarity-correction network.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNetParams {
    pub mlp: Mlp,
}

impl MetaNetParams {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::init(&[dims.d_sim, dims.meta_hidden, 1], rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.check_chain("correction net")?;
        if self.mlp.out_dim() != 1 {
            return Err(Error::Dimension {
                what: "correction net output",
                expected: 1,
                got: self.mlp.out_dim(),
            });
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors().collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut().collect()
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> MetaNetVars<'g> {
        MetaNetVars {
            layers: self
                .mlp
                .layers
                .iter()
                .map(|l| (graph.leaf(l.weight.clone()), graph.leaf(l.bias.clone())))
                .collect(),
        }
    }
}

/// One `{F, V}` network pair; the unit that is checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub main: MainNetParams,
    pub meta: MetaNetParams,
}

impl Network {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            main: MainNetParams::init(dims, rng),
            meta: MetaNetParams::init(dims, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.main.validate()?;
        self.meta.validate()?;
        if self.meta.mlp.in_dim() != self.main.d_sim() {
            return Err(Error::Dimension {
                what: "correction net input",
                expected: self.main.d_sim(),
                got: self.meta.mlp.in_dim(),
            });
        }
        Ok(())
    }
}

/// Main-net parameters as graph values, either leaves or derived expressions.
#[derive(Clone, Debug)]
pub struct MainNetVars<'g> {
    pub image: Vec<(Var<'g>, Var<'g>)>,
    pub text: Vec<(Var<'g>, Var<'g>)>,
    pub projection: Var<'g>,
}

impl<'g> MainNetVars<'g> {
    /// Same order as [`MainNetParams::tensors`].
    pub fn flat(&self) -> Vec<&Var<'g>> {
        self.image
            .iter()
            .chain(&self.text)
            .flat_map(|(w, b)| [w, b])
            .chain(std::iter::once(&self.projection))
            .collect()
    }

    /// Rebuilds the structure from a flat list in [`Self::flat`] order.
    pub fn from_flat(&self, mut flat: Vec<Var<'g>>) -> Self {
        assert_eq!(flat.len(), self.flat().len(), "parameter count");
        let projection = flat.pop().expect("projection");
        let mut it = flat.into_iter();
        let mut take = |n: usize| -> Vec<(Var<'g>, Var<'g>)> {
            (0..n)
                .map(|_| (it.next().expect("weight"), it.next().expect("bias")))
                .collect()
        };
        let image = take(self.image.len());
        let text = take(self.text.len());
        Self {
            image,
            text,
            projection,
        }
    }

    pub fn embed_images(&self, x: &Var<'g>) -> Result<Var<'g>> {
        mlp_forward(&self.image, x, "image features")
    }

    pub fn embed_texts(&self, x: &Var<'g>) -> Result<Var<'g>> {
        mlp_forward(&self.text, x, "text features")
    }
}

#[derive(Clone, Debug)]
pub struct MetaNetVars<'g> {
    pub layers: Vec<(Var<'g>, Var<'g>)>,
}

impl<'g> MetaNetVars<'g> {
    pub fn flat(&self) -> Vec<&Var<'g>> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Scores `[k, 1]` in `(0, 1)` for `[k, d_sim]` similarity features.
    pub fn score(&self, features: &Var<'g>) -> Result<Var<'g>> {
        Ok(mlp_forward(&self.layers, features, "similarity feature")?.sigmoid()?)
    }
}

fn mlp_forward<'g>(
    layers: &[(Var<'g>, Var<'g>)],
    x: &Var<'g>,
    what: &'static str,
) -> Result<Var<'g>> {
    let expected = layers.first().map_or(0, |(w, _)| w.value().rows());
    if x.shape().len() != 2 || x.value().cols() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            got: x.shape().last().copied().unwrap_or(0),
        });
    }
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        if i > 0 {
            h = h.relu()?;
        }
        h = h.matmul(w)?.add(b)?;
    }
    Ok(h)
}

/// Unit similarity features for row-aligned embeddings `u[k]`, `v[k]`.
///
/// Fails if any projected vector has norm at or below [`SIMILARITY_EPS`].
pub fn similarity_features<'g>(u: &Var<'g>, v: &Var<'g>, projection: &Var<'g>) -> Result<Var<'g>> {
    let (features, degenerate) = similarity_features_lenient(u, v, projection)?;
    if let Some(&(_, norm)) = degenerate.first() {
        return Err(Error::DegenerateSimilarity { norm });
    }
    Ok(features)
}

/// Like [`similarity_features`], but degenerate rows are reported (row, norm)
/// and normalized by 1 instead of failing.
pub fn similarity_features_lenient<'g>(
    u: &Var<'g>,
    v: &Var<'g>,
    projection: &Var<'g>,
) -> Result<(Var<'g>, Vec<(usize, f64)>)> {
    let d_emb = projection.value().rows();
    for (what, e) in [("embedding u", u), ("embedding v", v)] {
        if e.value().cols() != d_emb {
            return Err(Error::Dimension {
                what,
                expected: d_emb,
                got: e.value().cols(),
            });
        }
    }
    let projected = u.sub(v)?.square()?.matmul(projection)?;
    let norms = projected.l2_norm()?;
    let degenerate: Vec<(usize, f64)> = norms
        .value()
        .data()
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, n)| n <= SIMILARITY_EPS)
        .collect();
    let norms = if degenerate.is_empty() {
        norms
    } else {
        let fix = Tensor::matrix(
            norms.value().rows(),
            1,
            norms
                .value()
                .data()
                .iter()
                .map(|&n| if n <= SIMILARITY_EPS { 1.0 - n } else { 0.0 })
                .collect(),
        );
        norms.add(&norms.graph().constant(fix))?
    };
    Ok((projected.div(&norms)?, degenerate))
}

/// Scores for row-aligned image/text feature batches: `[k, 1]`.
pub fn pair_scores<'g>(
    main: &MainNetVars<'g>,
    meta: &MetaNetVars<'g>,
    images: &Var<'g>,
    texts: &Var<'g>,
) -> Result<Var<'g>> {
    let u = main.embed_images(images)?;
    let v = main.embed_texts(texts)?;
    meta.score(&similarity_features(&u, &v, &main.projection)?)
}

/// All `n_img x n_txt` scores between image and text embeddings; entry
/// `(i, j)` scores image `i` against text `j`.
pub fn all_pair_scores<'g>(
    main: &MainNetVars<'g>,
    meta: &MetaNetVars<'g>,
    image_emb: &Var<'g>,
    text_emb: &Var<'g>,
) -> Result<Var<'g>> {
    let (ni, nt) = (image_emb.value().rows(), text_emb.value().rows());
    let img_idx: Vec<usize> = (0..ni).flat_map(|i| std::iter::repeat_n(i, nt)).collect();
    let txt_idx: Vec<usize> = (0..ni).flat_map(|_| 0..nt).collect();
    let u = image_emb.gather_rows(Rc::new(img_idx))?;
    let v = text_emb.gather_rows(Rc::new(txt_idx))?;
    let s = meta.score(&similarity_features(&u, &v, &main.projection)?)?;
    Ok(s.reshape(vec![ni, nt])?)
}

/// Forward-only score of one image/text feature pair.
pub fn pair_score(net: &Network, image: &[f64], text: &[f64]) -> Result<f64> {
    let g = Graph::inference();
    let main = net.main.bind(&g);
    let meta = net.meta.bind(&g);
    let i = g.constant(Tensor::row(image.to_vec()));
    let t = g.constant(Tensor::row(text.to_vec()));
    Ok(pair_scores(&main, &meta, &i, &t)?.item())
}
