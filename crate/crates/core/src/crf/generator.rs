use std::sync::Arc;

use rand::Rng;

use super::ops::{crf_map_var, crf_nll_var, CrfStructure};
use super::segment::{compute_similarity, segment_superpixels, SegmentMethod, Segmentation, DEFAULT_SIGMA};
use super::K;
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::nets::{Layer, LEAKY_SLOPE};
use crate::tensor::{Activation, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CrfGeneratorSpec {
    /// Superpixel patches are resized to `patch_size × patch_size`; a power of
    /// two, at least 8.
    pub patch_size: usize,
    pub superpixels: usize,
    pub method: SegmentMethod,
    pub sigma: [f64; K],
    pub base_channels: usize,
    pub beta_init: [f64; K],
    pub use_spectral_norm: bool,
    /// Weight decay on the unary network parameters.
    pub lambda1: f64,
    /// Weight decay on `beta`.
    pub lambda2: f64,
}

impl Default for CrfGeneratorSpec {
    fn default() -> Self {
        Self {
            patch_size: 32,
            superpixels: 16,
            method: SegmentMethod::Grid,
            sigma: DEFAULT_SIGMA,
            base_channels: 8,
            beta_init: [1.0, 1.0],
            use_spectral_norm: true,
            lambda1: 1e-3,
            lambda2: 1e-3,
        }
    }
}

impl CrfGeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.patch_size.is_power_of_two() || self.patch_size < 8 {
            return Err(Error::config(format!(
                "CRF patch size must be a power of two ≥ 8, got {}",
                self.patch_size
            )));
        }
        if self.base_channels == 0 || self.superpixels == 0 {
            return Err(Error::config("CRF channels and superpixel count must be positive"));
        }
        if self.beta_init.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::config("initial beta must be nonnegative"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("CRF regularisation weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Intermediate values of one CRF generator pass.
pub struct CrfForward {
    /// `[1, H, W]` piecewise-constant depth in `(−1, 1)`.
    pub dense: Var,
    /// Unary predictions, `[g]`.
    pub h: Var,
    pub beta: Var,
    /// MAP node depths, `[g]`.
    pub y_star: Var,
    pub structure: Arc<CrfStructure>,
    pub segmentation: Arc<Segmentation>,
}

/// Unary CNN on superpixel patches, joined by a continuous CRF.
#[derive(Clone, Debug)]
pub struct CrfGenerator {
    pub spec: CrfGeneratorSpec,
    pub store: ParamStore,
    pub convs: Vec<Layer>,
    pub head: Layer,
    pub beta: ParamId,
}

impl CrfGenerator {
    pub fn new(spec: CrfGeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let stages = (spec.patch_size / 4).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(stages);
        let mut in_ch = 3;
        for i in 0..stages {
            let out = spec.base_channels << i.min(3);
            convs.push(Layer::conv(&mut store, &format!("unary{i}"), in_ch, out, 4, 2, 1, spec.use_spectral_norm, rng)?);
            in_ch = out;
        }
        let head = Layer::linear(&mut store, "unary_head", in_ch * 16, 1, spec.use_spectral_norm, rng)?;
        let beta = store.add("crf.beta", Tensor::new(&[K], spec.beta_init.to_vec())?)?;
        Ok(Self { spec, store, convs, head, beta })
    }

    /// Unary depth in `(−1, 1)` for one `[3, P, P]` patch.
    fn unary(&self, g: &mut Graph, patch: Var, frozen: bool) -> Result<Var> {
        let mut x = patch;
        for layer in &self.convs {
            x = layer.forward(g, &self.store, x, frozen)?;
            x = g.activation(x, Activation::LeakyRelu(LEAKY_SLOPE))?;
        }
        let y = self.head.forward(g, &self.store, x, frozen)?;
        g.activation(y, Activation::Tanh)
    }

    /// Bounding box of each superpixel cut from `rgb` and resized to the patch
    /// size.
    pub fn patches(&self, rgb: &Tensor, seg: &Segmentation) -> Result<Vec<Tensor>> {
        let (c, h, w) = rgb.dims3()?;
        let p = self.spec.patch_size;
        (0..seg.nodes())
            .map(|i| {
                let (top, left, bottom, right) = seg.bounding_box(i);
                let (bh, bw) = (bottom - top + 1, right - left + 1);
                let mut crop = Vec::with_capacity(c * bh * bw);
                for ch in 0..c {
                    for y in top..=bottom {
                        let row = (ch * h + y) * w;
                        crop.extend_from_slice(&rgb.data()[row + left..=row + right]);
                    }
                }
                resize_bilinear(&Tensor::new(&[c, bh, bw], crop)?, p, p)
            })
            .collect()
    }

    /// Segments the image, runs the unary CNN per superpixel, solves the CRF
    /// and broadcasts node depths back to pixels. `rgb` is normalised to
    /// `[−1, 1]`.
    pub fn forward_detailed(&self, g: &mut Graph, rgb: Var, frozen: bool) -> Result<CrfForward> {
        let image = g.value(rgb).clone();
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Dimension { op: "crf_generator", axis: "channel", expected: 3, actual: c });
        }
        let seg = segment_superpixels(&image, self.spec.superpixels, self.spec.method)?;
        let unit = image.map(|v| (v + 1.0) * 0.5);
        let similarity = compute_similarity(&unit, &seg, self.spec.sigma)?;
        let structure = Arc::new(CrfStructure {
            nodes: seg.nodes(),
            edges: seg.edges.clone(),
            similarity,
        });
        let mut unaries = Vec::with_capacity(seg.nodes());
        for patch in self.patches(&image, &seg)? {
            let pv = g.constant(patch);
            unaries.push(self.unary(g, pv, frozen)?);
        }
        let hv = g.stack(&unaries)?;
        let beta = if frozen {
            g.frozen_param(&self.store, self.beta)
        } else {
            g.param(&self.store, self.beta)
        };
        let y_star = crf_map_var(g, &structure, hv, beta)?;
        let dense = g.gather(y_star, Arc::new(seg.labels.clone()), &[1, h, w])?;
        Ok(CrfForward { dense, h: hv, beta, y_star, structure, segmentation: Arc::new(seg) })
    }

    pub fn forward(&self, g: &mut Graph, rgb: Var, frozen: bool) -> Result<Var> {
        Ok(self.forward_detailed(g, rgb, frozen)?.dense)
    }

    pub fn predict(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let y = self.forward(&mut g, x, true)?;
        Ok(g.value(y).clone())
    }

    /// Mean over superpixels of the target depth `[1, H, W]`.
    pub fn node_targets(seg: &Segmentation, depth: &Tensor) -> Vec<f64> {
        seg.node_pixels
            .iter()
            .map(|px| px.iter().map(|&p| depth.data()[p]).sum::<f64>() / px.len() as f64)
            .collect()
    }

    /// Per-node NLL of the superpixel-averaged target, divided by node count.
    pub fn nll_loss(&self, g: &mut Graph, fwd: &CrfForward, depth: &Tensor) -> Result<Var> {
        let y = Self::node_targets(&fwd.segmentation, depth);
        let n = y.len() as f64;
        let nll = crf_nll_var(g, &fwd.structure, fwd.h, fwd.beta, y)?;
        Ok(g.scale(nll, 1.0 / n))
    }

    /// `(λ₁/2)‖γ‖² + (λ₂/2)‖β‖²` on the tape.
    pub fn regularizer(&self, g: &mut Graph) -> Result<Var> {
        let mut total: Option<Var> = None;
        for id in self.store.ids() {
            let lambda = if id == self.beta { self.spec.lambda2 } else { self.spec.lambda1 };
            let p = g.param(&self.store, id);
            let sq = g.sum_squares(p);
            let term = g.scale(sq, 0.5 * lambda);
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("store holds beta"))
    }

    pub fn beta_values(&self) -> [f64; K] {
        let b = self.store.value(self.beta).data();
        [b[0], b[1]]
    }

    /// Clips `beta` at zero; call after every optimiser step.
    pub fn project_beta(&mut self) {
        super::project_beta(self.store.get_mut(self.beta).value.data_mut());
    }

    pub fn advance_spectral(&mut self) -> Result<()> {
        for l in self.convs.iter_mut().chain(std::iter::once(&mut self.head)) {
            l.advance_spectral(&self.store)?;
        }
        Ok(())
    }
}
