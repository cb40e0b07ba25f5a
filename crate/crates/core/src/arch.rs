//! The progressive multi-scale residual network.
//!
//! ```text
//! lr ─ fem ─ H0 ─ PMRB_1 ─ … ─ PMRB_K ─ pad ─(+H0)─ rm ─ pixel_shuffle ─ sr
//! ```
//!
//! Each PMRB runs one recursive combination stack per scale `s ∈ {3, 5, …, S}`
//! on the block input, links consecutive scales with residual additions,
//! fuses the scale outputs with a point-wise convolution, re-weights the
//! fused features with channel- and pixel-wise attention (CPA) and adds the
//! block input back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_params, ConvLayer, InitSpec, ParamStore};
use crate::tensor::{Dihedral, Real, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    Cpa,
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiScale {
    /// Recursive stacks of 3x3 convolutions.
    Combinations,
    /// One `s x s` convolution per scale (ablation baseline).
    LargeKernels,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmrnConfig {
    /// Largest scale `S`; odd and at least 3.
    pub max_scale: usize,
    /// Number of PMRBs `K`.
    pub blocks: usize,
    /// Feature width `c`.
    pub channels: usize,
    /// Upscale factor `r`.
    pub upscale: usize,
    pub attention: Attention,
    pub multiscale: MultiScale,
}

impl Default for PmrnConfig {
    fn default() -> Self {
        PmrnConfig {
            max_scale: 9,
            blocks: 8,
            channels: 64,
            upscale: 4,
            attention: Attention::Cpa,
            multiscale: MultiScale::Combinations,
        }
    }
}

impl PmrnConfig {
    pub fn with_upscale(upscale: usize) -> Self {
        PmrnConfig {
            upscale,
            ..Self::default()
        }
    }

    /// Small configuration for CPU-only training runs: c=16, K=2, S=9, x2.
    pub fn desk() -> Self {
        PmrnConfig {
            max_scale: 9,
            blocks: 2,
            channels: 16,
            upscale: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_scale < 3 || self.max_scale % 2 == 0 {
            return Err(Error::Config(format!(
                "largest scale must be odd and at least 3, got {}",
                self.max_scale
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("block count must be at least 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channel width must be at least 1".into()));
        }
        if !(2..=4).contains(&self.upscale) {
            return Err(Error::Config(format!(
                "upscale factor must be 2, 3 or 4, got {}",
                self.upscale
            )));
        }
        Ok(())
    }

    /// `3, 5, …, S`.
    pub fn scales(&self) -> impl Iterator<Item = usize> {
        (3..=self.max_scale).step_by(2)
    }

    pub fn num_scales(&self) -> usize {
        (self.max_scale - 1) / 2
    }
}

/// `Comb_s`: `(s − 1) / 2` 3x3 convolutions with a ReLU between consecutive
/// ones, so its receptive field is exactly `s`.
#[derive(Clone, Debug)]
pub struct CombStack {
    pub scale: usize,
    pub convs: Vec<ConvLayer>,
}

impl CombStack {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, scale: usize, c: usize) -> Result<Self> {
        let convs = (1..=(scale - 1) / 2)
            .map(|i| ConvLayer::register(store, format!("{prefix}.comb{scale}.conv{i}"), c, c, 3, 1))
            .collect::<Result<_>>()?;
        Ok(CombStack { scale, convs })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        let mut h = self.convs[0].forward(tape, params, x)?;
        for conv in &self.convs[1..] {
            let a = tape.relu(&h);
            h = conv.forward(tape, params, &a)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum ScaleBranch {
    Comb(CombStack),
    Large(ConvLayer),
}

impl ScaleBranch {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        match self {
            ScaleBranch::Comb(stack) => stack.forward(tape, params, x),
            ScaleBranch::Large(conv) => conv.forward(tape, params, x),
        }
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        match self {
            ScaleBranch::Comb(stack) => stack.convs.iter().collect(),
            ScaleBranch::Large(conv) => vec![conv],
        }
    }
}

/// Point-wise conv, ReLU, depth-wise 3x3 conv.
#[derive(Clone, Debug)]
pub struct FeaturePath {
    pub pconv: ConvLayer,
    pub dconv: ConvLayer,
}

impl FeaturePath {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        Ok(FeaturePath {
            pconv: ConvLayer::register(store, format!("{prefix}.pconv"), c, c, 1, 1)?,
            dconv: ConvLayer::register(store, format!("{prefix}.dconv"), c, c, 3, c)?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        let p = self.pconv.forward(tape, params, x)?;
        let a = tape.relu(&p);
        self.dconv.forward(tape, params, &a)
    }
}

/// Channel- and pixel-wise attention.
#[derive(Clone, Debug)]
pub struct CpaBlock {
    pub st: ConvLayer,
    pub beta: FeaturePath,
    pub gamma: FeaturePath,
}

/// Intermediate CPA maps, kept for visualization.
#[derive(Clone, Debug)]
pub struct CpaMaps<T: Real> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
}

impl CpaBlock {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        Ok(CpaBlock {
            st: ConvLayer::register(store, format!("{prefix}.st"), c, c, 3, 1)?,
            beta: FeaturePath::register(store, &format!("{prefix}.beta"), c)?,
            gamma: FeaturePath::register(store, &format!("{prefix}.gamma"), c)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_maps(tape, params, x)?.0)
    }

    /// Output `(F_γ + 1)·x + F_β` together with `F_γ` and `F_β`.
    pub fn forward_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var<T>],
        x: &Var<T>,
    ) -> Result<(Var<T>, CpaMaps<T>)> {
        let st = self.st.forward(tape, params, x)?;
        let beta = self.beta.forward(tape, params, &st)?;
        let pre_gamma = self.gamma.forward(tape, params, &st)?;
        let gamma = tape.sigmoid(&pre_gamma);
        let out = tape.affine_gate(x, &gamma, &beta)?;
        Ok((out, CpaMaps { gamma, beta }))
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        vec![
            &self.st,
            &self.beta.pconv,
            &self.beta.dconv,
            &self.gamma.pconv,
            &self.gamma.dconv,
        ]
    }
}

/// Per-block intermediates recorded by [`PmrnModel::forward_traced`].
#[derive(Clone, Debug)]
pub struct BlockTrace<T: Real> {
    /// `x_3, x_5, …, x_S`.
    pub scales: Vec<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Pmrb {
    pub branches: Vec<ScaleBranch>,
    pub fusion: ConvLayer,
    pub cpa: Option<CpaBlock>,
}

impl Pmrb {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &PmrnConfig) -> Result<Self> {
        let c = cfg.channels;
        let branches = cfg
            .scales()
            .map(|s| match cfg.multiscale {
                MultiScale::Combinations => CombStack::register(store, prefix, s, c).map(ScaleBranch::Comb),
                MultiScale::LargeKernels => {
                    ConvLayer::register(store, format!("{prefix}.large{s}"), c, c, s, 1).map(ScaleBranch::Large)
                }
            })
            .collect::<Result<_>>()?;
        let fusion = ConvLayer::register(store, format!("{prefix}.fusion"), c * cfg.num_scales(), c, 1, 1)?;
        let cpa = match cfg.attention {
            Attention::Cpa => Some(CpaBlock::register(store, &format!("{prefix}.cpa"), c)?),
            Attention::None => None,
        };
        Ok(Pmrb {
            branches,
            fusion,
            cpa,
        })
    }

    /// Progressive multi-scale processing: `x_3 = Comb_3(h)`,
    /// `x_s = Comb_s(h) + x_{s−2}`.
    pub fn pmp_forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], h: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut outs: Vec<Var<T>> = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let y = branch.forward(tape, params, h)?;
            let x = match outs.last() {
                Some(prev) => tape.add(&y, prev)?,
                None => y,
            };
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], h: &Var<T>) -> Result<Var<T>> {
        self.forward_traced(tape, params, h, None)
    }

    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var<T>],
        h: &Var<T>,
        trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Var<T>> {
        let scales = self.pmp_forward(tape, params, h)?;
        let refs: Vec<&Var<T>> = scales.iter().collect();
        let cat = tape.concat_channels(&refs)?;
        let fused = self.fusion.forward(tape, params, &cat)?;
        let (mff, maps) = match &self.cpa {
            Some(cpa) => {
                let (out, maps) = cpa.forward_maps(tape, params, &fused)?;
                (out, Some(maps))
            }
            None => (fused, None),
        };
        if let Some(trace) = trace {
            trace.push(BlockTrace {
                scales: scales.iter().map(|v| v.value().clone()).collect(),
                gamma: maps.as_ref().map(|m| m.gamma.value().clone()),
                beta: maps.as_ref().map(|m| m.beta.value().clone()),
            });
        }
        tape.add(&mff, h)
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut out: Vec<&ConvLayer> = self.branches.iter().flat_map(ScaleBranch::layers).collect();
        out.push(&self.fusion);
        if let Some(cpa) = &self.cpa {
            out.extend(cpa.layers());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PmrnModel {
    pub config: PmrnConfig,
    pub fem: ConvLayer,
    pub body: Vec<Pmrb>,
    pub pad: [ConvLayer; 2],
    pub rm: [ConvLayer; 2],
}

impl PmrnModel {
    /// Registers all parameters (zero-filled) in forward order.
    pub fn new<T: Real>(config: PmrnConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let r = config.upscale;
        let fem = ConvLayer::register(store, "fem", 3, c, 3, 1)?;
        let body = (1..=config.blocks)
            .map(|k| Pmrb::register(store, &format!("body.block{k}"), &config))
            .collect::<Result<_>>()?;
        let pad = [
            ConvLayer::register(store, "pad.conv1", c, c, 3, 1)?,
            ConvLayer::register(store, "pad.conv2", c, c, 3, 1)?,
        ];
        let rm = [
            ConvLayer::register(store, "rm.conv1", c, c, 3, 1)?,
            ConvLayer::register(store, "rm.conv2", c, 3 * r * r, 3, 1)?,
        ];
        Ok(PmrnModel {
            config,
            fem,
            body,
            pad,
            rm,
        })
    }

    /// Builds the model and a freshly initialized `f32` parameter store.
    pub fn initialized(config: PmrnConfig, init: &InitSpec) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store)?;
        init_params(&mut store, init);
        Ok((model, store))
    }

    /// All convolutions in forward order.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut out = vec![&self.fem];
        for b in &self.body {
            out.extend(b.layers());
        }
        out.extend(self.pad.iter());
        out.extend(self.rm.iter());
        out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], lr: &Var<T>) -> Result<Var<T>> {
        self.forward_traced(tape, params, lr, None)
    }

    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var<T>],
        lr: &Var<T>,
        mut trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Var<T>> {
        if lr.shape().c != 3 {
            return Err(Error::shape(
                "pmrn_forward",
                "c",
                format!("expected a 3-channel image, got {}", lr.shape()),
            ));
        }
        let h0 = self.fem.forward(tape, params, lr)?;
        let mut h = h0.clone();
        for block in &self.body {
            h = block.forward_traced(tape, params, &h, trace.as_deref_mut())?;
        }
        let p = self.pad[0].forward(tape, params, &h)?;
        let p = tape.relu(&p);
        let p = self.pad[1].forward(tape, params, &p)?;
        let h_out = tape.add(&p, &h0)?;
        let y = self.rm[0].forward(tape, params, &h_out)?;
        let y = self.rm[1].forward(tape, params, &y)?;
        tape.pixel_shuffle(&y, self.config.upscale)
    }

    /// Forward pass without recording gradients.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let params = store.bind(&mut tape);
        let x = tape.constant(lr.clone());
        Ok(self.forward(&mut tape, &params, &x)?.into_tensor())
    }

    /// Mean of the outputs over the eight dihedral transforms of the input.
    pub fn infer_ensemble<T: Real>(&self, store: &ParamStore<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self_ensemble(lr, |x| self.infer(store, x))
    }

    pub fn trace<T: Real>(&self, store: &ParamStore<T>, lr: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockTrace<T>>)> {
        let mut tape = Tape::inference();
        let params = store.bind(&mut tape);
        let x = tape.constant(lr.clone());
        let mut trace = Vec::with_capacity(self.body.len());
        let y = self.forward_traced(&mut tape, &params, &x, Some(&mut trace))?;
        Ok((y.into_tensor(), trace))
    }
}

/// Runs `f` once per dihedral transform of `x`, maps each output back, and
/// averages.
pub fn self_ensemble<T, F>(x: &Tensor<T>, f: F) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let outs = Dihedral::all()
        .par_iter()
        .map(|d| f(&d.apply(x)).map(|y| d.invert(&y)))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = outs[0].clone();
    for y in &outs[1..] {
        if y.shape() != acc.shape() {
            return Err(Error::shape(
                "self_ensemble",
                "output",
                format!("{} vs {}", y.shape(), acc.shape()),
            ));
        }
        acc.add_assign(y);
    }
    Ok(acc.scale(T::one() / T::from_usize(outs.len()).unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn small(attention: Attention) -> PmrnConfig {
        PmrnConfig {
            max_scale: 7,
            blocks: 2,
            channels: 4,
            upscale: 2,
            attention,
            multiscale: MultiScale::Combinations,
        }
    }

    #[test]
    fn config_validation() {
        assert!(PmrnConfig::default().validate().is_ok());
        for bad in [
            PmrnConfig { max_scale: 8, ..Default::default() },
            PmrnConfig { max_scale: 1, ..Default::default() },
            PmrnConfig { blocks: 0, ..Default::default() },
            PmrnConfig { upscale: 5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert_eq!(PmrnConfig::default().scales().collect::<Vec<_>>(), vec![3, 5, 7, 9]);
    }

    #[test]
    fn comb_stack_depths() {
        let mut store = ParamStore::<f32>::new();
        let model = PmrnModel::new(PmrnConfig::default(), &mut store).unwrap();
        let depths: Vec<usize> = model.body[0]
            .branches
            .iter()
            .map(|b| match b {
                ScaleBranch::Comb(s) => s.convs.len(),
                ScaleBranch::Large(_) => 0,
            })
            .collect();
        assert_eq!(depths, vec![1, 2, 3, 4]);
        assert_eq!(depths.iter().sum::<usize>(), 10);
        assert!(store.by_name("body.block8.comb9.conv4.weight").is_some());
        assert!(store.by_name("body.block1.cpa.gamma.dconv.weight").is_some());
    }

    #[test]
    fn shapes_for_odd_sizes() {
        for cfg in [small(Attention::Cpa), small(Attention::None)] {
            let (model, store) = PmrnModel::initialized(cfg, &InitSpec::with_seed(5)).unwrap();
            let x = Tensor::full(Shape::new(1, 3, 9, 11), 0.5f32);
            assert_eq!(model.infer(&store, &x).unwrap().shape(), Shape::new(1, 3, 18, 22));
            let mut tape = Tape::inference();
            let params = store.bind(&mut tape);
            let h = tape.constant(Tensor::full(Shape::new(1, 4, 7, 9), 0.1f32));
            assert_eq!(model.body[0].forward(&mut tape, &params, &h).unwrap().shape(), h.shape());
        }
    }

    #[test]
    fn rejects_non_rgb_input() {
        let (model, store) = PmrnModel::initialized(small(Attention::Cpa), &InitSpec::with_seed(5)).unwrap();
        let x = Tensor::full(Shape::new(1, 1, 8, 8), 0.5f32);
        assert!(model.infer(&store, &x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, store) = PmrnModel::initialized(small(Attention::Cpa), &InitSpec::with_seed(9)).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        let a = model.infer(&store, &x).unwrap();
        let b = model.infer(&store, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn ensemble_of_constant_is_constant() {
        let x = Tensor::from_fn(Shape::new(1, 3, 4, 6), |_, c, y, x| (c + y + x) as f64);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let y = self_ensemble(&x, |t| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(Tensor::full(t.shape(), 0.25))
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 8);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(y.shape(), x.shape());
    }
}
