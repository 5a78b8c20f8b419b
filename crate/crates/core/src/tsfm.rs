//! Text-guided semantic fusion.
//!
//! The semantic (SF), depth-prior (DF) and multi-view (MF) streams are
//! aligned to a common grid and width, refined by cascaded spatial/channel
//! aggregation groups, mixed with softmax weights routed from the sentence
//! embedding, then refined by window cross-attention against the aggregated
//! DF and SF streams and a content-guided gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    bilinear_resize, conv_layer, gelu_map, mlp, norm_layer, sigmoid, softmax, window_attention, ConvOpts, LayerSpec,
    ParamStore, WindowAttention,
};
use crate::providers::SentenceEmbedding;
use crate::tensor::{FeatureRole, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsfmConfig {
    /// Common fused width.
    pub channels: usize,
    /// Cascaded SA/CA aggregation groups per stream.
    pub groups: usize,
    pub window: usize,
    pub heads: usize,
    pub routing_hidden: usize,
}

impl Default for TsfmConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            groups: 2,
            window: 8,
            heads: 1,
            routing_hidden: 128,
        }
    }
}

/// Input streams, in routing-output order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Semantic,
    Depth,
    MultiView,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Semantic, Stream::Depth, Stream::MultiView];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Semantic => "sf",
            Stream::Depth => "df",
            Stream::MultiView => "mf",
        }
    }
}

/// Channel counts of the raw SF, DF and MF inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceChannels {
    pub semantic: usize,
    pub depth: usize,
    pub multi_view: usize,
}

impl SourceChannels {
    fn of(&self, s: Stream) -> usize {
        match s {
            Stream::Semantic => self.semantic,
            Stream::Depth => self.depth,
            Stream::MultiView => self.multi_view,
        }
    }
}

pub fn layers(cfg: &TsfmConfig, src: SourceChannels, sentence_dim: usize) -> Vec<LayerSpec> {
    let c = cfg.channels;
    let mut out = Vec::new();
    for s in Stream::ALL {
        let t = s.tag();
        let sc = src.of(s);
        out.push(LayerSpec::conv(format!("tsfm.align.{t}.inner.conv1"), sc, sc, 3));
        out.push(LayerSpec::conv(format!("tsfm.align.{t}.inner.conv2"), sc, sc, 3));
        out.push(LayerSpec::conv(format!("tsfm.align.{t}.outer.conv1"), sc, c, 3));
        out.push(LayerSpec::conv(format!("tsfm.align.{t}.outer.conv2"), c, c, 3));
        for g in 0..cfg.groups {
            let p = format!("tsfm.agg.{t}.g{g}");
            out.push(LayerSpec::norm(format!("{p}.sa.norm"), c));
            out.push(LayerSpec::conv(format!("{p}.sa.gate"), c, c, 1));
            out.push(LayerSpec::depthwise(format!("{p}.sa.dw3"), c, 3));
            out.push(LayerSpec::depthwise(format!("{p}.sa.dw5"), c, 5));
            out.push(LayerSpec::conv(format!("{p}.sa.out"), c, c, 1));
            out.push(LayerSpec::norm(format!("{p}.ca.norm"), c));
            out.push(LayerSpec::conv(format!("{p}.ca.expand"), c, 2 * c, 1));
            out.push(LayerSpec::scale(format!("{p}.ca.gain"), 2 * c));
            out.push(LayerSpec::conv(format!("{p}.ca.out"), 2 * c, c, 1));
        }
    }
    out.push(LayerSpec::linear("tsfm.route.m1", sentence_dim, cfg.routing_hidden));
    out.push(LayerSpec::linear("tsfm.route.m2", cfg.routing_hidden, 3));
    for b in ["d", "s"] {
        for dir in ["tf_to_x", "x_to_tf"] {
            for proj in ["q", "k", "v"] {
                out.push(LayerSpec::linear(format!("tsfm.refine.{b}.{dir}.{proj}"), c, c));
            }
        }
        out.push(LayerSpec::conv(format!("tsfm.refine.{b}.fc"), 2 * c, c, 1));
    }
    out.push(LayerSpec::conv("tsfm.refine.gate.conv1", 2 * c, c, 1));
    out.push(LayerSpec::conv("tsfm.refine.gate.conv2", c, 1, 1));
    out.push(LayerSpec::conv("tsfm.refine.proj.conv1", 3 * c, c, 3));
    out.push(LayerSpec::conv("tsfm.refine.proj.conv2", c, c, 3));
    out
}

/// Two 3x3 convolutions with GELU between.
fn projector(x: &Tensor3, store: &ParamStore, prefix: &str) -> Result<Tensor3> {
    let h = gelu_map(&conv_layer(x, store, &format!("{prefix}.conv1"), ConvOpts::FEATURE)?);
    conv_layer(&h, store, &format!("{prefix}.conv2"), ConvOpts::FEATURE)
}

/// `P_outer(Down(X) + Down(P_inner(X)))` with `Down` a bilinear resize to the target grid.
pub fn align(feature: &Tensor3, store: &ParamStore, stream: Stream, target_h: usize, target_w: usize) -> Result<Tensor3> {
    let t = stream.tag();
    let inner = projector(feature, store, &format!("tsfm.align.{t}.inner"))?;
    let down = bilinear_resize(feature, target_h, target_w)?;
    let down_inner = bilinear_resize(&inner, target_h, target_w)?;
    projector(&down.add(&down_inner)?, store, &format!("tsfm.align.{t}.outer"))
}

/// Spatial aggregation: gated context from summed depthwise 3x3 and dilated 5x5 convolutions.
pub fn spatial_aggregation(x: &Tensor3, store: &ParamStore, prefix: &str) -> Result<Tensor3> {
    let c = x.channels();
    let n = norm_layer(x, store, &format!("{prefix}.norm"))?;
    let gate = gelu_map(&conv_layer(&n, store, &format!("{prefix}.gate"), ConvOpts::FEATURE)?);
    let local = conv_layer(&n, store, &format!("{prefix}.dw3"), ConvOpts::depthwise(c, 1))?;
    let wide = conv_layer(&n, store, &format!("{prefix}.dw5"), ConvOpts::depthwise(c, 2))?;
    let ctx = local.add(&wide)?;
    let mixed = gate.zip_map(&ctx, |a, b| a * b)?;
    x.add(&conv_layer(&mixed, store, &format!("{prefix}.out"), ConvOpts::FEATURE)?)
}

/// Channel aggregation: expand by two, GELU, per-channel gain, project back.
pub fn channel_aggregation(x: &Tensor3, store: &ParamStore, prefix: &str) -> Result<Tensor3> {
    let n = norm_layer(x, store, &format!("{prefix}.norm"))?;
    let mut e = gelu_map(&conv_layer(&n, store, &format!("{prefix}.expand"), ConvOpts::FEATURE)?);
    let gain = &store.get(&format!("{prefix}.gain.scale"))?.data;
    if gain.len() != e.channels() {
        return Err(Error::shape(format!("channel gain {} vs {}", gain.len(), e.channels())));
    }
    let plane = e.plane_len();
    for (ch, chunk) in e.data_mut().chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= gain[ch]);
    }
    x.add(&conv_layer(&e, store, &format!("{prefix}.out"), ConvOpts::FEATURE)?)
}

/// `groups` cascaded SA -> CA stages.
pub fn aggregate(x: &Tensor3, store: &ParamStore, stream: Stream, groups: usize) -> Result<Tensor3> {
    let mut y = x.clone();
    for g in 0..groups {
        let p = format!("tsfm.agg.{}.g{g}", stream.tag());
        y = spatial_aggregation(&y, store, &format!("{p}.sa"))?;
        y = channel_aggregation(&y, store, &format!("{p}.ca"))?;
    }
    Ok(y)
}

/// Convex weights over (SF, DF, MF).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub w_sf: f64,
    pub w_df: f64,
    pub w_mf: f64,
}

impl FusionWeights {
    pub const UNIFORM: FusionWeights = FusionWeights {
        w_sf: 1.0 / 3.0,
        w_df: 1.0 / 3.0,
        w_mf: 1.0 / 3.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_sf, self.w_df, self.w_mf]
    }
}

/// `softmax(M2(GELU(M1(s))))`.
pub fn route_weights(s: &SentenceEmbedding, store: &ParamStore) -> Result<FusionWeights> {
    let logits = mlp(&s.values, store, "tsfm.route.m1", "tsfm.route.m2")?;
    if logits.len() != 3 {
        return Err(Error::shape(format!("routing MLP emits {} logits, expected 3", logits.len())));
    }
    let p = softmax(&logits);
    Ok(FusionWeights {
        w_sf: p[0],
        w_df: p[1],
        w_mf: p[2],
    })
}

/// `TF = w_sf * SF2 + w_df * DF2 + w_mf * MF2`.
pub fn fuse(sf2: &Tensor3, df2: &Tensor3, mf2: &Tensor3, w: FusionWeights) -> Result<Tensor3> {
    sf2.ensure_same_dims(df2, "fuse")?;
    sf2.ensure_same_dims(mf2, "fuse")?;
    let data = sf2
        .data()
        .iter()
        .zip(df2.data())
        .zip(mf2.data())
        .map(|((s, d), m)| w.w_sf * s + w.w_df * d + w.w_mf * m)
        .collect();
    Tensor3::from_vec(sf2.channels(), sf2.height(), sf2.width(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub bf_d: Tensor3,
    pub bf_s: Tensor3,
    pub bf_c: Tensor3,
    pub rf: Tensor3,
}

fn cross_branch(tf: &Tensor3, other: &Tensor3, store: &ParamStore, branch: &str, cfg: &TsfmConfig) -> Result<Tensor3> {
    let p_fwd = format!("tsfm.refine.{branch}.tf_to_x");
    let p_bwd = format!("tsfm.refine.{branch}.x_to_tf");
    let attn = |prefix| WindowAttention {
        store,
        prefix,
        window: cfg.window,
        heads: cfg.heads,
    };
    let fwd = window_attention(tf, other, attn(&p_fwd))?;
    let bwd = window_attention(other, tf, attn(&p_bwd))?;
    conv_layer(&Tensor3::concat(&[&fwd, &bwd])?, store, &format!("tsfm.refine.{branch}.fc"), ConvOpts::FEATURE)
}

/// Spatial gate `sigmoid(conv(GELU(conv(cat(bf_d, bf_s)))))`, one channel.
pub fn content_gate(bf_d: &Tensor3, bf_s: &Tensor3, store: &ParamStore) -> Result<Tensor3> {
    let cat = Tensor3::concat(&[bf_d, bf_s])?;
    let h = gelu_map(&conv_layer(&cat, store, "tsfm.refine.gate.conv1", ConvOpts::FEATURE)?);
    let g = conv_layer(&h, store, "tsfm.refine.gate.conv2", ConvOpts::FEATURE)?;
    if g.channels() != 1 {
        return Err(Error::shape("content gate must have a single channel"));
    }
    Ok(g.map(sigmoid))
}

pub fn refine(tf: &Tensor3, df2: &Tensor3, sf2: &Tensor3, store: &ParamStore, cfg: &TsfmConfig) -> Result<Refined> {
    tf.ensure_same_dims(df2, "refine")?;
    tf.ensure_same_dims(sf2, "refine")?;
    let bf_d = cross_branch(tf, df2, store, "d", cfg)?;
    let bf_s = cross_branch(tf, sf2, store, "s", cfg)?;
    let gate = content_gate(&bf_d, &bf_s, store)?;
    let plane = gate.plane_len();
    let mut bf_c = bf_d.clone();
    for (i, v) in bf_c.data_mut().iter_mut().enumerate() {
        let g = gate.data()[i % plane];
        *v = g * *v + (1.0 - g) * bf_s.data()[i];
    }
    let rf = projector(&Tensor3::concat(&[&bf_s, &bf_d, &bf_c])?, store, "tsfm.refine.proj")?;
    Ok(Refined { bf_d, bf_s, bf_c, rf })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsfmIntermediates {
    pub aligned: [Tensor3; 3],
    pub aggregated: [Tensor3; 3],
    pub weights: FusionWeights,
    pub fused: Tensor3,
    pub refined: Refined,
}

impl TsfmIntermediates {
    pub fn rf(&self) -> &Tensor3 {
        &self.refined.rf
    }

    /// Every intermediate map with its role, in pipeline order.
    pub fn maps(&self) -> Vec<(FeatureRole, &Tensor3)> {
        vec![
            (FeatureRole::AlignedSemantic, &self.aligned[0]),
            (FeatureRole::AlignedDepth, &self.aligned[1]),
            (FeatureRole::AlignedMultiView, &self.aligned[2]),
            (FeatureRole::AggregatedSemantic, &self.aggregated[0]),
            (FeatureRole::AggregatedDepth, &self.aggregated[1]),
            (FeatureRole::AggregatedMultiView, &self.aggregated[2]),
            (FeatureRole::TextFused, &self.fused),
            (FeatureRole::RefinedDepth, &self.refined.bf_d),
            (FeatureRole::RefinedSemantic, &self.refined.bf_s),
            (FeatureRole::RefinedCombined, &self.refined.bf_c),
            (FeatureRole::Refined, &self.refined.rf),
        ]
    }
}

/// Full fusion for one view, producing RF on a `target_h x target_w` grid.
pub fn run(
    sf: &Tensor3,
    df: &Tensor3,
    mf: &Tensor3,
    sentence: &SentenceEmbedding,
    store: &ParamStore,
    cfg: &TsfmConfig,
    target_h: usize,
    target_w: usize,
) -> Result<TsfmIntermediates> {
    let inputs = [sf, df, mf];
    let aligned: Vec<Tensor3> = Stream::ALL
        .iter()
        .zip(inputs)
        .map(|(&s, x)| align(x, store, s, target_h, target_w))
        .collect::<Result<_>>()?;
    let aggregated: Vec<Tensor3> = Stream::ALL
        .iter()
        .zip(&aligned)
        .map(|(&s, x)| aggregate(x, store, s, cfg.groups))
        .collect::<Result<_>>()?;
    let weights = route_weights(sentence, store)?;
    let fused = fuse(&aggregated[0], &aggregated[1], &aggregated[2], weights)?;
    let refined = refine(&fused, &aggregated[1], &aggregated[0], store, cfg)?;
    let [a0, a1, a2]: [Tensor3; 3] = aligned.try_into().expect("three streams");
    let [g0, g1, g2]: [Tensor3; 3] = aggregated.try_into().expect("three streams");
    Ok(TsfmIntermediates {
        aligned: [a0, a1, a2],
        aggregated: [g0, g1, g2],
        weights,
        fused,
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TsfmConfig {
        TsfmConfig {
            channels: 8,
            groups: 1,
            window: 4,
            heads: 2,
            routing_hidden: 16,
        }
    }

    const SRC: SourceChannels = SourceChannels {
        semantic: 6,
        depth: 5,
        multi_view: 8,
    };

    fn store(seed: u64) -> ParamStore {
        init_params(&layers(&cfg(), SRC, 12), seed).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn align_constant_input_gives_constant_output() {
        let st = store(1);
        let x = Tensor3::filled(6, 16, 16, 0.3);
        let y = align(&x, &st, Stream::Semantic, 8, 8).unwrap();
        assert_eq!(y.dims(), (8, 8, 8));
        for c in 0..8 {
            let ch = y.channel(c);
            assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_output_convs_make_aggregation_identity() {
        let mut st = store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, 8, 6, 6);
        assert_eq!(aggregate(&x, &st, Stream::Depth, 0).unwrap(), x);
        assert_ne!(aggregate(&x, &st, Stream::Depth, 1).unwrap(), x);
        st.zero_layer("tsfm.agg.df.g0.sa.out").unwrap();
        st.zero_layer("tsfm.agg.df.g0.ca.out").unwrap();
        assert_eq!(aggregate(&x, &st, Stream::Depth, 1).unwrap(), x);
    }

    #[test]
    fn zero_router_is_uniform() {
        let mut st = store(3);
        st.zero_layer("tsfm.route.m1").unwrap();
        st.zero_layer("tsfm.route.m2").unwrap();
        let s = SentenceEmbedding {
            values: vec![0.7; 12],
            view_index: 0,
        };
        let w = route_weights(&s, &st).unwrap();
        for v in w.as_array() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let bad = SentenceEmbedding {
            values: vec![0.0; 11],
            view_index: 0,
        };
        assert!(route_weights(&bad, &st).is_err());
    }

    #[test]
    fn fuse_vertex_and_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&mut rng, 3, 4, 4);
        let b = rand_t(&mut rng, 3, 4, 4);
        let c = rand_t(&mut rng, 3, 4, 4);
        let vertex = FusionWeights {
            w_sf: 1.0,
            w_df: 0.0,
            w_mf: 0.0,
        };
        assert_eq!(fuse(&a, &b, &c, vertex).unwrap(), a);
        let w = FusionWeights {
            w_sf: 0.2,
            w_df: 0.5,
            w_mf: 0.3,
        };
        let same = fuse(&a, &a, &a, w).unwrap();
        for (x, y) in same.data().iter().zip(a.data()) {
            assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.abs());
        }
        assert!(fuse(&a, &b, &Tensor3::zeros(3, 4, 5), w).is_err());
    }

    #[test]
    fn gate_limits() {
        let mut st = store(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tf = rand_t(&mut rng, 8, 8, 8);
        let df2 = rand_t(&mut rng, 8, 8, 8);
        let sf2 = rand_t(&mut rng, 8, 8, 8);
        st.zero_layer("tsfm.refine.gate.conv2").unwrap();
        let r = refine(&tf, &df2, &sf2, &st, &cfg()).unwrap();
        let half = r.bf_d.zip_map(&r.bf_s, |d, s| 0.5 * d + 0.5 * s).unwrap();
        assert_eq!(r.bf_c, half);
        st.get_mut("tsfm.refine.gate.conv2.bias").unwrap().data[0] = 50.0;
        let r = refine(&tf, &df2, &sf2, &st, &cfg()).unwrap();
        for (c, d) in r.bf_c.data().iter().zip(r.bf_d.data()) {
            assert!((c - d).abs() < 1e-6);
        }
        assert_eq!(r.rf.dims(), (8, 8, 8));
    }

    #[test]
    fn full_run_is_deterministic() {
        let st = store(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sf = rand_t(&mut rng, 6, 8, 8);
        let df = rand_t(&mut rng, 5, 4, 4);
        let mf = rand_t(&mut rng, 8, 8, 8);
        let s = SentenceEmbedding {
            values: (0..12).map(|i| (i as f64).cos()).collect(),
            view_index: 0,
        };
        let a = run(&sf, &df, &mf, &s, &st, &cfg(), 8, 8).unwrap();
        let b = run(&sf, &df, &mf, &s, &st, &cfg(), 8, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.maps().len(), 11);
        assert!(a.maps().iter().all(|(_, t)| t.dims() == (8, 8, 8) && t.is_finite()));
    }
}
