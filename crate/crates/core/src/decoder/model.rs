use rand::Rng;

use super::config::DecoderConfig;
use super::extract::PointExtractor;
use super::heads::{ClassHead, RawPrediction};
use super::mix::InstanceMixer;
use super::points::{init_points, point_bounds, refine_points_tape, PointFfn};
use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seqblocks::{Dense, MambaMhsa};

/// Decoder state between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    /// `N_q × N_s` timestamps in feature steps.
    pub points: Tensor,
    /// `N_q × D`.
    pub vectors: Tensor,
}

/// Tape handles of one layer's outputs.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub points: Var,
    pub queries: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub interact: MambaMhsa,
    pub extract: PointExtractor,
    pub mix: InstanceMixer,
    pub offsets: Dense,
    pub point_ffn: PointFfn,
    pub head: ClassHead,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            interact: MambaMhsa::new(store, &format!("{prefix}.interact"), d, &cfg.mamba, rng)?,
            extract: PointExtractor::new(store, &format!("{prefix}.extract"), d, rng)?,
            mix: InstanceMixer::new(store, &format!("{prefix}.mix"), cfg.num_points, d, cfg.d_mix(), rng)?,
            offsets: Dense::new(store, &format!("{prefix}.point_offsets"), d, cfg.num_points, rng)?,
            point_ffn: PointFfn::new(store, &format!("{prefix}.point_ffn"), cfg.num_points, rng)?,
            head: ClassHead::new(store, &format!("{prefix}.cls"), d, cfg.num_classes, rng)?,
        })
    }

    /// Mamba-MHSA, point extraction, instance mixing, offset prediction,
    /// refinement and the point FFN, then classification of the new queries.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        points: Var,
        queries: Var,
    ) -> Result<LayerOutput> {
        let t_len = tape.value(features).rows();
        let (lo, hi) = point_bounds(t_len);
        let q = self.interact.forward(tape, store, queries)?;
        let samples = self.extract.forward(tape, store, features, points, q)?;
        let q = self.mix.forward(tape, store, samples, q)?;
        let delta = self.offsets.forward(tape, store, q)?;
        let p = refine_points_tape(tape, points, delta)?;
        let p = tape.clamp(p, lo, hi);
        let p = self.point_ffn.forward(tape, store, p, t_len)?;
        let p = tape.clamp(p, lo, hi);
        let logits = self.head.forward(tape, store, q)?;
        Ok(LayerOutput { points: p, queries: q, logits })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub input: Dense,
    pub query_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input = Dense::new(store, "input", cfg.d_in, cfg.d_model, rng)?;
        let query_embed = store.add("query_embed", init::normal(rng, &[cfg.num_queries, cfg.d_model], 1.0))?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("layer{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), input, query_embed, layers })
    }

    pub fn init_queries(&self, store: &ParamStore, t_len: usize) -> Result<QueryState> {
        Ok(QueryState {
            points: init_points(self.cfg.num_queries, self.cfg.num_points, t_len, self.cfg.init_spread)?,
            vectors: store.value(self.query_embed).clone(),
        })
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.cfg.d_in {
            return Err(Error::ShapeMismatch {
                op: "decoder input",
                left: features.shape().to_vec(),
                right: vec![self.cfg.d_in],
            });
        }
        Ok(())
    }

    /// Runs all layers on `features` (`T' × D_in`), one output per layer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Vec<LayerOutput>> {
        self.check_features(tape.value(features))?;
        let state = self.init_queries(store, tape.value(features).rows())?;
        let feats = self.input.forward(tape, store, features)?;
        let mut points = tape.constant(state.points);
        let mut queries = tape.param(store, self.query_embed);
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let o = layer.forward(tape, store, feats, points, queries)?;
            points = o.points;
            queries = o.queries;
            outs.push(o);
        }
        Ok(outs)
    }

    /// Inference-only forward returning every layer's prediction.
    pub fn predict(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<RawPrediction>> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let outs = self.forward(&mut tape, store, f)?;
        let preds: Vec<RawPrediction> = outs
            .iter()
            .enumerate()
            .map(|(l, o)| RawPrediction {
                points: tape.value(o.points).clone(),
                class_logits: tape.value(o.logits).clone(),
                layer_index: l,
            })
            .collect();
        if let Some(p) = preds.iter().find(|p| !p.points.is_finite() || !p.class_logits.is_finite()) {
            return Err(Error::NonFinite(format!("decoder layer {}", p.layer_index)));
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, layer_norm, GradCheckConfig, LAYER_NORM_EPS};
    use crate::rng::stream;

    fn tiny_config() -> DecoderConfig {
        DecoderConfig::tiny()
    }

    #[test]
    fn one_prediction_per_layer() {
        let mut rng = stream(0, 0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { layers: 3, ..tiny_config() };
        let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
        let f = init::uniform(&mut rng, &[12, 5], 1.0);
        let preds = dec.predict(&store, &f).unwrap();
        assert_eq!(preds.len(), 3);
        for (l, p) in preds.iter().enumerate() {
            assert_eq!(p.layer_index, l);
            assert_eq!(p.points.shape(), &[4, 6]);
            assert_eq!(p.class_logits.shape(), &[4, 3]);
        }
        assert_eq!(preds, dec.predict(&store, &f).unwrap());
        assert!(dec.predict(&store, &init::uniform(&mut rng, &[12, 4], 1.0)).is_err());
    }

    #[test]
    fn zeroed_projections_leave_points_and_normalize_queries() {
        let mut rng = stream(1, 0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { layers: 1, ..tiny_config() };
        let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
        let layer = &dec.layers[0];
        let mut zero = vec![layer.mix.out.weight, layer.mix.out.bias, layer.offsets.weight, layer.offsets.bias];
        zero.extend(layer.interact.blocks.iter().map(|b| b.params.c));
        zero.extend([layer.interact.mhsa.output.weight, layer.interact.mhsa.output.bias]);
        for id in zero {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let f = init::uniform(&mut rng, &[16, 5], 1.0);
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let outs = dec.forward(&mut tape, &store, fv).unwrap();
        let state = dec.init_queries(&store, 16).unwrap();
        assert_eq!(tape.value(outs[0].points), &state.points);
        let d = cfg.d_model;
        let want = layer_norm(&state.vectors, LAYER_NORM_EPS, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d])).unwrap();
        let got = tape.value(outs[0].queries);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_is_manual_composition() {
        let mut rng = stream(2, 0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { layers: 1, ..tiny_config() };
        let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
        let f = init::uniform(&mut rng, &[10, 5], 1.0);
        let preds = dec.predict(&store, &f).unwrap();

        let layer = &dec.layers[0];
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let feats = dec.input.forward(&mut tape, &store, fv).unwrap();
        let state = dec.init_queries(&store, 10).unwrap();
        let p0 = tape.constant(state.points);
        let q0 = tape.constant(state.vectors);
        let q = layer.interact.forward(&mut tape, &store, q0).unwrap();
        let x = layer.extract.forward(&mut tape, &store, feats, p0, q).unwrap();
        let q = layer.mix.forward(&mut tape, &store, x, q).unwrap();
        let dt = layer.offsets.forward(&mut tape, &store, q).unwrap();
        let p = super::super::points::refine_points(tape.value(p0), tape.value(dt)).unwrap();
        let p = p.map(|v| v.clamp(-10.0, 20.0));
        let pv = tape.constant(p);
        let p = layer.point_ffn.forward(&mut tape, &store, pv, 10).unwrap();
        let logits = layer.head.forward(&mut tape, &store, q).unwrap();
        assert_eq!(&preds[0].points, tape.value(p));
        assert_eq!(&preds[0].class_logits, tape.value(logits));
    }

    #[test]
    fn full_stack_gradients() {
        let mut rng = stream(3, 0);
        let mut store = ParamStore::new();
        let cfg = tiny_config();
        let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
        let f = init::uniform(&mut rng, &[16, 5], 1.0);
        let probe_p = init::uniform(&mut rng, &[4, 6], 1.0 / 16.0);
        let probe_l = init::uniform(&mut rng, &[4, 3], 1.0);
        let report = grad_check(
            |tape, store| {
                let fv = tape.constant(f.clone());
                let outs = dec.forward(tape, store, fv)?;
                let mut total = tape.constant(Tensor::scalar(0.0));
                for o in outs {
                    let cp = tape.constant(probe_p.clone());
                    let cl = tape.constant(probe_l.clone());
                    let a = tape.mul(o.points, cp)?;
                    let b = tape.mul(o.logits, cl)?;
                    let (a, b) = (tape.sum(a), tape.sum(b));
                    total = tape.add(total, a)?;
                    total = tape.add(total, b)?;
                }
                Ok(total)
            },
            &mut store,
            &GradCheckConfig { step: 1e-2, max_coords: 24, extrapolate: true, ..GradCheckConfig::default() },
        )
        .unwrap();
        assert!(report.passed(), "{:#?}", report.worst());
    }
}
