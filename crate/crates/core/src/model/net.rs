use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionOverrides;
use super::config::ModelConfig;
use super::features::{
    decoder_rows, encoder_rows, position_encoding, Normalization, DECODER_FEATURES,
    ENCODER_FEATURES,
};
use super::tape::{AttnPlan, Mat, Tape, Var};
use super::train::EpochStats;
use crate::data::{RoadNetwork, SpeedPanel, WINDOW};
use crate::{Error, Result};

/// Dense parameter matrix.
pub type ParamTensor = Array2<f64>;

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncoderIdx {
    sq: usize,
    sk: usize,
    ssent: usize,
    sv: usize,
    so: usize,
    temporal: AttnIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct DecoderIdx {
    causal: AttnIdx,
    cq: usize,
    ck: usize,
    co: usize,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_in_w: usize,
    enc_in_b: usize,
    dec_in_w: usize,
    dec_in_b: usize,
    encoders: Vec<EncoderIdx>,
    decoders: Vec<DecoderIdx>,
    out_w: usize,
    out_b: usize,
}

struct LayoutBuilder {
    shapes: Vec<(String, usize, usize)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.shapes.push((name, rows, cols));
        self.shapes.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{prefix}.wq"), d, d),
            wk: self.add(format!("{prefix}.wk"), d, d),
            wv: self.add(format!("{prefix}.wv"), d, d),
            wo: self.add(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), d, hidden),
            b1: self.add(format!("{prefix}.b1"), 1, hidden),
            w2: self.add(format!("{prefix}.w2"), hidden, d),
            b2: self.add(format!("{prefix}.b2"), 1, d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, usize, usize)>) {
    let d = cfg.width;
    let mut b = LayoutBuilder { shapes: Vec::new() };
    let enc_in_w = b.add("embed.enc.w".into(), ENCODER_FEATURES, d);
    let enc_in_b = b.add("embed.enc.b".into(), 1, d);
    let dec_in_w = b.add("embed.dec.w".into(), DECODER_FEATURES, d);
    let dec_in_b = b.add("embed.dec.b".into(), 1, d);
    let encoders = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("enc{l}");
            EncoderIdx {
                sq: b.add(format!("{p}.spatial.wq"), d, d),
                sk: b.add(format!("{p}.spatial.wk"), d, d),
                ssent: b.add(format!("{p}.spatial.wsentinel"), d, d),
                sv: b.add(format!("{p}.spatial.wv"), d, d),
                so: b.add(format!("{p}.spatial.wo"), d, d),
                temporal: b.attn(&format!("{p}.temporal"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ffn_width),
            }
        })
        .collect();
    let decoders = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("dec{l}");
            DecoderIdx {
                causal: b.attn(&format!("{p}.causal"), d),
                cq: b.add(format!("{p}.cross.wq"), d, d),
                ck: b.add(format!("{p}.cross.wk"), d, d),
                co: b.add(format!("{p}.cross.wo"), d, d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ffn_width),
            }
        })
        .collect();
    let out_w = b.add("out.w".into(), d, 1);
    let out_b = b.add("out.b".into(), 1, 1);
    (
        Layout {
            enc_in_w,
            enc_in_b,
            dec_in_w,
            dec_in_b,
            encoders,
            decoders,
            out_w,
            out_b,
        },
        b.shapes,
    )
}

/// Inputs for a batch of windows, rows ordered (window, road, step).
pub(crate) struct Batch {
    pub windows: usize,
    pub enc: Mat,
    pub dec: Mat,
}

/// Tape and handles of one forward pass.
pub(crate) struct Forward {
    pub tape: Tape,
    pub pred: Var,
    pub enc_spatial: Vec<Var>,
    pub enc_temporal: Vec<Var>,
    pub dec_causal: Vec<Var>,
    pub cross: Vec<Var>,
    pub spatial_plan: Arc<AttnPlan>,
    pub causal_plan: Arc<AttnPlan>,
    pub windows: usize,
    pub roads: usize,
}

/// Trained (or freshly initialised) forecaster.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelState {
    pub(crate) config: ModelConfig,
    pub(crate) network: RoadNetwork,
    pub(crate) norm: Normalization,
    pub(crate) param_names: Vec<String>,
    pub(crate) params: Vec<ParamTensor>,
    pub(crate) trained: bool,
    pub(crate) history: Vec<EpochStats>,
    #[serde(skip)]
    layout: Option<Layout>,
}

impl ModelState {
    /// Fresh parameters for `network`, seeded from `config.seed`.
    pub fn init(network: RoadNetwork, norm: Normalization, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if norm.mean.len() != network.len() || norm.std.len() != network.len() {
            return Err(Error::invalid("normalisation statistics do not match the road count"));
        }
        let (layout, shapes) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(shapes.len());
        let mut names = Vec::with_capacity(shapes.len());
        for (name, r, c) in shapes {
            let p = if r == 1 && name.contains(".b") {
                Array2::zeros((r, c))
            } else {
                let gain = if name.starts_with("out.") { 0.1 } else { 1.0 };
                let limit = gain * (6.0 / (r + c) as f64).sqrt();
                Array2::from_shape_fn((r, c), |_| rng.random_range(-limit..limit))
            };
            params.push(p);
            names.push(name);
        }
        Ok(ModelState {
            config,
            network,
            norm,
            param_names: names,
            params,
            trained: false,
            history: Vec::new(),
            layout: Some(layout),
        })
    }

    /// Rebuild derived state after deserialisation and check parameter shapes.
    pub(crate) fn restore(mut self) -> Result<Self> {
        self.config.validate()?;
        let (layout, shapes) = build_layout(&self.config);
        if shapes.len() != self.params.len() {
            return Err(Error::invalid("parameter count does not match configuration"));
        }
        for ((name, r, c), (p, pn)) in shapes.iter().zip(self.params.iter().zip(&self.param_names)) {
            if name != pn || p.dim() != (*r, *c) {
                return Err(Error::invalid(format!("parameter {pn} has unexpected shape")));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("parameter {pn} is not finite")));
            }
        }
        self.layout = Some(layout);
        Ok(self)
    }

    fn layout(&self) -> &Layout {
        self.layout.as_ref().expect("layout initialised")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn set_params(&mut self, params: Vec<ParamTensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::invalid("parameter shapes differ"));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_roads(&self) -> usize {
        self.network.len()
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    /// Panel row of every model road, in model order.
    pub(crate) fn road_map(&self, panel: &SpeedPanel) -> Result<Vec<usize>> {
        self.network
            .roads()
            .iter()
            .map(|r| {
                panel
                    .road_index(r)
                    .ok_or_else(|| Error::UnknownRoad(r.to_string()))
            })
            .collect()
    }

    pub(crate) fn check_panel_roads(&self, panel: &SpeedPanel) -> Result<Vec<usize>> {
        for r in panel.roads() {
            if self.network.index_of(r).is_none() {
                return Err(Error::UnknownRoad(format!("{r} (not in the training graph)")));
            }
        }
        self.road_map(panel)
    }

    pub(crate) fn build_batch(&self, panel: &SpeedPanel, map: &[usize], starts: &[usize]) -> Result<Batch> {
        let n = map.len();
        let mut enc = Vec::with_capacity(starts.len() * n * WINDOW * ENCODER_FEATURES);
        let mut dec = Vec::with_capacity(starts.len() * n * WINDOW * DECODER_FEATURES);
        for &s in starts {
            encoder_rows(panel, &self.norm, map, s, &mut enc)?;
            decoder_rows(|t| (panel.slot(t), panel.weekday(t)), n, s, &mut dec);
        }
        let rows = starts.len() * n * WINDOW;
        Ok(Batch {
            windows: starts.len(),
            enc: Array2::from_shape_vec((rows, ENCODER_FEATURES), enc).expect("shape"),
            dec: Array2::from_shape_vec((rows, DECODER_FEATURES), dec).expect("shape"),
        })
    }

    /// Z-normalised targets for the 12 steps after each window.
    pub(crate) fn targets(&self, panel: &SpeedPanel, map: &[usize], starts: &[usize]) -> Result<Mat> {
        let n = map.len();
        let mut out = Vec::with_capacity(starts.len() * n * WINDOW);
        for &s in starts {
            if s + 2 * WINDOW > panel.len() {
                return Err(Error::invalid(format!("no 12-step target after window {s}")));
            }
            for (m, &p) in map.iter().enumerate() {
                for q in 0..WINDOW {
                    let v = panel.value(p, s + WINDOW + q);
                    if !v.is_finite() {
                        return Err(Error::MissingCell {
                            road: panel.roads()[p].to_string(),
                            step: s + WINDOW + q,
                        });
                    }
                    out.push(self.norm.normalize(m, v));
                }
            }
        }
        Ok(Array2::from_shape_vec((out.len(), 1), out).expect("shape"))
    }

    fn positional(&self, windows: usize, roads: usize) -> Mat {
        let d = self.config.width;
        let codes: Vec<Vec<f64>> = (0..WINDOW).map(|p| position_encoding(p, d)).collect();
        Array2::from_shape_fn((windows * roads * WINDOW, d), |(r, c)| codes[r % WINDOW][c])
    }

    fn plans(&self, windows: usize) -> (Arc<AttnPlan>, Arc<AttnPlan>, Arc<AttnPlan>) {
        let n = self.num_roads();
        let rows = windows * n * WINDOW;
        let row = |b: usize, r: usize, t: usize| (b * n + r) * WINDOW + t;
        let mut spatial = Vec::with_capacity(rows);
        let mut full = Vec::with_capacity(rows);
        let mut causal = Vec::with_capacity(rows);
        for b in 0..windows {
            for r in 0..n {
                for t in 0..WINDOW {
                    let mut keys: Vec<usize> = self
                        .network
                        .in_neighbors(r)
                        .iter()
                        .map(|&u| row(b, u, t))
                        .collect();
                    keys.push(rows + row(b, r, t));
                    spatial.push(keys);
                    full.push((0..WINDOW).map(|k| row(b, r, k)).collect());
                    causal.push((0..=t).map(|k| row(b, r, k)).collect());
                }
            }
        }
        (
            Arc::new(AttnPlan::from_lists(spatial)),
            Arc::new(AttnPlan::from_lists(full)),
            Arc::new(AttnPlan::from_lists(causal)),
        )
    }

    fn ffn(&self, tape: &mut Tape, x: Var, idx: &FfnIdx) -> Var {
        let p = &self.params;
        let w1 = tape.param(idx.w1, &p[idx.w1]);
        let b1 = tape.param(idx.b1, &p[idx.b1]);
        let w2 = tape.param(idx.w2, &p[idx.w2]);
        let b2 = tape.param(idx.b2, &p[idx.b2]);
        let h = tape.matmul(x, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.silu(h);
        let h = tape.matmul(h, w2);
        let h = tape.add_bias(h, b2);
        tape.add(x, h)
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        x: Var,
        idx: &AttnIdx,
        plan: &Arc<AttnPlan>,
    ) -> (Var, Var) {
        let p = &self.params;
        let wq = tape.param(idx.wq, &p[idx.wq]);
        let wk = tape.param(idx.wk, &p[idx.wk]);
        let wv = tape.param(idx.wv, &p[idx.wv]);
        let wo = tape.param(idx.wo, &p[idx.wo]);
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let a = tape.attention(q, k, v, plan.clone(), self.config.heads);
        let o = tape.matmul(a, wo);
        (tape.add(x, o), a)
    }

    pub(crate) fn forward(&self, batch: &Batch, overrides: Option<&AttentionOverrides>) -> Forward {
        let lay = self.layout();
        let p = &self.params;
        let heads = self.config.heads;
        let n = self.num_roads();
        let (spatial_plan, full_plan, causal_plan) = self.plans(batch.windows);
        let pos = self.positional(batch.windows, n);

        let mut tape = Tape::new();
        let enc_in = tape.leaf(batch.enc.clone());
        let w = tape.param(lay.enc_in_w, &p[lay.enc_in_w]);
        let b = tape.param(lay.enc_in_b, &p[lay.enc_in_b]);
        let x = tape.matmul(enc_in, w);
        let x = tape.add_bias(x, b);
        let pos_enc = tape.leaf(pos.clone());
        let mut x = tape.add(x, pos_enc);

        let mut enc_spatial = Vec::new();
        let mut enc_temporal = Vec::new();
        let mut spatial_values = None;
        let mut spatial_out = None;
        for idx in &lay.encoders {
            let wq = tape.param(idx.sq, &p[idx.sq]);
            let wk = tape.param(idx.sk, &p[idx.sk]);
            let ws = tape.param(idx.ssent, &p[idx.ssent]);
            let wv = tape.param(idx.sv, &p[idx.sv]);
            let wo = tape.param(idx.so, &p[idx.so]);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let ks = tape.matmul(x, ws);
            let v = tape.matmul(x, wv);
            let keys = tape.concat_rows(&[k, ks]);
            let values = tape.concat_rows(&[v, v]);
            let s = tape.attention(q, keys, values, spatial_plan.clone(), heads);
            enc_spatial.push(s);
            spatial_values = Some(v);
            spatial_out = Some(s);
            let so = tape.matmul(s, wo);
            let y = tape.add(x, so);
            let (z, ta) = self.self_attention(&mut tape, y, &idx.temporal, &full_plan);
            enc_temporal.push(ta);
            x = self.ffn(&mut tape, z, &idx.ffn);
        }
        let encoded = x;
        let spatial_values = spatial_values.expect("at least one encoder layer");
        let spatial_out = spatial_out.expect("at least one encoder layer");

        // Values for the override rows: per (window, road, step) value projection.
        let replacement = overrides.filter(|o| !o.is_empty()).map(|o| {
            let vv = tape.value(spatial_values);
            let d = vv.ncols();
            let dh = d / heads;
            let mut rows = Vec::new();
            let mut values = Vec::new();
            for (&(b, r), st) in o.iter() {
                for q in 0..WINDOW {
                    rows.push((b * n + r) * WINDOW + q);
                    let mut out = vec![0.0; d];
                    for h in 0..heads {
                        for e in &st.rows[h][q] {
                            let src = (b * n + e.road) * WINDOW + e.step;
                            for c in h * dh..(h + 1) * dh {
                                out[c] += e.weight * vv[[src, c]];
                            }
                        }
                    }
                    values.extend(out);
                }
            }
            let m = Array2::from_shape_vec((rows.len(), d), values).expect("shape");
            (rows, m)
        });

        let dec_in = tape.leaf(batch.dec.clone());
        let w = tape.param(lay.dec_in_w, &p[lay.dec_in_w]);
        let b = tape.param(lay.dec_in_b, &p[lay.dec_in_b]);
        let dx = tape.matmul(dec_in, w);
        let dx = tape.add_bias(dx, b);
        let pos_dec = tape.leaf(pos);
        let mut dx = tape.add(dx, pos_dec);
        let mut dec_causal = Vec::new();
        let mut cross = Vec::new();
        for idx in &lay.decoders {
            let (d1, ca) = self.self_attention(&mut tape, dx, &idx.causal, &causal_plan);
            dec_causal.push(ca);
            let wq = tape.param(idx.cq, &p[idx.cq]);
            let wk = tape.param(idx.ck, &p[idx.ck]);
            let wo = tape.param(idx.co, &p[idx.co]);
            let q = tape.matmul(d1, wq);
            let k = tape.matmul(encoded, wk);
            let h = tape.attention(q, k, spatial_out, full_plan.clone(), heads);
            cross.push(h);
            let h = match &replacement {
                Some((rows, vals)) => tape.replace_rows(h, rows.clone(), vals),
                None => h,
            };
            let o = tape.matmul(h, wo);
            let d2 = tape.add(d1, o);
            dx = self.ffn(&mut tape, d2, &idx.ffn);
        }
        let w = tape.param(lay.out_w, &p[lay.out_w]);
        let b = tape.param(lay.out_b, &p[lay.out_b]);
        let pred = tape.matmul(dx, w);
        let pred = tape.add_bias(pred, b);

        Forward {
            tape,
            pred,
            enc_spatial,
            enc_temporal,
            dec_causal,
            cross,
            spatial_plan,
            causal_plan,
            windows: batch.windows,
            roads: n,
        }
    }

    /// Mean absolute error (normalised units) over `starts` and its gradient
    /// with respect to every parameter.
    pub fn loss_and_gradients(&self, panel: &SpeedPanel, starts: &[usize]) -> Result<(f64, Vec<ParamTensor>)> {
        let map = self.road_map(panel)?;
        let batch = self.build_batch(panel, &map, starts)?;
        let target = Arc::new(self.targets(panel, &map, starts)?);
        let mut fwd = self.forward(&batch, None);
        let loss = fwd.tape.l1_loss(fwd.pred, target);
        let value = fwd.tape.value(loss)[[0, 0]];
        let grads = fwd.tape.backward(loss, self.params.len());
        let grads = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect();
        Ok((value, grads))
    }

    /// Mean absolute error (normalised units) without gradients.
    pub fn loss(&self, panel: &SpeedPanel, starts: &[usize]) -> Result<f64> {
        let map = self.road_map(panel)?;
        let batch = self.build_batch(panel, &map, starts)?;
        let target = self.targets(panel, &map, starts)?;
        let fwd = self.forward(&batch, None);
        let pred = fwd.tape.value(fwd.pred);
        Ok(pred
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pred.len() as f64)
    }

    /// Embedded encoder input of one window: rows `road * 12 + step`, `width`
    /// columns (projected features plus position code).
    pub fn embed(&self, panel: &SpeedPanel, start: usize) -> Result<ParamTensor> {
        let map = self.road_map(panel)?;
        let batch = self.build_batch(panel, &map, &[start])?;
        let lay = self.layout();
        let x = batch.enc.dot(&self.params[lay.enc_in_w]) + &self.params[lay.enc_in_b];
        Ok(x + self.positional(1, map.len()))
    }

    pub(crate) fn param_count(&self) -> usize {
        self.params.len()
    }
}

/// Predictions of a forward pass as `[window][road][step]`, normalised units.
pub(crate) fn raw_predictions(fwd: &Forward) -> Vec<Vec<Vec<f64>>> {
    let pred = fwd.tape.value(fwd.pred);
    (0..fwd.windows)
        .map(|b| {
            (0..fwd.roads)
                .map(|r| {
                    (0..WINDOW)
                        .map(|q| pred[[(b * fwd.roads + r) * WINDOW + q, 0]])
                        .collect()
                })
                .collect()
        })
        .collect()
}

