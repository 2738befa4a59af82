//! Browser demo: a two-dimensional box network trained in the page.
//!
//! Embeddings live on the unit circle, so every box and every sample can be
//! drawn directly. All methods return JSON strings.

use regibox::boxnet::{corners_from_raw, train_stage1, BoxNetModel, Stage1Config, TextAnchors};
use regibox::eval::{run_protocol, ExperimentConfig, Method, Protocol};
use regibox::sampler::{sample_from_box, sample_raw, AugmentationConfig};
use regibox::seed;
use regibox::store::DatasetBundle;
use regibox::synth::{generate_bundle, BundleSpec, MeanLayout, SyntheticSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn json(value: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(js_err)
}

#[derive(Serialize)]
struct Point {
    x: [f64; 2],
    label: u32,
}

#[derive(Serialize)]
struct Scene {
    points: Vec<Point>,
    anchors: Vec<[f64; 2]>,
    class_names: Vec<String>,
}

#[derive(Serialize)]
struct TrainView {
    initial_loss: f64,
    final_loss: f64,
    corner_accuracy: f64,
    losses: Vec<f64>,
    /// `[lower, upper]` per training point.
    boxes: Vec<[[f64; 2]; 2]>,
}

#[derive(Serialize)]
struct SampleView {
    lower: [f64; 2],
    upper: [f64; 2],
    raw: Vec<[f64; 2]>,
    normalized: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct Comparison {
    shots: usize,
    samples: usize,
    probe: f64,
    lare: f64,
}

fn pair(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

#[wasm_bindgen]
pub struct Demo {
    bundle: DatasetBundle,
    model: Option<BoxNetModel>,
    stage1: Stage1Config,
}

#[wasm_bindgen]
impl Demo {
    /// Three classes on the unit circle with random means.
    #[wasm_bindgen(constructor)]
    pub fn new(per_class: usize, sigma: f64, seed: u64) -> Result<Demo, JsError> {
        let mut base = SyntheticSpec::new(2, 3, per_class, sigma, seed);
        base.layout = MeanLayout::Random;
        let bundle = generate_bundle(&BundleSpec {
            base,
            eval_per_class: 100,
            shift_magnitude: None,
        })
        .map_err(js_err)?;
        Ok(Demo {
            bundle,
            model: None,
            stage1: Stage1Config::default(),
        })
    }

    /// Training points and class text anchors.
    pub fn scene(&self) -> Result<String, JsError> {
        let train = &self.bundle.train;
        json(&Scene {
            points: (0..train.count())
                .map(|i| Point {
                    x: pair(&train.row_f64(i)),
                    label: train.labels[i],
                })
                .collect(),
            anchors: self.bundle.class_text.rows_f64().iter().map(|r| pair(r)).collect(),
            class_names: self.bundle.class_text.class_names.clone(),
        })
    }

    /// Runs Stage 1 and returns the loss curve and every training point's box.
    pub fn train(
        &mut self,
        alpha: f64,
        hidden: usize,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<String, JsError> {
        self.stage1 = Stage1Config {
            alpha,
            epochs,
            learning_rate,
            hidden: Some(vec![hidden]),
            seed: seed::derive(seed, "stage1"),
            ..Stage1Config::default()
        };
        let anchors = TextAnchors::from(&self.bundle.class_text);
        let out = train_stage1(&self.bundle.train, &self.bundle.val, &anchors, &self.stage1).map_err(js_err)?;
        let train = &self.bundle.train;
        let mut boxes = Vec::with_capacity(train.count());
        for i in 0..train.count() {
            let (a, b) = out.model.forward(&train.row_f64(i)).map_err(js_err)?;
            let bx = corners_from_raw(&a, &b).map_err(js_err)?;
            boxes.push([pair(&bx.lower), pair(&bx.upper)]);
        }
        let last = out.trace.epochs.last().expect("at least one epoch");
        let view = TrainView {
            initial_loss: out.trace.initial.total,
            final_loss: last.total,
            corner_accuracy: last.corner_accuracy,
            losses: std::iter::once(&out.trace.initial)
                .chain(&out.trace.epochs)
                .map(|r| r.total)
                .collect(),
            boxes,
        };
        self.model = Some(out.model);
        json(&view)
    }

    /// Draws `k` points from the box of training point `index`.
    pub fn sample(&self, index: usize, k: usize, seed: u64) -> Result<String, JsError> {
        let model = self.model.as_ref().ok_or_else(|| JsError::new("train the box network first"))?;
        let train = &self.bundle.train;
        if index >= train.count() {
            return Err(JsError::new(&format!("point {index} out of range")));
        }
        let (a, b) = model.forward(&train.row_f64(index)).map_err(js_err)?;
        let bx = corners_from_raw(&a, &b).map_err(js_err)?;
        let mut rng = seed::rng(seed::derive(seed, "demo-raw"));
        json(&SampleView {
            lower: pair(&bx.lower),
            upper: pair(&bx.upper),
            raw: sample_raw(&bx, k, &mut rng).iter().map(|p| pair(p)).collect(),
            normalized: sample_from_box(&bx, k, seed)
                .map_err(js_err)?
                .iter()
                .map(|p| pair(p))
                .collect(),
        })
    }

    /// Few-shot test accuracy of the plain probe and of LARE, averaged over three seeds.
    pub fn compare(&self, shots: usize, samples: usize) -> Result<String, JsError> {
        let cfg = ExperimentConfig {
            stage1: self.stage1.clone(),
            augmentation: AugmentationConfig {
                samples_per_image: samples,
                ..AugmentationConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let seeds = [0, 1, 2];
        let protocol = Protocol::FewShot(shots);
        let probe = run_protocol(&self.bundle, protocol, Method::Probe, &seeds, &cfg).map_err(js_err)?;
        let lare = run_protocol(&self.bundle, protocol, Method::Lare, &seeds, &cfg).map_err(js_err)?;
        json(&Comparison {
            shots,
            samples,
            probe: probe.in_domain.mean,
            lare: lare.in_domain.mean,
        })
    }
}
