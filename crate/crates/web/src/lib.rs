//! Browser demo: generate a synthetic bag, route it through an untrained
//! stack whose layer-0 anchors come from K-means on the bag itself, and
//! inspect per-layer assignment maps and cosine alignment heatmaps.
//!
//! Every export returns JSON text so the page needs no bindings beyond
//! `JSON.parse`.

use mico_core::kmeans;
use mico_core::model::{Assignment, MicoConfig, MicoModel};
use mico_core::synth::{generate, SynthConfig};
use mico_core::FeatureBag;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct BagView {
    id: String,
    instances: usize,
    dim: usize,
    coords: Vec<[f64; 2]>,
    true_types: Vec<u32>,
    tumor_fraction: f64,
}

#[derive(Serialize)]
struct LayerView {
    layer: usize,
    anchors: usize,
    assigned: Vec<usize>,
    counts: Vec<usize>,
}

#[derive(Serialize)]
struct Heatmap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// A generated bag plus the model built for it.
#[wasm_bindgen]
pub struct Demo {
    bag: FeatureBag,
    model: Option<MicoModel>,
    layers: Vec<Assignment>,
}

impl Demo {
    pub fn create(seed: u64, noise_std: f64, dispersion: usize) -> Result<Demo, String> {
        let cfg = SynthConfig {
            n_bags: 1,
            d: 16,
            min_instances: 150,
            max_instances: 250,
            noise_std,
            dispersion,
            seed,
            ..SynthConfig::default()
        };
        let bag = generate(&cfg).map_err(|e| e.to_string())?.bags.remove(0);
        Ok(Demo { bag, model: None, layers: Vec::new() })
    }

    pub fn bag_json(&self) -> String {
        let types = self.bag.true_type_map.clone().unwrap_or_default();
        let tumor = types.iter().filter(|&&t| t == 0).count() as f64 / types.len().max(1) as f64;
        let view = BagView {
            id: self.bag.bag_id.clone(),
            instances: self.bag.len(),
            dim: self.bag.dim(),
            coords: self.bag.coords.clone().unwrap_or_default(),
            true_types: types,
            tumor_fraction: tumor,
        };
        serde_json::to_string(&view).expect("bag view serializes")
    }

    /// Fits `anchors` K-means centers on the bag, builds a `layers`-deep
    /// stack around them and records the routing of every layer.
    pub fn build(&mut self, anchors: usize, layers: usize, seed: u64) -> Result<String, String> {
        let err = |e: mico_core::MicoError| e.to_string();
        let config = MicoConfig { d: self.bag.dim(), anchors, layers, ..MicoConfig::default() };
        config.validate().map_err(err)?;
        let centers = kmeans::fit(&self.bag.features, anchors, 100, kmeans::DEFAULT_TOL, seed).map_err(err)?;
        let model = MicoModel::init(config, centers.centers, seed).map_err(err)?;
        self.layers = model.assignments(&self.bag).map_err(err)?;
        self.model = Some(model);
        let views: Vec<LayerView> = self
            .layers
            .iter()
            .map(|a| LayerView {
                layer: a.anchors.layer_index,
                anchors: a.anchors.anchors.rows(),
                assigned: a.assigned.clone(),
                counts: a.counts.clone(),
            })
            .collect();
        Ok(serde_json::to_string(&views).expect("layer views serialize"))
    }

    /// Alignment matrix of `layer`, `M x K`, row-major.
    pub fn alignment(&self, layer: usize) -> Result<String, String> {
        let a = self
            .layers
            .get(layer)
            .ok_or_else(|| format!("layer {layer} has not been routed"))?;
        let heat = Heatmap {
            rows: a.alignment.rows(),
            cols: a.alignment.cols(),
            values: a.alignment.data().to_vec(),
        };
        Ok(serde_json::to_string(&heat).expect("heatmap serializes"))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise_std: f64, dispersion: u32) -> Result<Demo, JsValue> {
        Demo::create(seed as u64, noise_std, dispersion as usize).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = bag)]
    pub fn bag_js(&self) -> String {
        self.bag_json()
    }

    #[wasm_bindgen(js_name = route)]
    pub fn route_js(&mut self, anchors: u32, layers: u32, seed: u32) -> Result<String, JsValue> {
        self.build(anchors as usize, layers as usize, seed as u64).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = alignment)]
    pub fn alignment_js(&self, layer: u32) -> Result<String, JsValue> {
        self.alignment(layer as usize).map_err(|e| JsValue::from_str(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_and_heatmap_shapes() {
        let mut demo = Demo::create(7, 0.1, 3).unwrap();
        let bag: serde_json::Value = serde_json::from_str(&demo.bag_json()).unwrap();
        let m = bag["instances"].as_u64().unwrap() as usize;
        assert_eq!(bag["coords"].as_array().unwrap().len(), m);

        let layers: serde_json::Value = serde_json::from_str(&demo.build(16, 3, 1).unwrap()).unwrap();
        let layers = layers.as_array().unwrap();
        assert_eq!(layers.len(), 3);
        for (l, layer) in layers.iter().enumerate() {
            assert_eq!(layer["anchors"].as_u64().unwrap(), 16 >> l);
            assert_eq!(layer["assigned"].as_array().unwrap().len(), m);
        }
        let heat: serde_json::Value = serde_json::from_str(&demo.alignment(1).unwrap()).unwrap();
        assert_eq!((heat["rows"].as_u64().unwrap(), heat["cols"].as_u64().unwrap()), (m as u64, 8));
        assert!(demo.alignment(3).is_err());
    }

    #[test]
    fn invalid_anchor_count_is_reported() {
        let mut demo = Demo::create(1, 0.1, 2).unwrap();
        assert!(demo.build(6, 2, 0).unwrap_err().contains("divisible"));
    }
}
