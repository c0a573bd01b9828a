//! Per-instance assignment tables for drawing spatial cluster maps.

use crate::bag::FeatureBag;
use crate::error::Result;
use crate::model::{Assignment, MicoModel};

/// One row per instance: index, coordinates, true tissue type when known, and
/// the anchor chosen at every layer. Whitespace separated with a `#` header.
pub fn render_assignments(bag: &FeatureBag, layers: &[Assignment]) -> String {
    let mut out = format!("# bag {} instances {} layers {}\n", bag.bag_id, bag.len(), layers.len());
    out.push_str("instance x y true_type");
    for l in 0..layers.len() {
        out.push_str(&format!(" layer{l}"));
    }
    out.push('\n');
    for i in 0..bag.len() {
        let (x, y) = match &bag.coords {
            Some(c) => (c[i][0].to_string(), c[i][1].to_string()),
            None => ("NA".into(), "NA".into()),
        };
        let t = bag.true_type_map.as_ref().map_or("NA".to_string(), |t| t[i].to_string());
        out.push_str(&format!("{i} {x} {y} {t}"));
        for a in layers {
            out.push_str(&format!(" {}", a.assigned[i]));
        }
        out.push('\n');
    }
    out
}

pub fn export_assignments(model: &MicoModel, bag: &FeatureBag) -> Result<String> {
    let layers = model.assignments(bag)?;
    Ok(render_assignments(bag, &layers))
}

/// Parses the anchor columns back out of an export: `rows[instance][layer]`.
pub fn parse_assignments(text: &str) -> Vec<Vec<usize>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("instance"))
        .map(|l| l.split_whitespace().skip(4).filter_map(|v| v.parse().ok()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn export_shape_and_zero_noise_grouping() {
        let data = generate(&SynthConfig { n_bags: 3, d: 8, noise_std: 0.0, seed: 5, ..Default::default() }).unwrap();
        let pool = kmeans::subsample_pool(&data.bags, 1000, 1).unwrap();
        let cfg = crate::model::MicoConfig { d: 8, anchors: 8, layers: 3, ..Default::default() };
        let anchors = kmeans::fit(&pool, 8, 50, 1e-6, 2).unwrap().centers;
        let model = MicoModel::init(cfg, anchors, 3).unwrap();
        for bag in &data.bags {
            let text = export_assignments(&model, bag).unwrap();
            let rows = parse_assignments(&text);
            assert_eq!(rows.len(), bag.len());
            for row in &rows {
                assert_eq!(row.len(), 3);
                for (l, &a) in row.iter().enumerate() {
                    assert!(a < 8 >> l);
                }
            }
            let types = bag.true_type_map.as_ref().unwrap();
            for t in 0..6u32 {
                let chosen: Vec<usize> = (0..bag.len()).filter(|&i| types[i] == t).map(|i| rows[i][0]).collect();
                assert!(chosen.windows(2).all(|w| w[0] == w[1]), "type {t} split across anchors");
            }
        }
    }
}
