//! Dataset directories: `speeds.csv` (gaps left empty), `graph.csv`,
//! optional `coords.csv` and a small `dataset.json`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnlens_core::data::{
    fill_missing, load_coords_csv, load_graph_csv, load_speed_csv, write_coords_csv, write_graph_csv,
    write_speed_csv, RoadNetwork, SpeedPanel, SpeedUnit,
};
use serde::{Deserialize, Serialize};

pub const SPEEDS: &str = "speeds.csv";
pub const GRAPH: &str = "graph.csv";
pub const COORDS: &str = "coords.csv";
pub const META: &str = "dataset.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub unit: SpeedUnit,
}

pub struct Dataset {
    pub meta: DatasetMeta,
    /// Filled panel; imputed cells are masked.
    pub panel: SpeedPanel,
    pub network: RoadNetwork,
}

impl Dataset {
    pub fn files(dir: &Path) -> Vec<PathBuf> {
        [META, SPEEDS, GRAPH, COORDS]
            .iter()
            .map(|f| dir.join(f))
            .filter(|p| p.exists())
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta_path = dir.join(META);
        let meta: DatasetMeta = serde_json::from_slice(
            &std::fs::read(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?,
        )
        .with_context(|| format!("parsing {}", meta_path.display()))?;
        let raw = load_speed_csv(dir.join(SPEEDS), meta.unit)?;
        let imputed = raw.imputed_count();
        let panel = fill_missing(&raw)?;
        if imputed > 0 {
            tracing::info!("imputed {imputed} missing cells");
        }
        let network = network_for(&panel, &dir.join(GRAPH), Some(&dir.join(COORDS)))?;
        Ok(Dataset { meta, panel, network })
    }

    /// Writes the raw (unfilled) panel and graph into `dir`.
    pub fn write(dir: &Path, meta: &DatasetMeta, raw: &SpeedPanel, network: &RoadNetwork) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_speed_csv(dir.join(SPEEDS), raw)?;
        write_graph_csv(dir.join(GRAPH), network.edges())?;
        if !network.all_coords().is_empty() {
            write_coords_csv(dir.join(COORDS), network.all_coords())?;
        }
        std::fs::write(dir.join(META), serde_json::to_vec_pretty(meta)?)?;
        Ok(())
    }
}

/// Network over the panel's roads, edges from `graph`, coordinates if present.
pub fn network_for(panel: &SpeedPanel, graph: &Path, coords: Option<&Path>) -> Result<RoadNetwork> {
    let edges = load_graph_csv(graph)?;
    for e in &edges {
        for r in [&e.from, &e.to] {
            if panel.road_index(r).is_none() {
                bail!("graph references road {r}, which has no speed readings");
            }
        }
    }
    let mut network = RoadNetwork::new(panel.roads().to_vec(), edges)?;
    if let Some(c) = coords.filter(|c| c.exists()) {
        network = network.with_coords(load_coords_csv(c)?)?;
    }
    Ok(network)
}
