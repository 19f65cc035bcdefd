#![allow(dead_code)]

use std::path::PathBuf;

use dpp::model::SPEED_OF_LIGHT;
use dpp::scenario::Scenario;
use dpp::{ClockModel, Node, NodeRole, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.json"))
}

pub fn fixture(name: &str) -> Scenario {
    Scenario::load(&fixture_path(name), dpp::model::DEFAULT_MAX_DRIFT)
        .expect("bundled fixture parses")
}

pub fn fixture_system(name: &str) -> System {
    fixture(name)
        .system()
        .expect("bundled fixture is a valid system")
}

/// 3 to 7 nodes in a 30 m box, at least two Bilaterals, no two closer than
/// half a meter. Clock offsets in `±max_offset` s, drifts in `±max_drift`.
pub fn random_system(seed: u64, dim: usize, max_offset: f64, max_drift: f64) -> System {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=7);
    let mut positions: Vec<Vec<f64>> = Vec::new();
    while positions.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..30.0)).collect();
        let far = positions.iter().all(|q| {
            q.iter()
                .zip(&p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                > 0.5
        });
        if far {
            positions.push(p);
        }
    }
    let nodes = positions
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let role = if i < 2 {
                NodeRole::Bilateral
            } else {
                [NodeRole::Passive, NodeRole::Active, NodeRole::Bilateral][rng.random_range(0..3)]
            };
            let offset = if max_offset > 0.0 {
                rng.random_range(-max_offset..=max_offset)
            } else {
                0.0
            };
            let drift = if max_drift > 0.0 {
                rng.random_range(-max_drift..=max_drift)
            } else {
                0.0
            };
            let pos = dpp::Position::new(p).unwrap();
            Node::new(10 + i as u32, role, pos).with_clock(ClockModel::new(offset, drift).unwrap())
        })
        .collect();
    System::new(nodes, SPEED_OF_LIGHT).unwrap()
}
