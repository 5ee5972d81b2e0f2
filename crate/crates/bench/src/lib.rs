//! Fixtures shared by the benchmarks: the bundled harbor and the nominal
//! docking setup.

use dock_core::{
    extract_convex_region_toward, ConvexRegion, DockingSpec, HarborMap, ModelParams, Pose,
    VesselState,
};
use nalgebra::Vector2;

pub fn harbor() -> HarborMap {
    HarborMap::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../data/harbor.json"
    ))
    .expect("bundled harbor map loads")
    .0
}

pub struct Nominal {
    pub map: HarborMap,
    pub params: ModelParams,
    pub spec: DockingSpec,
    pub start: VesselState,
    pub region: ConvexRegion,
}

/// Start 38 m south of a berth at (-0.5, 0), at rest, with the region the
/// planner would get there.
pub fn nominal() -> Nominal {
    let map = harbor();
    let params = ModelParams::default();
    let dock = Pose::new(-0.5, 0.0, 0.0);
    let start = VesselState::at_rest(Pose::new(-38.0, -2.0, 0.0));
    let region =
        extract_convex_region_toward(&map, &start.pose.position(), Some(&dock.position()), 8)
            .expect("start lies in open water");
    Nominal {
        spec: DockingSpec::new(dock, &params),
        map,
        params,
        start,
        region,
    }
}

/// Free-water sample points spread over the harbor.
pub fn probe_points() -> Vec<Vector2<f64>> {
    vec![
        Vector2::new(-38.0, -2.0),
        Vector2::new(-15.0, 0.0),
        Vector2::new(-25.0, 18.0),
        Vector2::new(-60.0, -40.0),
        Vector2::new(-2.0, 5.0),
    ]
}
