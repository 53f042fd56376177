//! Synthetic maps, recorded tracks and the scene encoding.

mod map;
mod route;
mod scene;

pub use map::{
    build_synthetic_world, LaneId, LanePolyline, LightPhase, PhaseSpan, Span, Template, TrafficLight,
    WorldGenSpec, WorldMap,
};
pub use route::{project_onto_route, RoutePath, RouteProjection};
pub use scene::{
    front_blocked, snapshot_scene, vectorize_scene, AgentHistory, AgentTrack, EgoState, FeatureLayout,
    Footprint, History, LayoutDescriptor, LightState, MapVector, RowKind, Scene, SceneTensor, TrackState,
    CORRIDOR_MARGIN, FEATURE_DIM, FEATURE_NAMES,
};
