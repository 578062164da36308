//! Semantic scene model and the relational-grid state encoding.
//!
//! A scene is first lifted into an entity-relationship view (vehicles and
//! lane segments plus vehicle-vehicle, vehicle-lane and lane-lane
//! relations), then projected onto a fixed-size grid centered on the ego:
//! rows are lanes relative to the ego (top = leftmost), columns are
//! longitudinal slots (behind ranks | alongside | ahead ranks) and layers
//! carry one feature each. The grid shape depends only on the vehicle
//! scope, never on the road geometry or the number of vehicles, so one
//! network input works across scenarios.
//!
//! Cells without a vehicle carry a sentinel value outside the scaled range
//! of every real feature plus a zero presence mask; rows pointing beyond
//! the road edge carry the sentinel in their lane layers as well, which
//! distinguishes "lane exists but empty" from "no lane at all".

use serde::{Deserialize, Serialize};

use crate::sim::{LaneType, TrafficScene};

/// Bounds on which surrounding vehicles enter the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleScope {
    /// Adjacent lanes considered on each side of the ego lane.
    pub lateral: usize,
    /// Vehicles per lane ahead of the ego.
    pub ahead: usize,
    /// Vehicles per lane behind the ego.
    pub behind: usize,
}

impl Default for VehicleScope {
    fn default() -> Self {
        Self { lateral: 2, ahead: 2, behind: 1 }
    }
}

impl VehicleScope {
    pub fn rows(&self) -> usize {
        2 * self.lateral + 1
    }

    pub fn cols(&self) -> usize {
        self.behind + 1 + self.ahead
    }
}

/// Fixed normalization constants mapping raw features to roughly [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    /// Speed scale for velocities and the behavior-adaptation value.
    pub speed_scale: f64,
    /// Half lane width; scales lateral alignment.
    pub half_lane_width: f64,
    /// Heading scale (rad).
    pub phi_scale: f64,
    /// Distances to lane ends are capped here and scaled by it.
    pub lane_end_cap: f64,
    /// Scale for the ego lane index feature.
    pub lane_index_scale: f64,
    /// Dedicated out-of-range value for absent vehicles and lanes.
    pub sentinel: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            speed_scale: 40.0,
            half_lane_width: 1.75,
            phi_scale: std::f64::consts::FRAC_PI_4,
            lane_end_cap: 500.0,
            lane_index_scale: 4.0,
            sentinel: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub scope: VehicleScope,
    /// Vehicles farther than this from the ego are invisible (m).
    pub sensor_range: f64,
    pub norm: NormConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { scope: VehicleScope::default(), sensor_range: 100.0, norm: NormConfig::default() }
    }
}

impl EncoderConfig {
    /// Length of the flattened network input for this scope.
    pub fn input_dim(&self) -> usize {
        self.scope.rows() * self.scope.cols() * StateTensor::LAYERS
    }
}

// --- Entity-relationship model ----------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleEntity {
    pub id: u64,
    pub lane: i64,
    pub s: f64,
    pub v: f64,
    pub d: f64,
    pub phi: f64,
    pub length: f64,
    pub is_ego: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneEntity {
    pub index: i64,
    pub lane_type: LaneType,
    /// Lane end relative to the ego (m).
    pub end_delta_s: f64,
}

/// Ego-to-other longitudinal relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleVehicleRel {
    pub other: u64,
    pub delta_s: f64,
    pub delta_v: f64,
}

/// Vehicle-to-occupied-lane relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleLaneRel {
    pub vehicle: u64,
    pub lane_index: i64,
    pub delta_d: f64,
    pub delta_phi: f64,
}

/// Left/right adjacency between present lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneLaneRel {
    pub right: i64,
    pub left: i64,
}

/// Entity-relationship view of the scene around the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct ErModel {
    pub vehicles: Vec<VehicleEntity>,
    pub lanes: Vec<LaneEntity>,
    pub vehicle_vehicle: Vec<VehicleVehicleRel>,
    pub vehicle_lane: Vec<VehicleLaneRel>,
    pub lane_lane: Vec<LaneLaneRel>,
}

impl ErModel {
    pub fn ego(&self) -> &VehicleEntity {
        self.vehicles
            .iter()
            .find(|v| v.is_ego)
            .expect("ER model invariant violated: no ego entity")
    }

    pub fn vehicle(&self, id: u64) -> Option<&VehicleEntity> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn lane(&self, index: i64) -> Option<&LaneEntity> {
        self.lanes.iter().find(|l| l.index == index)
    }

    pub fn relation_to(&self, id: u64) -> Option<&VehicleVehicleRel> {
        self.vehicle_vehicle.iter().find(|r| r.other == id)
    }
}

/// Lift a scene into the entity-relationship view. Exactly the vehicles
/// within `sensor_range` of the ego (inclusive) and the lane segments at the
/// ego's cross-section are present.
pub fn build_er_model(scene: &TrafficScene, sensor_range: f64) -> ErModel {
    let ego = scene.ego().clone();

    let mut vehicles: Vec<VehicleEntity> = scene
        .vehicles
        .iter()
        .filter(|v| v.is_ego || (v.s - ego.s).abs() <= sensor_range)
        .map(|v| VehicleEntity {
            id: v.id,
            lane: v.lane,
            s: v.s,
            v: v.v,
            d: v.d,
            phi: v.phi,
            length: v.length,
            is_ego: v.is_ego,
        })
        .collect();
    vehicles.sort_by_key(|v| v.id);

    let mut lanes: Vec<LaneEntity> = scene
        .lanes
        .iter()
        .filter(|l| l.contains(ego.s))
        .map(|l| LaneEntity {
            index: l.index,
            lane_type: l.lane_type,
            end_delta_s: l.end_s - ego.s,
        })
        .collect();
    lanes.sort_by_key(|l| l.index);

    let vehicle_vehicle = vehicles
        .iter()
        .filter(|v| !v.is_ego)
        .map(|v| VehicleVehicleRel { other: v.id, delta_s: v.s - ego.s, delta_v: v.v - ego.v })
        .collect();

    let vehicle_lane = vehicles
        .iter()
        .map(|v| VehicleLaneRel {
            vehicle: v.id,
            lane_index: v.lane,
            delta_d: v.d,
            delta_phi: v.phi,
        })
        .collect();

    let lane_lane = lanes
        .iter()
        .filter(|l| lanes.iter().any(|m| m.index == l.index + 1))
        .map(|l| LaneLaneRel { right: l.index, left: l.index + 1 })
        .collect();

    ErModel { vehicles, lanes, vehicle_vehicle, vehicle_lane, lane_lane }
}

// --- Scope selection ----------------------------------------------------------

/// Grid placement of one selected vehicle: `lane_offset` is its lane minus
/// the ego lane; `rank` is negative behind, zero alongside, positive ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectedVehicle {
    pub id: u64,
    pub lane_offset: i64,
    pub rank: i64,
}

/// Select the vehicles inside the scope and assign their grid slots.
///
/// Per lane within the lateral scope: vehicles ahead (`delta_s > 0`) fill the
/// ahead ranks nearest-first, vehicles behind (`delta_s <= 0`) the behind
/// ranks. On adjacent lanes a vehicle longitudinally overlapping the ego
/// occupies the alongside slot (the grid's center column). Ties are broken
/// by vehicle id. Everything else is dropped.
pub fn select_scope(er: &ErModel, scope: &VehicleScope) -> Vec<SelectedVehicle> {
    let ego = er.ego();
    let mut selected = Vec::new();

    for offset in -(scope.lateral as i64)..=(scope.lateral as i64) {
        let lane = ego.lane + offset;
        let mut on_lane: Vec<(&VehicleEntity, f64)> = er
            .vehicles
            .iter()
            .filter(|v| !v.is_ego && v.lane == lane)
            .map(|v| (v, v.s - ego.s))
            .collect();

        let mut alongside_id = None;
        if offset != 0 {
            // Alongside: driving next to the ego (longitudinal overlap).
            let alongside = on_lane
                .iter()
                .filter(|(v, ds)| ds.abs() < 0.5 * (v.length + ego.length))
                .min_by(|(a, da), (b, db)| {
                    da.abs()
                        .partial_cmp(&db.abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.id.cmp(&b.id))
                })
                .map(|(v, _)| v.id);
            if let Some(id) = alongside {
                selected.push(SelectedVehicle { id, lane_offset: offset, rank: 0 });
                alongside_id = Some(id);
            }
        }
        on_lane.retain(|(v, _)| Some(v.id) != alongside_id);

        let mut ahead: Vec<_> = on_lane.iter().filter(|(_, ds)| *ds > 0.0).collect();
        ahead.sort_by(|(a, da), (b, db)| {
            da.partial_cmp(db).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
        });
        for (rank, (v, _)) in ahead.iter().take(scope.ahead).enumerate() {
            selected.push(SelectedVehicle { id: v.id, lane_offset: offset, rank: rank as i64 + 1 });
        }

        let mut behind: Vec<_> = on_lane.iter().filter(|(_, ds)| *ds <= 0.0).collect();
        behind.sort_by(|(a, da), (b, db)| {
            db.partial_cmp(da).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
        });
        for (rank, (v, _)) in behind.iter().take(scope.behind).enumerate() {
            selected.push(SelectedVehicle {
                id: v.id,
                lane_offset: offset,
                rank: -(rank as i64 + 1),
            });
        }
    }

    selected
}

// --- State tensor --------------------------------------------------------------

/// Fixed-size multi-layer relational grid; flattens to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl StateTensor {
    /// Feature layers per cell: four vehicle layers (shared by the ego cell,
    /// which holds its own feature triple instead), two lane layers and the
    /// presence mask.
    pub const LAYERS: usize = 7;
    pub const L_DELTA_S: usize = 0;
    pub const L_DELTA_V: usize = 1;
    pub const L_DELTA_D: usize = 2;
    pub const L_DELTA_PHI: usize = 3;
    pub const L_LANE_TYPE: usize = 4;
    pub const L_LANE_END: usize = 5;
    pub const L_MASK: usize = 6;

    fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols * Self::LAYERS] }
    }

    fn offset(&self, row: usize, col: usize, layer: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols && layer < Self::LAYERS);
        (row * self.cols + col) * Self::LAYERS + layer
    }

    pub fn get(&self, row: usize, col: usize, layer: usize) -> f64 {
        self.data[self.offset(row, col, layer)]
    }

    fn set(&mut self, row: usize, col: usize, layer: usize, value: f64) {
        let idx = self.offset(row, col, layer);
        self.data[idx] = value;
    }

    /// Flatten in the documented order: row-major over cells, layers
    /// innermost (`index = (row * cols + col) * LAYERS + layer`).
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Behavior-adaptation value: desired minus actual ego speed.
pub fn behavior_adaptation(scene: &TrafficScene, theta_v: f64) -> f64 {
    theta_v - scene.ego().v
}

/// Encode the selected vehicles into the grid. `theta_v` parameterizes the
/// ego's behavior-adaptation feature.
pub fn encode(
    er: &ErModel,
    selection: &[SelectedVehicle],
    config: &EncoderConfig,
    theta_v: f64,
) -> StateTensor {
    let scope = &config.scope;
    let norm = &config.norm;
    let mut tensor = StateTensor::filled(scope.rows(), scope.cols(), norm.sentinel);
    let ego = er.ego();

    // Mask layer defaults to 0 (absent) everywhere.
    for row in 0..tensor.rows {
        for col in 0..tensor.cols {
            tensor.set(row, col, StateTensor::L_MASK, 0.0);
        }
    }

    // Lane layers per row; rows beyond the road edge keep the sentinel.
    for offset in -(scope.lateral as i64)..=(scope.lateral as i64) {
        let row = (scope.lateral as i64 - offset) as usize;
        if let Some(lane) = er.lane(ego.lane + offset) {
            let type_code = match lane.lane_type {
                LaneType::Normal => 0.0,
                LaneType::Acceleration => 1.0,
            };
            let end = lane.end_delta_s.clamp(0.0, norm.lane_end_cap);
            for col in 0..tensor.cols {
                tensor.set(row, col, StateTensor::L_LANE_TYPE, type_code);
                tensor.set(row, col, StateTensor::L_LANE_END, end / norm.lane_end_cap);
            }
        }
    }

    // Ego cell: behavior adaptation, own speed, lane index; spare layer zero.
    let ego_row = scope.lateral;
    let ego_col = scope.behind;
    let omega = theta_v - ego.v;
    tensor.set(ego_row, ego_col, StateTensor::L_DELTA_S, omega / norm.speed_scale);
    tensor.set(ego_row, ego_col, StateTensor::L_DELTA_V, ego.v / norm.speed_scale);
    tensor.set(ego_row, ego_col, StateTensor::L_DELTA_D, ego.lane as f64 / norm.lane_index_scale);
    tensor.set(ego_row, ego_col, StateTensor::L_DELTA_PHI, 0.0);
    tensor.set(ego_row, ego_col, StateTensor::L_MASK, 1.0);

    for sel in selection {
        let Some(rel) = er.relation_to(sel.id) else { continue };
        let Some(entity) = er.vehicle(sel.id) else { continue };
        let row = (scope.lateral as i64 - sel.lane_offset) as usize;
        let col = (scope.behind as i64 + sel.rank) as usize;
        tensor.set(row, col, StateTensor::L_DELTA_S, rel.delta_s / config.sensor_range);
        tensor.set(row, col, StateTensor::L_DELTA_V, rel.delta_v / norm.speed_scale);
        tensor.set(row, col, StateTensor::L_DELTA_D, entity.d / norm.half_lane_width);
        tensor.set(row, col, StateTensor::L_DELTA_PHI, entity.phi / norm.phi_scale);
        tensor.set(row, col, StateTensor::L_MASK, 1.0);
    }

    tensor
}

/// Scene to state tensor in one call.
pub fn encode_scene(scene: &TrafficScene, config: &EncoderConfig, theta_v: f64) -> StateTensor {
    let er = build_er_model(scene, config.sensor_range);
    let selection = select_scope(&er, &config.scope);
    encode(&er, &selection, config, theta_v)
}
