// The dashboard's single mutable state and the pure update rules feeding
// it. Color law: a panel is RED exactly when the node's alert state was
// Raised in the latest event (or snapshot fetch) received for it, and a
// node's map marker always shows the panel's color. All alert logic lives
// on the server; this module only folds server facts into view state.

import type {
  AlertDoc,
  AlertEventData,
  ConnectionStatus,
  GatewayEvent,
  MapDoc,
  NodeSnapshotDoc,
  PanelColor,
  SnapshotEventData,
} from "./types.js";

export interface NodePanel {
  nodeId: string;
  spec: NodeSnapshotDoc["spec"];
  latDeg: number;
  lonDeg: number;
  flowLpm: number | null;
  garbageLevelCm: number | null;
  gasPpm: number | null;
  evaluation: "Normal" | "Warning" | null;
  color: PanelColor;
  activeAlertId: string | null;
  lastTimestampMs: number | null;
}

export interface ViewModel {
  nodes: Map<string, NodePanel>;
  alerts: Map<string, AlertDoc>;
  lastEventId: number;
  connection: ConnectionStatus;
  needsResync: boolean;
}

export function createViewModel(): ViewModel {
  return {
    nodes: new Map(),
    alerts: new Map(),
    lastEventId: 0,
    connection: "connecting",
    needsResync: false,
  };
}

export function applyInitialState(
  vm: ViewModel,
  nodes: NodeSnapshotDoc[],
  map: MapDoc,
  activeAlerts: AlertDoc[],
): void {
  vm.nodes.clear();
  for (const doc of nodes) {
    vm.nodes.set(doc.node_id, {
      nodeId: doc.node_id,
      spec: doc.spec,
      latDeg: doc.position.lat_deg,
      lonDeg: doc.position.lon_deg,
      flowLpm: doc.latest?.flow_lpm ?? null,
      garbageLevelCm: doc.latest?.garbage_level_cm ?? null,
      gasPpm: doc.latest?.gas_ppm ?? null,
      evaluation: doc.latest?.evaluation ?? null,
      color: doc.alert_state === "Raised" ? "RED" : "GREEN",
      activeAlertId: doc.active_alert_id,
      lastTimestampMs: doc.latest?.timestamp_ms ?? null,
    });
  }
  // the map document is the server's own view of marker colors; trust it
  for (const feature of map.features) {
    const panel = vm.nodes.get(feature.properties.node_id);
    if (panel) {
      panel.color = feature.properties.state;
      if (feature.properties.garbage_level_cm !== null) {
        panel.garbageLevelCm = feature.properties.garbage_level_cm;
      }
    }
  }
  vm.alerts.clear();
  for (const alert of activeAlerts) {
    vm.alerts.set(alert.alert_id, alert);
  }
  vm.needsResync = false;
}

/** Outcome of applying one SSE event in stream order. */
export type ApplyResult = "applied" | "gap" | "resync";

export function applyEvent(vm: ViewModel, event: GatewayEvent): ApplyResult {
  if (event.event === "resync") {
    vm.needsResync = true;
    return "resync";
  }
  if (event.id !== undefined) {
    if (vm.lastEventId !== 0 && event.id !== vm.lastEventId + 1) {
      // lost events between lastEventId and here: view state is suspect
      vm.needsResync = true;
      return "gap";
    }
    vm.lastEventId = event.id;
  }
  if (event.event === "snapshot") {
    applySnapshot(vm, event.data as SnapshotEventData);
  } else if (event.event === "alert") {
    applyAlert(vm, event.data as AlertEventData);
  }
  return "applied";
}

function applySnapshot(vm: ViewModel, data: SnapshotEventData): void {
  const panel = vm.nodes.get(data.node_id);
  if (!panel) return; // node not configured when we synced; resync will pick it up
  panel.flowLpm = data.flow_lpm;
  panel.garbageLevelCm = data.garbage_level_cm;
  panel.gasPpm = data.gas_ppm;
  panel.evaluation = data.evaluation;
  panel.lastTimestampMs = data.timestamp_ms;
  panel.color = data.alert_state === "Raised" ? "RED" : "GREEN";
  if (data.alert_state !== "Raised") {
    panel.activeAlertId = null;
  }
}

function applyAlert(vm: ViewModel, data: AlertEventData): void {
  const panel = vm.nodes.get(data.node_id);
  if (data.direction === "Raised") {
    if (panel) {
      panel.color = "RED";
      panel.activeAlertId = data.alert_id;
    }
    vm.alerts.set(data.alert_id, {
      alert_id: data.alert_id,
      node_id: data.node_id,
      causes: data.causes,
      garbage_level_cm: data.garbage_level_cm,
      raised_at_ms: data.at_ms,
      lat_deg: data.lat_deg,
      lon_deg: data.lon_deg,
      dispatched_to: "",
      dispatch: null,
      ack: null,
      cleared_at_ms: null,
      active: true,
    });
  } else {
    if (panel && panel.activeAlertId === data.alert_id) {
      panel.color = "GREEN";
      panel.activeAlertId = null;
    } else if (panel) {
      panel.color = "GREEN";
    }
    const alert = vm.alerts.get(data.alert_id);
    if (alert) {
      alert.active = false;
      alert.cleared_at_ms = data.at_ms;
    }
  }
}

export function upsertAlert(vm: ViewModel, alert: AlertDoc): void {
  vm.alerts.set(alert.alert_id, alert);
  const panel = vm.nodes.get(alert.node_id);
  if (panel && panel.activeAlertId === alert.alert_id && !alert.active) {
    panel.color = "GREEN";
    panel.activeAlertId = null;
  }
}

// -- derived views ----------------------------------------------------------

export function panelColor(vm: ViewModel, nodeId: string): PanelColor | undefined {
  return vm.nodes.get(nodeId)?.color;
}

/** Marker color mirrors the panel by invariant. */
export function markerColor(vm: ViewModel, nodeId: string): PanelColor | undefined {
  return panelColor(vm, nodeId);
}

export function activeAlerts(vm: ViewModel): AlertDoc[] {
  return [...vm.alerts.values()]
    .filter((a) => a.active)
    .sort((a, b) => a.raised_at_ms - b.raised_at_ms || a.alert_id.localeCompare(b.alert_id));
}

export function allGreen(vm: ViewModel): boolean {
  return [...vm.nodes.values()].every((n) => n.color === "GREEN");
}

/** Comparable digest used by the convergence tests and for cheap re-render checks. */
export function digest(vm: ViewModel): string {
  const nodes = [...vm.nodes.values()]
    .sort((a, b) => a.nodeId.localeCompare(b.nodeId))
    .map((n) => ({
      id: n.nodeId,
      color: n.color,
      flow: n.flowLpm,
      garbage: n.garbageLevelCm,
      gas: n.gasPpm,
      alert: n.activeAlertId,
    }));
  const alerts = activeAlerts(vm).map((a) => ({ id: a.alert_id, node: a.node_id, ack: a.ack?.operator_id ?? null }));
  return JSON.stringify({ nodes, alerts });
}
